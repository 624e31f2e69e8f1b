//! Lévy model, mark measure, time nets and simulated path bundles.
//!
//! The jump part is finite-activity with an atomic Lévy measure
//! `ν = Σ_j λ_j δ_{x_j}`. The mark measure is `μ = σ²δ₀ + Σ_j x_j² λ_j δ_{x_j}`
//! and the random measure `M(dt,dx) = σ dW_t δ₀(dx) + x Ñ(dt,dx)` is exposed
//! through [`PathBundle::m_increment`].
//!
//! Paths store Brownian increments per net interval and jump events as exact
//! `(time, atom)` pairs; the compensator `t·Σλ_j x_j` is applied when `X` is
//! evaluated.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamFactory};

/// One atom `(x_j, λ_j)` of the Lévy measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpAtom {
    pub size: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevyModel {
    gamma: f64,
    sigma: f64,
    jump_atoms: Vec<JumpAtom>,
    horizon: f64,
}

impl LevyModel {
    pub fn new(gamma: f64, sigma: f64, jump_atoms: Vec<JumpAtom>, horizon: f64) -> Result<Self> {
        if !gamma.is_finite() {
            return Err(Error::InvalidModel("gamma must be finite".into()));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidModel(format!("sigma must be >= 0, got {sigma}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidModel(format!("horizon must be > 0, got {horizon}")));
        }
        for (i, a) in jump_atoms.iter().enumerate() {
            if a.size == 0.0 || !a.size.is_finite() {
                return Err(Error::InvalidModel(format!("jump atom {i}: size must be nonzero")));
            }
            if !(a.intensity > 0.0 && a.intensity.is_finite()) {
                return Err(Error::InvalidModel(format!("jump atom {i}: intensity must be > 0")));
            }
            if jump_atoms[..i].iter().any(|b| b.size == a.size) {
                return Err(Error::InvalidModel(format!("jump atom {i}: duplicate size {}", a.size)));
            }
        }
        if sigma == 0.0 && jump_atoms.is_empty() {
            return Err(Error::InvalidModel("model has neither a Brownian part nor jumps".into()));
        }
        Ok(Self {
            gamma,
            sigma,
            jump_atoms,
            horizon,
        })
    }

    /// Convenience constructor from `(size, intensity)` pairs.
    pub fn with_atoms(gamma: f64, sigma: f64, atoms: &[(f64, f64)], horizon: f64) -> Result<Self> {
        Self::new(
            gamma,
            sigma,
            atoms
                .iter()
                .map(|&(size, intensity)| JumpAtom { size, intensity })
                .collect(),
            horizon,
        )
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn jump_atoms(&self) -> &[JumpAtom] {
        &self.jump_atoms
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// `Σ_j λ_j x_j`, the drift removed by compensation.
    pub fn compensator_rate(&self) -> f64 {
        self.jump_atoms.iter().map(|a| a.intensity * a.size).sum()
    }

    /// `σ² + Σ_j x_j² λ_j`, the variance of `X_1 - X_0`; equals `μ(ℝ)`.
    pub fn variance_rate(&self) -> f64 {
        self.sigma * self.sigma
            + self
                .jump_atoms
                .iter()
                .map(|a| a.size * a.size * a.intensity)
                .sum::<f64>()
    }

    pub fn mark_measure(&self) -> MarkMeasure {
        derive_mark_measure(self)
    }
}

/// Where a mark atom comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkSource {
    Brownian,
    Jump(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkAtom {
    pub mark: f64,
    pub mass: f64,
}

/// The atomic measure `μ` on marks.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkMeasure {
    atoms: Vec<MarkAtom>,
    sources: Vec<MarkSource>,
}

impl MarkMeasure {
    /// Builds a measure from explicit atoms (used by the tree skeleton, whose
    /// per-step masses differ slightly from the continuous model).
    pub fn from_atoms(atoms: Vec<MarkAtom>) -> Result<Self> {
        let mut sources = Vec::with_capacity(atoms.len());
        let mut jump = 0;
        for (i, a) in atoms.iter().enumerate() {
            if !(a.mass > 0.0 && a.mass.is_finite()) {
                return Err(Error::InvalidMark(format!("atom {i}: mass must be > 0")));
            }
            if atoms[..i].iter().any(|b| b.mark == a.mark) {
                return Err(Error::InvalidMark(format!("atom {i}: duplicate mark {}", a.mark)));
            }
            if a.mark == 0.0 {
                sources.push(MarkSource::Brownian);
            } else {
                sources.push(MarkSource::Jump(jump));
                jump += 1;
            }
        }
        Ok(Self { atoms, sources })
    }

    pub fn atoms(&self) -> &[MarkAtom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn mass(&self, index: usize) -> f64 {
        self.atoms[index].mass
    }

    pub fn mark(&self, index: usize) -> f64 {
        self.atoms[index].mark
    }

    pub fn source(&self, index: usize) -> MarkSource {
        self.sources[index]
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.mass).sum()
    }

    pub fn index_of(&self, mark: f64) -> Result<usize> {
        self.atoms
            .iter()
            .position(|a| a.mark == mark)
            .ok_or_else(|| Error::InvalidMark(format!("no atom at mark {mark}")))
    }

    /// `∫ h² dμ` for `h` given per atom.
    pub fn l2_norm_sq(&self, h: &[f64]) -> f64 {
        self.atoms.iter().zip(h).map(|(a, v)| v * v * a.mass).sum()
    }
}

/// `μ(dx) = σ²δ₀(dx) + x²ν(dx)`; the Brownian atom is omitted when `σ = 0`.
pub fn derive_mark_measure(model: &LevyModel) -> MarkMeasure {
    let mut atoms = Vec::with_capacity(model.jump_atoms.len() + 1);
    let mut sources = Vec::with_capacity(model.jump_atoms.len() + 1);
    if model.sigma > 0.0 {
        atoms.push(MarkAtom {
            mark: 0.0,
            mass: model.sigma * model.sigma,
        });
        sources.push(MarkSource::Brownian);
    }
    for (j, a) in model.jump_atoms.iter().enumerate() {
        atoms.push(MarkAtom {
            mark: a.size,
            mass: a.size * a.size * a.intensity,
        });
        sources.push(MarkSource::Jump(j));
    }
    MarkMeasure { atoms, sources }
}

/// A deterministic net `0 = t_0 < … < t_n = T` with a coarse partition
/// `0 = r_0 < … < r_m = T` drawn from its points.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeNet {
    points: Vec<f64>,
    coarse: Vec<usize>,
}

impl TimeNet {
    /// `points` and `coarse_partition` are given as times; every coarse time
    /// must coincide with a net point (to within `1e-12·T`).
    pub fn new(points: Vec<f64>, coarse_partition: &[f64]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidNet("need at least two points".into()));
        }
        if points[0] != 0.0 {
            return Err(Error::InvalidNet("first point must be 0".into()));
        }
        if points.windows(2).any(|w| !(w[1] > w[0])) || points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidNet("points must be strictly increasing".into()));
        }
        let horizon = *points.last().unwrap();
        let tol = 1e-12 * horizon;
        let mut coarse = Vec::with_capacity(coarse_partition.len());
        for &r in coarse_partition {
            let idx = points
                .iter()
                .position(|&p| (p - r).abs() <= tol)
                .ok_or_else(|| Error::InvalidNet(format!("coarse point {r} is not a net point")))?;
            coarse.push(idx);
        }
        if coarse.len() < 2 || coarse[0] != 0 || *coarse.last().unwrap() != points.len() - 1 {
            return Err(Error::InvalidNet("coarse partition must run from 0 to T".into()));
        }
        if coarse.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidNet("coarse partition must be strictly increasing".into()));
        }
        Ok(Self { points, coarse })
    }

    /// `n` equal steps on `[0, T]`, coarse partition of `m` equal intervals (`m | n`).
    pub fn equidistant(horizon: f64, n: usize, m: usize) -> Result<Self> {
        if n == 0 || m == 0 || n % m != 0 {
            return Err(Error::InvalidNet(format!("need m | n with n, m >= 1 (n={n}, m={m})")));
        }
        let points: Vec<f64> = (0..=n)
            .map(|i| if i == n { horizon } else { horizon * i as f64 / n as f64 })
            .collect();
        let coarse = (0..=m).map(|k| k * (n / m)).collect();
        Ok(Self { points, coarse })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn point(&self, i: usize) -> f64 {
        self.points[i]
    }

    pub fn horizon(&self) -> f64 {
        *self.points.last().unwrap()
    }

    pub fn n_intervals(&self) -> usize {
        self.points.len() - 1
    }

    pub fn dt(&self, i: usize) -> f64 {
        self.points[i + 1] - self.points[i]
    }

    /// Mesh size `|τ| = max_i (t_{i+1} - t_i)`.
    pub fn mesh(&self) -> f64 {
        (0..self.n_intervals()).map(|i| self.dt(i)).fold(0.0, f64::max)
    }

    /// Number of coarse intervals `m`.
    pub fn n_coarse(&self) -> usize {
        self.coarse.len() - 1
    }

    /// Net index of `r_k`.
    pub fn coarse_index(&self, k: usize) -> usize {
        self.coarse[k]
    }

    pub fn coarse_point(&self, k: usize) -> f64 {
        self.points[self.coarse[k]]
    }

    pub fn coarse_points(&self) -> Vec<f64> {
        self.coarse.iter().map(|&i| self.points[i]).collect()
    }

    /// Coarse interval `k ∈ 1..=m` with `]t_i, t_{i+1}] ⊆ Λ_k`.
    pub fn coarse_interval_of(&self, interval: usize) -> usize {
        self.coarse.iter().position(|&c| c > interval).unwrap()
    }

    /// Net index of time `t`, if `t` is a net point.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let tol = 1e-12 * self.horizon();
        let pos = self.points.partition_point(|&p| p < t - tol);
        (pos < self.points.len() && (self.points[pos] - t).abs() <= tol).then_some(pos)
    }

    /// Interval `i` with `t_i < t <= t_{i+1}`; `t` in `]0, T]`.
    pub fn interval_containing(&self, t: f64) -> usize {
        let pos = self.points.partition_point(|&p| p < t);
        pos.clamp(1, self.n_intervals()) - 1
    }

    /// True when every point of `coarse` is a point of `self`.
    pub fn refines(&self, coarse: &TimeNet) -> bool {
        (self.horizon() - coarse.horizon()).abs() <= 1e-12 * self.horizon()
            && coarse.points.iter().all(|&p| self.index_of(p).is_some())
    }
}

/// Plain JSON document holding a model and a net.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelNetDoc {
    pub gamma: f64,
    pub sigma: f64,
    pub jump_atoms: Vec<[f64; 2]>,
    pub horizon: f64,
    pub points: Vec<f64>,
    pub coarse_partition: Vec<f64>,
}

impl ModelNetDoc {
    pub fn from_parts(model: &LevyModel, net: &TimeNet) -> Self {
        Self {
            gamma: model.gamma,
            sigma: model.sigma,
            jump_atoms: model.jump_atoms.iter().map(|a| [a.size, a.intensity]).collect(),
            horizon: model.horizon,
            points: net.points.clone(),
            coarse_partition: net.coarse_points(),
        }
    }

    pub fn into_parts(self) -> Result<(LevyModel, TimeNet)> {
        let atoms: Vec<(f64, f64)> = self.jump_atoms.iter().map(|a| (a[0], a[1])).collect();
        let model = LevyModel::with_atoms(self.gamma, self.sigma, &atoms, self.horizon)?;
        let net = TimeNet::new(self.points, &self.coarse_partition)?;
        if (net.horizon() - model.horizon).abs() > 1e-12 * model.horizon {
            return Err(Error::InvalidNet("last net point must equal the horizon".into()));
        }
        Ok((model, net))
    }
}

/// A jump of atom `atom` (index into the model's jump atoms) at `time`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpEvent {
    pub time: f64,
    pub atom: u32,
    /// Net interval `i` with `t_i < time <= t_{i+1}`.
    pub interval: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowResample {
    pub t: f64,
    pub r: f64,
    pub seed: u64,
}

/// Everything needed to regenerate a bundle bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngLineage {
    pub seed: u64,
    /// Net the bundle was simulated on, when it has since been coarsened.
    pub base_points: Option<Vec<f64>>,
    pub windows: Vec<WindowResample>,
    /// Set for bundles sampled from a tree skeleton rather than the model.
    pub skeleton: bool,
}

/// Simulated paths on a net. Immutable once built.
#[derive(Debug, Clone)]
pub struct PathBundle {
    model: LevyModel,
    net: TimeNet,
    n_paths: usize,
    /// Unit Brownian increments `W_{t_{i+1}} - W_{t_i}`, path-major.
    dw: Vec<f64>,
    /// `jumps[offsets[p]..offsets[p + 1]]` are path `p`'s events, by time.
    offsets: Vec<usize>,
    jumps: Vec<JumpEvent>,
    lineage: RngLineage,
}

struct PathData {
    dw: Vec<f64>,
    jumps: Vec<JumpEvent>,
}

/// Simulates `n_paths` independent paths of `model` on `net`.
pub fn simulate(model: &LevyModel, net: &TimeNet, n_paths: usize, seed: u64) -> Result<PathBundle> {
    if n_paths == 0 {
        return Err(Error::OutOfRange("n_paths must be >= 1".into()));
    }
    if (net.horizon() - model.horizon).abs() > 1e-12 * model.horizon {
        return Err(Error::Mismatch("net horizon differs from model horizon".into()));
    }
    let factory = StreamFactory::new(seed);
    let n_int = net.n_intervals();
    let paths: Vec<PathData> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut dw = Vec::with_capacity(n_int);
            let mut jumps = Vec::new();
            for i in 0..n_int {
                let (a, b) = (net.points[i], net.points[i + 1]);
                let mut rng = factory.stream(Purpose::Brownian, p as u64, i as u64, 0);
                let z: f64 = rng.sample(StandardNormal);
                dw.push(z * (b - a).sqrt());
                for (j, atom) in model.jump_atoms.iter().enumerate() {
                    let mut rng = factory.stream(Purpose::Jump, p as u64, i as u64, j as u64);
                    draw_events(&mut rng, atom.intensity, a, b, j as u32, &mut jumps, |_| i as u32);
                }
            }
            sort_events(&mut jumps);
            PathData { dw, jumps }
        })
        .collect();
    Ok(assemble(
        model.clone(),
        net.clone(),
        paths,
        RngLineage {
            seed,
            base_points: None,
            windows: Vec::new(),
            skeleton: false,
        },
    ))
}

fn draw_events<R: Rng, F: Fn(f64) -> u32>(
    rng: &mut R,
    intensity: f64,
    a: f64,
    b: f64,
    atom: u32,
    out: &mut Vec<JumpEvent>,
    interval_of: F,
) {
    let mean = intensity * (b - a);
    if mean <= 0.0 {
        return;
    }
    let count = Poisson::new(mean).expect("positive mean").sample(rng) as usize;
    for _ in 0..count {
        let u: f64 = rng.gen();
        // u in [0,1): time in ]a, b]
        let time = (a + (1.0 - u) * (b - a)).clamp(f64::MIN_POSITIVE.max(a), b);
        let time = if time <= a { b } else { time };
        out.push(JumpEvent {
            time,
            atom,
            interval: interval_of(time),
        });
    }
}

fn sort_events(events: &mut [JumpEvent]) {
    events.sort_by(|x, y| x.time.total_cmp(&y.time).then(x.atom.cmp(&y.atom)));
}

fn assemble(model: LevyModel, net: TimeNet, paths: Vec<PathData>, lineage: RngLineage) -> PathBundle {
    let n_paths = paths.len();
    let mut dw = Vec::with_capacity(n_paths * net.n_intervals());
    let mut offsets = Vec::with_capacity(n_paths + 1);
    let mut jumps = Vec::new();
    offsets.push(0);
    for p in paths {
        dw.extend_from_slice(&p.dw);
        jumps.extend_from_slice(&p.jumps);
        offsets.push(jumps.len());
    }
    PathBundle {
        model,
        net,
        n_paths,
        dw,
        offsets,
        jumps,
        lineage,
    }
}

/// Regenerates a bundle from its lineage.
pub fn replay(model: &LevyModel, net: &TimeNet, n_paths: usize, lineage: &RngLineage) -> Result<PathBundle> {
    if lineage.skeleton {
        return Err(Error::Config("skeleton bundles are replayed through the tree model".into()));
    }
    let base_net = match &lineage.base_points {
        Some(points) => TimeNet::new(points.clone(), &[0.0, net.horizon()])?,
        None => net.clone(),
    };
    let mut bundle = simulate(model, &base_net, n_paths, lineage.seed)?;
    if lineage.base_points.is_some() {
        bundle = bundle.coarsen(net)?;
    }
    for w in &lineage.windows {
        bundle = bundle.resample_window(w.t, w.r, w.seed)?;
    }
    Ok(bundle)
}

impl PathBundle {
    /// Assembles a bundle from raw parts; `dw` is path-major with
    /// `n_paths * n_intervals` unit Brownian increments.
    pub fn from_raw(
        model: LevyModel,
        net: TimeNet,
        dw: Vec<f64>,
        events: Vec<Vec<(f64, u32)>>,
        lineage: RngLineage,
    ) -> Result<Self> {
        let n_paths = events.len();
        if dw.len() != n_paths * net.n_intervals() {
            return Err(Error::Mismatch("dw length must be n_paths * n_intervals".into()));
        }
        let paths = events
            .into_iter()
            .enumerate()
            .map(|(p, ev)| {
                let mut jumps = Vec::with_capacity(ev.len());
                for (time, atom) in ev {
                    if !(time > 0.0 && time <= net.horizon()) {
                        return Err(Error::OutOfRange(format!("jump time {time} outside ]0,T]")));
                    }
                    if atom as usize >= model.jump_atoms.len() {
                        return Err(Error::InvalidMark(format!("jump atom index {atom}")));
                    }
                    jumps.push(JumpEvent {
                        time,
                        atom,
                        interval: net.interval_containing(time) as u32,
                    });
                }
                sort_events(&mut jumps);
                let n_int = net.n_intervals();
                Ok(PathData {
                    dw: dw[p * n_int..(p + 1) * n_int].to_vec(),
                    jumps,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(assemble(model, net, paths, lineage))
    }

    pub fn model(&self) -> &LevyModel {
        &self.model
    }

    pub fn net(&self) -> &TimeNet {
        &self.net
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn lineage(&self) -> &RngLineage {
        &self.lineage
    }

    pub fn mark_measure(&self) -> MarkMeasure {
        self.model.mark_measure()
    }

    pub fn brownian_increments(&self, path: usize) -> &[f64] {
        let n = self.net.n_intervals();
        &self.dw[path * n..(path + 1) * n]
    }

    pub fn jump_events(&self, path: usize) -> &[JumpEvent] {
        &self.jumps[self.offsets[path]..self.offsets[path + 1]]
    }

    /// `X` at every net point of one path.
    pub fn x_path(&self, path: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.net.points.len()];
        self.fill_x_path(path, &mut out);
        out
    }

    fn fill_x_path(&self, path: usize, out: &mut [f64]) {
        let comp = self.model.compensator_rate();
        let dw = self.brownian_increments(path);
        let events = self.jump_events(path);
        let mut w = 0.0;
        let mut jump_sum = 0.0;
        let mut e = 0;
        out[0] = 0.0;
        for i in 0..dw.len() {
            w += dw[i];
            while e < events.len() && events[e].interval as usize <= i {
                jump_sum += self.model.jump_atoms[events[e].atom as usize].size;
                e += 1;
            }
            let t = self.net.points[i + 1];
            out[i + 1] = self.model.gamma * t + self.model.sigma * w + jump_sum - t * comp;
        }
    }

    /// `X` on the whole net, path-major (`n_paths × (n + 1)`).
    pub fn x_matrix(&self) -> Vec<f64> {
        let width = self.net.points.len();
        let mut out = vec![0.0; self.n_paths * width];
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(p, row)| self.fill_x_path(p, row));
        out
    }

    /// `M(]s,t] × {atom})` on one path, `atom` indexing the mark measure.
    ///
    /// The Brownian atom needs `s` and `t` on the net; jump atoms accept any
    /// `0 <= s <= t <= T`.
    pub fn m_increment(&self, path: usize, s: f64, t: f64, atom: usize) -> Result<f64> {
        let horizon = self.net.horizon();
        if !(0.0 <= s && s <= t && t <= horizon) {
            return Err(Error::InvalidInterval {
                s,
                t,
                reason: "need 0 <= s <= t <= T".into(),
            });
        }
        let marks = self.mark_measure();
        if atom >= marks.len() {
            return Err(Error::InvalidMark(format!("atom index {atom} not in the mark measure")));
        }
        if s == t {
            return Ok(0.0);
        }
        match marks.source(atom) {
            MarkSource::Brownian => {
                let (i, j) = match (self.net.index_of(s), self.net.index_of(t)) {
                    (Some(i), Some(j)) => (i, j),
                    _ => {
                        return Err(Error::InvalidInterval {
                            s,
                            t,
                            reason: "Brownian increments are resolved on net points only".into(),
                        })
                    }
                };
                let dw: f64 = self.brownian_increments(path)[i..j].iter().sum();
                Ok(self.model.sigma * dw)
            }
            MarkSource::Jump(j) => {
                let a = self.model.jump_atoms[j];
                let count = self
                    .jump_events(path)
                    .iter()
                    .filter(|e| e.atom as usize == j && e.time > s && e.time <= t)
                    .count();
                Ok(a.size * (count as f64 - a.intensity * (t - s)))
            }
        }
    }

    /// `M(]t_i, t_{i+1}] × {atom})` for every path and mark atom of net interval
    /// `i`, path-major (`n_paths × n_atoms`).
    pub fn interval_noise(&self, i: usize) -> Vec<f64> {
        let marks = self.mark_measure();
        let n_atoms = marks.len();
        let dt = self.net.dt(i);
        let mut out = vec![0.0; self.n_paths * n_atoms];
        out.par_chunks_mut(n_atoms).enumerate().for_each(|(p, row)| {
            let events = self.jump_events(p);
            let lo = events.partition_point(|e| (e.interval as usize) < i);
            for (a, slot) in row.iter_mut().enumerate() {
                *slot = match marks.source(a) {
                    MarkSource::Brownian => self.model.sigma * self.brownian_increments(p)[i],
                    MarkSource::Jump(j) => {
                        let atom = self.model.jump_atoms[j];
                        let count = events[lo..]
                            .iter()
                            .take_while(|e| e.interval as usize == i)
                            .filter(|e| e.atom as usize == j)
                            .count();
                        atom.size * (count as f64 - atom.intensity * dt)
                    }
                };
            }
        });
        out
    }

    /// `M(]t_i, t_{i+1}] × {atom})` for all intervals and atoms of one path,
    /// interval-major (`n_intervals × n_atoms`).
    pub fn path_noise(&self, path: usize) -> Vec<f64> {
        let marks = self.mark_measure();
        let n_atoms = marks.len();
        let n_int = self.net.n_intervals();
        let dw = self.brownian_increments(path);
        let mut out = vec![0.0; n_int * n_atoms];
        for a in 0..n_atoms {
            match marks.source(a) {
                MarkSource::Brownian => {
                    for i in 0..n_int {
                        out[i * n_atoms + a] = self.model.sigma * dw[i];
                    }
                }
                MarkSource::Jump(j) => {
                    let atom = self.model.jump_atoms[j];
                    for i in 0..n_int {
                        out[i * n_atoms + a] = -atom.size * atom.intensity * self.net.dt(i);
                    }
                    for e in self.jump_events(path).iter().filter(|e| e.atom as usize == j) {
                        out[e.interval as usize * n_atoms + a] += atom.size;
                    }
                }
            }
        }
        out
    }

    /// Replaces the driving noise on `]t, r]` by an independent copy drawn
    /// from `seed2`, keeping everything outside the window.
    ///
    /// A net interval that straddles `t` or `r` is split with a Brownian
    /// bridge keyed by the original lineage, so the kept part is a function
    /// of the original randomness only.
    pub fn resample_window(&self, t: f64, r: f64, seed2: u64) -> Result<PathBundle> {
        let horizon = self.net.horizon();
        if !(0.0 <= t && t < r && r <= horizon) {
            return Err(Error::InvalidInterval {
                s: t,
                t: r,
                reason: "window needs 0 <= t < r <= T".into(),
            });
        }
        let bridge = StreamFactory::new(self.lineage.seed ^ (self.lineage.windows.len() as u64).rotate_left(32));
        let fresh = StreamFactory::new(seed2);
        let net = &self.net;
        let n_int = net.n_intervals();
        let split_key = t.to_bits().rotate_left(17) ^ r.to_bits();
        let paths: Vec<PathData> = (0..self.n_paths)
            .into_par_iter()
            .map(|p| {
                let old = self.brownian_increments(p);
                let mut dw = Vec::with_capacity(n_int);
                for i in 0..n_int {
                    let (a, b) = (net.points[i], net.points[i + 1]);
                    if b <= t || a >= r {
                        dw.push(old[i]);
                    } else if t <= a && b <= r {
                        let mut rng = fresh.stream(Purpose::WindowBrownian, p as u64, i as u64, 0);
                        let z: f64 = rng.sample(StandardNormal);
                        dw.push(z * (b - a).sqrt());
                    } else {
                        let s1 = a.max(t);
                        let s2 = b.min(r);
                        let mut rng = bridge.stream(Purpose::Bridge, p as u64, i as u64, split_key);
                        let total = old[i];
                        let first = bridge_step(&mut rng, total, a, s1, b);
                        let rest = total - first;
                        let middle = bridge_step(&mut rng, rest, s1, s2, b);
                        let last = rest - middle;
                        let mut frng = fresh.stream(Purpose::WindowBrownian, p as u64, i as u64, 0);
                        let z: f64 = frng.sample(StandardNormal);
                        dw.push(first + z * (s2 - s1).sqrt() + last);
                    }
                }
                let mut jumps: Vec<JumpEvent> = self
                    .jump_events(p)
                    .iter()
                    .copied()
                    .filter(|e| e.time <= t || e.time > r)
                    .collect();
                for (j, atom) in self.model.jump_atoms.iter().enumerate() {
                    let mut rng = fresh.stream(Purpose::WindowJump, p as u64, 0, j as u64);
                    draw_events(&mut rng, atom.intensity, t, r, j as u32, &mut jumps, |time| {
                        net.interval_containing(time) as u32
                    });
                }
                sort_events(&mut jumps);
                PathData { dw, jumps }
            })
            .collect();
        let mut lineage = self.lineage.clone();
        lineage.windows.push(WindowResample { t, r, seed: seed2 });
        Ok(assemble(self.model.clone(), self.net.clone(), paths, lineage))
    }

    /// The same paths seen on a coarser net whose points are net points.
    pub fn coarsen(&self, coarse: &TimeNet) -> Result<PathBundle> {
        if !self.net.refines(coarse) {
            return Err(Error::Mismatch("coarse net is not nested in the bundle's net".into()));
        }
        let idx: Vec<usize> = coarse.points.iter().map(|&p| self.net.index_of(p).unwrap()).collect();
        let paths: Vec<PathData> = (0..self.n_paths)
            .into_par_iter()
            .map(|p| {
                let old = self.brownian_increments(p);
                let dw = idx.windows(2).map(|w| old[w[0]..w[1]].iter().sum()).collect();
                let jumps = self
                    .jump_events(p)
                    .iter()
                    .map(|e| JumpEvent {
                        interval: coarse.interval_containing(e.time) as u32,
                        ..*e
                    })
                    .collect();
                PathData { dw, jumps }
            })
            .collect();
        let mut lineage = self.lineage.clone();
        if lineage.base_points.is_none() {
            lineage.base_points = Some(self.net.points.clone());
        }
        Ok(assemble(self.model.clone(), coarse.clone(), paths, lineage))
    }

    /// The first `n` paths.
    pub fn head(&self, n: usize) -> PathBundle {
        let n = n.min(self.n_paths);
        let n_int = self.net.n_intervals();
        PathBundle {
            model: self.model.clone(),
            net: self.net.clone(),
            n_paths: n,
            dw: self.dw[..n * n_int].to_vec(),
            offsets: self.offsets[..=n].to_vec(),
            jumps: self.jumps[..self.offsets[n]].to_vec(),
            lineage: self.lineage.clone(),
        }
    }

    /// Columnar audit export: `path,interval_index,dW,jump_list`, where
    /// `jump_list` is `time:atom` pairs separated by `;`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "path,interval_index,dW,jump_list")?;
        for p in 0..self.n_paths {
            let events = self.jump_events(p);
            for (i, dw) in self.brownian_increments(p).iter().enumerate() {
                let list: Vec<String> = events
                    .iter()
                    .filter(|e| e.interval as usize == i)
                    .map(|e| format!("{:e}:{}", e.time, e.atom))
                    .collect();
                writeln!(out, "{p},{i},{dw:e},{}", list.join(";"))?;
            }
        }
        Ok(())
    }
}

/// Samples `W_s - W_a` given `W_b - W_a = total` for `a <= s <= b`.
fn bridge_step<R: Rng>(rng: &mut R, total: f64, a: f64, s: f64, b: f64) -> f64 {
    if s <= a {
        return 0.0;
    }
    if s >= b {
        return total;
    }
    let mean = total * (s - a) / (b - a);
    let var = (s - a) * (b - s) / (b - a);
    let z: f64 = rng.sample(StandardNormal);
    mean + z * var.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> LevyModel {
        LevyModel::with_atoms(0.0, 1.0, &[(1.0, 2.0)], 1.0).unwrap()
    }

    #[test]
    fn mark_measure_examples() {
        let mu = derive_mark_measure(&toy());
        assert_eq!(mu.atoms(), &[MarkAtom { mark: 0.0, mass: 1.0 }, MarkAtom { mark: 1.0, mass: 2.0 }]);
        assert_eq!(mu.total_mass(), 3.0);

        let m2 = LevyModel::with_atoms(5.0, 0.0, &[(-2.0, 0.5)], 1.0).unwrap();
        let mu2 = derive_mark_measure(&m2);
        assert_eq!(mu2.atoms(), &[MarkAtom { mark: -2.0, mass: 2.0 }]);
        assert_eq!(mu2.total_mass(), 2.0);

        let m3 = LevyModel::with_atoms(0.0, 1.0, &[], 1.0).unwrap();
        let mu3 = derive_mark_measure(&m3);
        assert_eq!(mu3.atoms(), &[MarkAtom { mark: 0.0, mass: 1.0 }]);
        assert_eq!(mu3.total_mass(), 1.0);
    }

    #[test]
    fn model_validation() {
        assert!(LevyModel::with_atoms(0.0, -1.0, &[], 1.0).is_err());
        assert!(LevyModel::with_atoms(0.0, 1.0, &[(0.0, 1.0)], 1.0).is_err());
        assert!(LevyModel::with_atoms(0.0, 1.0, &[(1.0, 0.0)], 1.0).is_err());
        assert!(LevyModel::with_atoms(0.0, 1.0, &[(1.0, 1.0), (1.0, 2.0)], 1.0).is_err());
        assert!(LevyModel::with_atoms(0.0, 1.0, &[], 0.0).is_err());
    }

    #[test]
    fn net_validation_and_lookup() {
        let net = TimeNet::equidistant(1.0, 8, 2).unwrap();
        assert_eq!(net.coarse_index(1), 4);
        assert_eq!(net.coarse_interval_of(0), 1);
        assert_eq!(net.coarse_interval_of(3), 1);
        assert_eq!(net.coarse_interval_of(4), 2);
        assert_eq!(net.index_of(0.375), Some(3));
        assert_eq!(net.index_of(0.3), None);
        assert_eq!(net.interval_containing(0.375), 2);
        assert_eq!(net.interval_containing(0.376), 3);
        assert!(TimeNet::new(vec![0.0, 0.5, 0.4, 1.0], &[0.0, 1.0]).is_err());
        assert!(TimeNet::new(vec![0.0, 0.5, 1.0], &[0.0, 0.3, 1.0]).is_err());
        assert!(TimeNet::equidistant(1.0, 8, 3).is_err());
    }

    #[test]
    fn json_round_trip() {
        let net = TimeNet::new(vec![0.0, 0.25, 0.5, 1.0], &[0.0, 0.5, 1.0]).unwrap();
        let doc = ModelNetDoc::from_parts(&toy(), &net);
        let text = serde_json::to_string(&doc).unwrap();
        assert!(text.contains("\"jump_atoms\":[[1.0,2.0]]"));
        let (m, n) = serde_json::from_str::<ModelNetDoc>(&text).unwrap().into_parts().unwrap();
        assert_eq!(m, toy());
        assert_eq!(n, net);
    }

    #[test]
    fn empty_interval_increment_is_zero() {
        let net = TimeNet::equidistant(1.0, 4, 1).unwrap();
        let b = simulate(&toy(), &net, 3, 1).unwrap();
        for atom in 0..2 {
            assert_eq!(b.m_increment(0, 0.5, 0.5, atom).unwrap(), 0.0);
        }
        assert!(matches!(b.m_increment(0, 0.0, 0.5, 5), Err(Error::InvalidMark(_))));
        assert!(b.m_increment(0, 0.1, 0.5, 0).is_err());
        assert!(b.m_increment(0, 0.1, 0.5, 1).is_ok());
    }

    #[test]
    fn interval_noise_matches_m_increment() {
        let net = TimeNet::equidistant(1.0, 5, 1).unwrap();
        let b = simulate(&toy(), &net, 50, 9).unwrap();
        for i in 0..5 {
            let noise = b.interval_noise(i);
            for p in 0..50 {
                let row = b.path_noise(p);
                for a in 0..2 {
                    assert!((row[i * 2 + a] - noise[p * 2 + a]).abs() < 1e-12);
                    let direct = b.m_increment(p, net.point(i), net.point(i + 1), a).unwrap();
                    assert!((noise[p * 2 + a] - direct).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn x_path_decomposes_into_m_increments() {
        let model = LevyModel::with_atoms(0.3, 0.7, &[(1.0, 2.0), (-0.5, 1.0)], 2.0).unwrap();
        let net = TimeNet::equidistant(2.0, 6, 2).unwrap();
        let b = simulate(&model, &net, 20, 3).unwrap();
        for p in 0..20 {
            let x = b.x_path(p);
            for i in 0..=6 {
                let t = net.point(i);
                let m: f64 = (0..3).map(|a| b.m_increment(p, 0.0, t, a).unwrap()).sum();
                assert!((x[i] - (0.3 * t + m)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resample_rejects_bad_window() {
        let net = TimeNet::equidistant(1.0, 4, 1).unwrap();
        let b = simulate(&toy(), &net, 3, 1).unwrap();
        assert!(b.resample_window(0.5, 0.5, 2).is_err());
        assert!(b.resample_window(0.6, 0.5, 2).is_err());
    }

    #[test]
    fn coupling_outside_window_is_exact() {
        let net = TimeNet::equidistant(1.0, 10, 1).unwrap();
        let b = simulate(&toy(), &net, 200, 4).unwrap();
        let c = b.resample_window(0.33, 0.71, 99).unwrap();
        for p in 0..200 {
            let (x, y) = (b.x_path(p), c.x_path(p));
            for i in 0..=3 {
                assert_eq!(x[i], y[i]);
            }
            // increments after the window agree as well
            assert_eq!(b.brownian_increments(p)[8], c.brownian_increments(p)[8]);
            let late_b: Vec<_> = b.jump_events(p).iter().filter(|e| e.time > 0.71).collect();
            let late_c: Vec<_> = c.jump_events(p).iter().filter(|e| e.time > 0.71).collect();
            assert_eq!(late_b, late_c);
        }
    }

    #[test]
    fn coarsen_preserves_x_at_common_points() {
        let net = TimeNet::equidistant(1.0, 8, 2).unwrap();
        let coarse = TimeNet::equidistant(1.0, 4, 2).unwrap();
        let b = simulate(&toy(), &net, 30, 5).unwrap();
        let c = b.coarsen(&coarse).unwrap();
        for p in 0..30 {
            let (x, y) = (b.x_path(p), c.x_path(p));
            for i in 0..=4 {
                assert!((x[2 * i] - y[i]).abs() < 1e-12);
            }
        }
        assert!(b.coarsen(&TimeNet::equidistant(1.0, 3, 1).unwrap()).is_err());
    }

    #[test]
    fn replay_is_bit_exact() {
        let net = TimeNet::equidistant(1.0, 8, 2).unwrap();
        let coarse = TimeNet::equidistant(1.0, 4, 2).unwrap();
        let b = simulate(&toy(), &net, 40, 11)
            .unwrap()
            .coarsen(&coarse)
            .unwrap()
            .resample_window(0.2, 0.6, 5)
            .unwrap();
        let again = replay(&toy(), &coarse, 40, b.lineage()).unwrap();
        assert_eq!(b.dw, again.dw);
        assert_eq!(b.jumps, again.jumps);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let net = TimeNet::equidistant(1.0, 2, 1).unwrap();
        let b = simulate(&toy(), &net, 2, 1).unwrap();
        let mut buf = Vec::new();
        b.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "path,interval_index,dW,jump_list");
        assert_eq!(text.lines().count(), 5);
    }
}
