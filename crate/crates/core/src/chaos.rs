//! Exact chaos algebra for terminal conditions in the cuboid class.
//!
//! A kernel set stores symmetric kernels `f_n = Σ_α g_n^α 1_{Λ_α}` whose
//! mark dependence is atomic. Each stored entry is a canonical (sorted)
//! multiset of cells `(α_i, j_i)` with `α_i ∈ 1..=m` the coarse interval and
//! `j_i` the mark-atom index; the coefficient is the common value of the
//! symmetric kernel on every arrangement of the multiset. All `L₂` integrals
//! reduce to finite sums over entries.
//!
//! For one entry with coefficient `c`, multiplicities `q_g` of equal cells and
//! interval counts `γ_l`, the contribution to `n!‖f_n‖²` restricted to
//! `]0,t]ⁿ` is `n!·c²·(n!/Π q_g!)·Π mass(j_i)·Π_l a_l(t)^{γ_l}` with
//! `a_l(t) = |Λ_l ∩ ]0,t]|`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::levy::{MarkAtom, MarkMeasure, PathBundle, TimeNet};
use crate::quad;

/// A cell `(α, j)`: coarse interval (1-based) and mark-atom index.
pub type Cell = (u16, u16);

pub const DEFAULT_TRUNCATION: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct ChaosKernelSet {
    partition: Vec<f64>,
    atoms: Vec<MarkAtom>,
    levels: BTreeMap<usize, BTreeMap<Vec<Cell>, f64>>,
    truncation: usize,
}

/// Precomputed pieces of one entry.
struct Term {
    n: usize,
    /// `n!·c²·arrangements·Π mass`
    weight: f64,
    gamma: Vec<u32>,
}

pub(crate) fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// Number of distinct orderings of a sorted multiset.
pub(crate) fn arrangements(cells: &[Cell]) -> f64 {
    let mut out = factorial(cells.len());
    let mut run = 1;
    for w in cells.windows(2) {
        if w[0] == w[1] {
            run += 1;
            out /= run as f64;
        } else {
            run = 1;
        }
    }
    out
}

/// `Π hi_l^{γ_l} − Π lo_l^{γ_l}` for `hi = lo + d ≥ lo ≥ 0`, without cancellation.
fn prod_diff(gamma: &[u32], hi: &[f64], lo: &[f64], d: &[f64]) -> f64 {
    let mut total = 0.0;
    for l in 0..gamma.len() {
        let g = gamma[l] as i32;
        if g == 0 || d[l] == 0.0 {
            continue;
        }
        let mut diff = 0.0;
        for i in 0..g {
            diff += hi[l].powi(i) * lo[l].powi(g - 1 - i);
        }
        diff *= d[l];
        let mut rest = 1.0;
        for (l2, &g2) in gamma.iter().enumerate() {
            if l2 < l {
                rest *= lo[l2].powi(g2 as i32);
            } else if l2 > l {
                rest *= hi[l2].powi(g2 as i32);
            }
        }
        total += diff * rest;
    }
    total
}

fn prod_pow(gamma: &[u32], x: &[f64]) -> f64 {
    gamma.iter().zip(x).map(|(&g, &v)| v.powi(g as i32)).product()
}

/// Elementary symmetric polynomial `e_q(x)`.
pub(crate) fn elementary_symmetric(x: &[f64], q: usize) -> f64 {
    let mut e = vec![0.0; q + 1];
    e[0] = 1.0;
    for &v in x {
        for k in (1..=q).rev() {
            e[k] += e[k - 1] * v;
        }
    }
    e[q]
}

/// Outcome of the `D₁,₂` membership check at truncation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct D12Report {
    /// `(n+1)!‖f_n‖²` per level.
    pub level_terms: Vec<f64>,
    pub top_ratio: f64,
}

/// Pathwise values of `ξ` with the diagonal bias of the off-diagonal evaluation.
#[derive(Debug, Clone)]
pub struct PathEvaluation {
    pub values: Vec<f64>,
    /// Second moment of the evaluated variable (the norm with diagonal cells removed).
    pub kept_norm_sq: f64,
    /// Fraction of `‖ξ − 𝔼ξ‖²` lost to dropped diagonal cells.
    pub dropped_fraction: f64,
}

/// Both sides of the two-sided bound relating resampling quotients and `‖𝒟ξ‖²`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResamplingBounds {
    /// Per interval: grid supremum of `‖ξ−ξ^{t,r_k}‖²/(r_k−t)` after refinement.
    pub grid_sup: Vec<f64>,
    /// Per interval: the limit of the quotient as `t ↑ r_k`.
    pub limit: Vec<f64>,
    pub dsmooth_norm_sq: f64,
    /// `2R‖𝒟ξ‖²` with `R = max_k 1/(r_k − r_{k−1})`.
    pub upper: f64,
    /// `(T/2)·sup_k sup_t` quotient.
    pub lower_scale: f64,
    pub refinements: usize,
}

impl ResamplingBounds {
    pub fn holds(&self) -> bool {
        let sup = self.grid_sup.iter().cloned().fold(0.0, f64::max);
        let tol = 1e-12 * (1.0 + self.upper.abs());
        sup <= self.upper + tol && self.dsmooth_norm_sq <= self.lower_scale + tol
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryDoc {
    alpha: Vec<u16>,
    marks: Vec<u16>,
    coef: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LevelDoc {
    n: usize,
    entries: Vec<EntryDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct KernelDoc {
    partition: Vec<f64>,
    atoms: Vec<MarkAtom>,
    levels: Vec<LevelDoc>,
    #[serde(default)]
    truncation: Option<usize>,
}

impl ChaosKernelSet {
    pub fn new(partition: Vec<f64>, atoms: Vec<MarkAtom>) -> Result<Self> {
        if partition.len() < 2 || partition[0] != 0.0 {
            return Err(Error::InvalidKernel("partition must start at 0 and have an interval".into()));
        }
        if partition.windows(2).any(|w| !(w[1] > w[0])) || partition.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidKernel("partition must be strictly increasing".into()));
        }
        if partition.len() - 1 > u16::MAX as usize || atoms.len() > u16::MAX as usize {
            return Err(Error::InvalidKernel("too many intervals or atoms".into()));
        }
        MarkMeasure::from_atoms(atoms.clone())?;
        Ok(Self {
            partition,
            atoms,
            levels: BTreeMap::new(),
            truncation: DEFAULT_TRUNCATION,
        })
    }

    pub fn for_net(net: &TimeNet, marks: &MarkMeasure) -> Self {
        Self::new(net.coarse_points(), marks.atoms().to_vec()).expect("net partitions are valid")
    }

    /// Sets the chaos truncation level `N_max`.
    pub fn with_truncation(mut self, n_max: usize) -> Result<Self> {
        if self.max_level() > n_max {
            return Err(Error::InvalidKernel(format!(
                "kernel set has level {} above truncation {n_max}",
                self.max_level()
            )));
        }
        self.truncation = n_max;
        Ok(self)
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    pub fn partition(&self) -> &[f64] {
        &self.partition
    }

    pub fn atoms(&self) -> &[MarkAtom] {
        &self.atoms
    }

    /// Number of coarse intervals `m`.
    pub fn m(&self) -> usize {
        self.partition.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.partition.last().unwrap()
    }

    fn len(&self, l: usize) -> f64 {
        self.partition[l] - self.partition[l - 1]
    }

    fn lens(&self) -> Vec<f64> {
        (1..=self.m()).map(|l| self.len(l)).collect()
    }

    /// `|Λ_l ∩ ]0,t]|` for every `l`.
    fn filled(&self, t: f64) -> Vec<f64> {
        (1..=self.m())
            .map(|l| (t - self.partition[l - 1]).clamp(0.0, self.len(l)))
            .collect()
    }

    /// `|Λ_l ∩ ]s,t]|` for every `l`.
    fn overlap(&self, s: f64, t: f64) -> Vec<f64> {
        (1..=self.m())
            .map(|l| (t.min(self.partition[l]) - s.max(self.partition[l - 1])).max(0.0))
            .collect()
    }

    pub fn max_level(&self) -> usize {
        self.levels
            .iter()
            .rev()
            .find(|(_, e)| !e.is_empty())
            .map(|(&n, _)| n)
            .unwrap_or(0)
    }

    /// The level-0 scalar `𝔼ξ`.
    pub fn constant_term(&self) -> f64 {
        self.levels
            .get(&0)
            .and_then(|e| e.get(&Vec::new()))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn set_constant(&mut self, c: f64) {
        let level = self.levels.entry(0).or_default();
        if c == 0.0 {
            level.remove(&Vec::new());
        } else {
            level.insert(Vec::new(), c);
        }
    }

    /// Entries of level `n` as `(cells, coefficient)`.
    pub fn entries(&self, n: usize) -> impl Iterator<Item = (&[Cell], f64)> {
        self.levels
            .get(&n)
            .into_iter()
            .flat_map(|e| e.iter().map(|(k, &c)| (k.as_slice(), c)))
    }

    pub fn n_entries(&self) -> usize {
        self.levels.values().map(|e| e.len()).sum()
    }

    /// Coefficient of the symmetric kernel at any arrangement of `alpha`/`marks`.
    pub fn coefficient(&self, alpha: &[u16], marks: &[u16]) -> f64 {
        let mut key: Vec<Cell> = alpha.iter().copied().zip(marks.iter().copied()).collect();
        key.sort_unstable();
        self.levels
            .get(&key.len())
            .and_then(|e| e.get(&key))
            .copied()
            .unwrap_or(0.0)
    }

    fn check_cells(&self, alpha: &[u16], marks: &[u16]) -> Result<()> {
        if alpha.len() != marks.len() {
            return Err(Error::InvalidKernel("alpha and marks differ in length".into()));
        }
        if alpha.len() > self.truncation {
            return Err(Error::InvalidKernel(format!(
                "level {} above truncation {}",
                alpha.len(),
                self.truncation
            )));
        }
        if let Some(a) = alpha.iter().find(|&&a| a == 0 || a as usize > self.m()) {
            return Err(Error::InvalidKernel(format!("interval index {a} outside 1..={}", self.m())));
        }
        if let Some(j) = marks.iter().find(|&&j| j as usize >= self.atoms.len()) {
            return Err(Error::InvalidMark(format!("mark index {j} outside the atom list")));
        }
        Ok(())
    }

    /// Adds `coef` to the symmetric kernel on the multiset given by any
    /// arrangement of `(alpha, marks)`.
    pub fn add(&mut self, alpha: &[u16], marks: &[u16], coef: f64) -> Result<()> {
        self.check_cells(alpha, marks)?;
        if !coef.is_finite() {
            return Err(Error::InvalidKernel("coefficient must be finite".into()));
        }
        let mut key: Vec<Cell> = alpha.iter().copied().zip(marks.iter().copied()).collect();
        key.sort_unstable();
        let level = self.levels.entry(key.len()).or_default();
        let slot = level.entry(key).or_insert(0.0);
        *slot += coef;
        Ok(())
    }

    /// Inserts a canonical entry; non-canonical or repeated entries are rejected.
    pub fn insert_canonical(&mut self, alpha: &[u16], marks: &[u16], coef: f64) -> Result<()> {
        self.check_cells(alpha, marks)?;
        if !coef.is_finite() {
            return Err(Error::InvalidKernel("coefficient must be finite".into()));
        }
        let key: Vec<Cell> = alpha.iter().copied().zip(marks.iter().copied()).collect();
        if key.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidKernel(format!("entry {key:?} is not in canonical (sorted) order")));
        }
        let level = self.levels.entry(key.len()).or_default();
        if level.contains_key(&key) {
            return Err(Error::InvalidKernel(format!("duplicate entry {key:?}")));
        }
        level.insert(key, coef);
        Ok(())
    }

    /// Symmetrizes a kernel given on ordered tuples: the stored coefficient of
    /// a multiset is the average of the raw values over its distinct
    /// arrangements (absent tuples count as zero).
    pub fn add_symmetrized(&mut self, n: usize, raw: &[(Vec<u16>, Vec<u16>, f64)]) -> Result<()> {
        let mut sums: BTreeMap<Vec<Cell>, f64> = BTreeMap::new();
        for (alpha, marks, coef) in raw {
            if alpha.len() != n {
                return Err(Error::InvalidKernel(format!("raw entry has length {} != {n}", alpha.len())));
            }
            self.check_cells(alpha, marks)?;
            let mut key: Vec<Cell> = alpha.iter().copied().zip(marks.iter().copied()).collect();
            key.sort_unstable();
            *sums.entry(key).or_insert(0.0) += coef;
        }
        for (key, sum) in sums {
            let coef = sum / arrangements(&key);
            let (a, j): (Vec<u16>, Vec<u16>) = key.into_iter().unzip();
            self.add(&a, &j, coef)?;
        }
        Ok(())
    }

    /// `X_{r_k} − γ r_k = I₁(1_{]0,r_k]×ℝ})`: level-1 kernel equal to one on the
    /// first `k` intervals and every atom.
    pub fn x_at(net_partition: Vec<f64>, atoms: Vec<MarkAtom>, k: usize, gamma: f64) -> Result<Self> {
        let mut set = Self::new(net_partition, atoms)?;
        if k > set.m() {
            return Err(Error::OutOfRange(format!("interval index {k} > m")));
        }
        set.set_constant(gamma * set.partition[k]);
        for l in 1..=k {
            for j in 0..set.atoms.len() {
                set.add(&[l as u16], &[j as u16], 1.0)?;
            }
        }
        Ok(set)
    }

    fn terms(&self) -> Vec<Term> {
        let m = self.m();
        let mut out = Vec::with_capacity(self.n_entries());
        for (&n, entries) in &self.levels {
            let nf = factorial(n);
            for (key, &c) in entries {
                let mass: f64 = key.iter().map(|&(_, j)| self.atoms[j as usize].mass).product();
                let mut gamma = vec![0u32; m];
                for &(a, _) in key {
                    gamma[a as usize - 1] += 1;
                }
                out.push(Term {
                    n,
                    weight: nf * c * c * arrangements(key) * mass,
                    gamma,
                });
            }
        }
        out
    }

    /// `n!‖f_n‖²` for `n = 0..=max_level`.
    pub fn level_norms_sq(&self) -> Vec<f64> {
        let lens = self.lens();
        let mut out = vec![0.0; self.max_level() + 1];
        for t in self.terms() {
            if t.n < out.len() {
                out[t.n] += t.weight * prod_pow(&t.gamma, &lens);
            }
        }
        out
    }

    /// `‖ξ‖² = Σ_n n!‖f_n‖²`.
    pub fn norm_sq(&self) -> f64 {
        self.level_norms_sq().iter().sum()
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let tol = 1e-12 * self.horizon();
        if !(t >= -tol && t <= self.horizon() + tol) {
            return Err(Error::InvalidInterval {
                s: t,
                t,
                reason: format!("time outside [0, {}]", self.horizon()),
            });
        }
        Ok(())
    }

    /// `T_ξ(t) = ‖𝔼_t ξ‖²`.
    pub fn projection_norm_sq(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        let a = self.filled(t);
        Ok(self.terms().iter().map(|x| x.weight * prod_pow(&x.gamma, &a)).sum())
    }

    /// `‖𝔼_t ξ − 𝔼_s ξ‖²`, summed directly over the cuboid-volume differences.
    pub fn projection_distance_sq(&self, s: f64, t: f64) -> Result<f64> {
        self.check_time(s)?;
        self.check_time(t)?;
        if s > t {
            return Err(Error::InvalidInterval {
                s,
                t,
                reason: "need s <= t".into(),
            });
        }
        let (hi, lo, d) = (self.filled(t), self.filled(s), self.overlap(s, t));
        Ok(self
            .terms()
            .iter()
            .map(|x| x.weight * prod_diff(&x.gamma, &hi, &lo, &d))
            .sum())
    }

    /// `‖ξ − ξ^{t,r}‖² = Σ_n 2n!‖f_n(1 − 1_{off-window}^{⊗n})‖²`.
    pub fn resampling_distance_sq(&self, t: f64, r: f64) -> Result<f64> {
        self.check_time(t)?;
        self.check_time(r)?;
        if t >= r {
            return Err(Error::InvalidInterval {
                s: t,
                t: r,
                reason: "window needs t < r".into(),
            });
        }
        let lens = self.lens();
        let w = self.overlap(t, r);
        let off: Vec<f64> = lens.iter().zip(&w).map(|(l, w)| (l - w).max(0.0)).collect();
        Ok(2.0
            * self
                .terms()
                .iter()
                .map(|x| x.weight * prod_diff(&x.gamma, &lens, &off, &w))
                .sum::<f64>())
    }

    /// Checks `Σ (n+1)!‖f_n‖² < ∞` at truncation. Fails when a level norm is
    /// not finite, or when the set reaches the truncation level with level
    /// terms that have stopped decaying.
    pub fn check_d12(&self) -> Result<D12Report> {
        let norms = self.level_norms_sq();
        let level_terms: Vec<f64> = norms.iter().enumerate().map(|(n, v)| (n + 1) as f64 * v).collect();
        let top = level_terms.len() - 1;
        let top_ratio = if top >= 1 && level_terms[top - 1] > 0.0 {
            level_terms[top] / level_terms[top - 1]
        } else {
            0.0
        };
        if level_terms.iter().any(|v| !v.is_finite())
            || (top >= 2 && top == self.truncation && top_ratio >= 1.0)
        {
            return Err(Error::NotInD12 {
                level_terms,
                ratio: top_ratio,
            });
        }
        Ok(D12Report { level_terms, top_ratio })
    }

    /// `n·f_n((t,x_j),·)` for `t ∈ Λ_k`: the order-`(n−1)` kernel of
    /// `𝒟_{t,x_j} ξ`, constant in `t` on `Λ_k`.
    pub fn malliavin_kernel(&self, k: usize, j: usize) -> Result<ChaosKernelSet> {
        if k == 0 || k > self.m() {
            return Err(Error::OutOfRange(format!("interval index {k} outside 1..={}", self.m())));
        }
        if j >= self.atoms.len() {
            return Err(Error::InvalidMark(format!("mark index {j} outside the atom list")));
        }
        self.check_d12()?;
        let cell = (k as u16, j as u16);
        let mut out = Self {
            partition: self.partition.clone(),
            atoms: self.atoms.clone(),
            levels: BTreeMap::new(),
            truncation: self.truncation,
        };
        for (&n, entries) in &self.levels {
            for (key, &c) in entries {
                if let Some(pos) = key.iter().position(|&x| x == cell) {
                    let mut rest = key.clone();
                    rest.remove(pos);
                    out.levels.entry(n - 1).or_default().insert(rest, n as f64 * c);
                }
            }
        }
        Ok(out)
    }

    /// The kernel of `𝒟_{t,x_j} ξ` at an arbitrary time `t ∈ ]0,T]`.
    pub fn malliavin_kernel_at(&self, t: f64, j: usize) -> Result<ChaosKernelSet> {
        if !(t > 0.0 && t <= self.horizon()) {
            return Err(Error::OutOfRange(format!("t = {t} outside ]0,T]")));
        }
        let k = self.partition.partition_point(|&r| r < t).max(1);
        self.malliavin_kernel(k, j)
    }

    /// `‖𝒟ξ‖²_{L₂(ℙ⊗𝕞)} = Σ_k Σ_n n! Σ_α ‖g_n^α‖² λⁿ(Λ_α) γ_k(α)`.
    pub fn dsmooth_norm_sq(&self) -> Result<f64> {
        self.check_d12()?;
        let lens = self.lens();
        let terms = self.terms();
        let mut total = 0.0;
        for k in 0..self.m() {
            total += terms
                .iter()
                .map(|x| x.weight * prod_pow(&x.gamma, &lens) * x.gamma[k] as f64)
                .sum::<f64>();
        }
        Ok(total)
    }

    /// `‖𝒟ξ‖²` by integrating the norms of the Malliavin kernels over `𝕞`.
    pub fn dsmooth_norm_sq_via_kernels(&self) -> Result<f64> {
        let mut total = 0.0;
        for k in 1..=self.m() {
            for j in 0..self.atoms.len() {
                let d = self.malliavin_kernel(k, j)?;
                total += self.len(k) * self.atoms[j].mass * d.norm_sq();
            }
        }
        Ok(total)
    }

    fn check_inside(&self, k: usize, s: f64, t: f64) -> Result<()> {
        if k == 0 || k > self.m() {
            return Err(Error::OutOfRange(format!("interval index {k} outside 1..={}", self.m())));
        }
        let (lo, hi) = (self.partition[k - 1], self.partition[k]);
        if !(lo < s && s <= t && t < hi) {
            return Err(Error::InvalidInterval {
                s,
                t,
                reason: format!("need {lo} < s <= t < {hi}"),
            });
        }
        Ok(())
    }

    /// `Σ_K n·n!·c²·Π mass(K) Σ_{distinct (k,j) ∈ K} arr(K∖(k,j))·w(K∖(k,j))`
    /// with `w` a weight on the interval counts of the reduced multiset.
    fn derivative_sum<F: Fn(&[u32]) -> f64>(&self, k: usize, weight: F) -> f64 {
        let m = self.m();
        let mut total = 0.0;
        for (&n, entries) in &self.levels {
            if n == 0 {
                continue;
            }
            let nf = factorial(n);
            for (key, &c) in entries {
                let mass: f64 = key.iter().map(|&(_, j)| self.atoms[j as usize].mass).product();
                let mut inner = 0.0;
                let mut prev: Option<Cell> = None;
                for (pos, &cell) in key.iter().enumerate() {
                    if cell.0 as usize != k || prev == Some(cell) {
                        prev = Some(cell);
                        continue;
                    }
                    prev = Some(cell);
                    let mut rest = key.clone();
                    rest.remove(pos);
                    let mut gamma = vec![0u32; m];
                    for &(a, _) in &rest {
                        gamma[a as usize - 1] += 1;
                    }
                    inner += arrangements(&rest) * weight(&gamma);
                }
                total += n as f64 * nf * c * c * mass * inner;
            }
        }
        total
    }

    /// Left side `‖𝔼_t𝒟_{t,·}η − 𝔼_s𝒟_{s,·}η‖²_{L₂(ℙ⊗μ)}` and right side
    /// `4∫_s^t ‖𝔼_{r_k}η − 𝔼_rη‖²/(r_k−r)² dr` for `r_{k−1} < s ≤ t < r_k`.
    pub fn hsmooth_bound_check(&self, k: usize, s: f64, t: f64) -> Result<(f64, f64)> {
        self.check_inside(k, s, t)?;
        self.check_d12()?;
        if s == t {
            return Ok((0.0, 0.0));
        }
        let (hi, lo, d) = (self.filled(t), self.filled(s), self.overlap(s, t));
        let lhs = self.derivative_sum(k, |g| prod_diff(g, &hi, &lo, &d));
        let rk = self.partition[k];
        let rhs = 4.0
            * quad::integrate(
                |r| self.projection_distance_sq(r, rk).unwrap() / ((rk - r) * (rk - r)),
                s,
                t,
                1e-10,
            );
        Ok((lhs, rhs))
    }

    /// The left side of [`Self::hsmooth_bound_check`] through the Malliavin
    /// kernels: `Σ_j mass_j ‖𝔼_t K_j − 𝔼_s K_j‖²`.
    pub fn hsmooth_lhs_via_kernels(&self, k: usize, s: f64, t: f64) -> Result<f64> {
        self.check_inside(k, s, t)?;
        let mut total = 0.0;
        for j in 0..self.atoms.len() {
            total += self.atoms[j].mass * self.malliavin_kernel(k, j)?.projection_distance_sq(s, t)?;
        }
        Ok(total)
    }

    /// `(‖𝔼_t𝒟_{t,·}η‖²_{L₂(ℙ⊗μ)}, (T_η(r_k) − T_η(t))/(r_k − t))`.
    pub fn hsmooth_pointwise_check(&self, k: usize, t: f64) -> Result<(f64, f64)> {
        self.check_inside(k, t, t)?;
        self.check_d12()?;
        let a = self.filled(t);
        let lhs = self.derivative_sum(k, |g| prod_pow(g, &a));
        let rk = self.partition[k];
        let rhs = self.projection_distance_sq(t, rk)? / (rk - t);
        Ok((lhs, rhs))
    }

    /// Exact `lim_{t↑r_k} ‖ξ − ξ^{t,r_k}‖²/(r_k − t)`.
    pub fn resampling_quotient_limit(&self, k: usize) -> f64 {
        let lens = self.lens();
        2.0 * self
            .terms()
            .iter()
            .filter(|x| x.gamma[k - 1] > 0)
            .map(|x| x.weight * prod_pow(&x.gamma, &lens) * x.gamma[k - 1] as f64 / lens[k - 1])
            .sum::<f64>()
    }

    /// Both sides of `sup_k sup_t Q_k(t) ≤ 2R‖𝒟ξ‖²` and `‖𝒟ξ‖² ≤ (T/2) sup_k sup_t Q_k(t)`,
    /// `Q_k(t) = ‖ξ−ξ^{t,r_k}‖²/(r_k−t)`.
    ///
    /// The supremum is taken on a `grid`-point grid per interval; the grid is
    /// then refined geometrically towards `r_k` until the supremum changes by
    /// less than `1e-6` relative.
    pub fn resampling_bounds(&self, grid: usize) -> Result<ResamplingBounds> {
        let d = self.dsmooth_norm_sq()?;
        let m = self.m();
        let mut grid_sup = vec![0.0; m];
        let mut refinements = 0;
        for k in 1..=m {
            let (lo, hi) = (self.partition[k - 1], self.partition[k]);
            let q = |t: f64| self.resampling_distance_sq(t, hi).unwrap() / (hi - t);
            let mut sup = (0..grid)
                .map(|i| q(lo + (hi - lo) * i as f64 / grid as f64))
                .fold(0.0, f64::max);
            let mut gap = (hi - lo) / grid as f64;
            for _ in 0..60 {
                gap *= 0.1;
                let next = sup.max(q(hi - gap));
                refinements += 1;
                let stable = next - sup <= 1e-6 * next.abs();
                sup = next;
                if stable {
                    break;
                }
            }
            grid_sup[k - 1] = sup;
        }
        let r_max = self.lens().iter().map(|l| 1.0 / l).fold(0.0, f64::max);
        let sup_all = grid_sup.iter().cloned().fold(0.0, f64::max);
        Ok(ResamplingBounds {
            limit: (1..=m).map(|k| self.resampling_quotient_limit(k)).collect(),
            grid_sup,
            dsmooth_norm_sq: d,
            upper: 2.0 * r_max * d,
            lower_scale: 0.5 * self.horizon() * sup_all,
            refinements,
        })
    }

    fn check_compatible(&self, bundle: &PathBundle) -> Result<()> {
        let coarse = bundle.net().coarse_points();
        let tol = 1e-12 * self.horizon();
        if coarse.len() != self.partition.len()
            || coarse.iter().zip(&self.partition).any(|(a, b)| (a - b).abs() > tol)
        {
            return Err(Error::Mismatch("bundle coarse partition differs from the kernel partition".into()));
        }
        let marks = bundle.mark_measure();
        if marks.len() != self.atoms.len()
            || marks
                .atoms()
                .iter()
                .zip(&self.atoms)
                .any(|(a, b)| a.mark != b.mark || (a.mass - b.mass).abs() > 1e-12 * b.mass)
        {
            return Err(Error::Mismatch("bundle mark measure differs from the kernel atoms".into()));
        }
        Ok(())
    }

    /// Evaluates `ξ = Σ_n I_n(f_n)` on every path.
    ///
    /// A group of `q` equal cells `(k, j)` contributes `q!·e_q` of the
    /// net-interval increments of `M` inside `Λ_k × {x_j}`, so the diagonal
    /// sub-cells are dropped; the lost mass is reported.
    pub fn evaluate_paths(&self, bundle: &PathBundle) -> Result<PathEvaluation> {
        self.check_compatible(bundle)?;
        let net = bundle.net();
        let n_atoms = self.atoms.len();
        let ranges: Vec<(usize, usize)> = (1..=self.m())
            .map(|k| (net.coarse_index(k - 1), net.coarse_index(k)))
            .collect();
        struct Compiled {
            coef: f64,
            groups: Vec<(usize, usize, usize)>,
        }
        let mut compiled = Vec::new();
        let mut kept = 0.0;
        let mut full = 0.0;
        for (&n, entries) in &self.levels {
            let nf = factorial(n);
            for (key, &c) in entries {
                let mut groups: Vec<(usize, usize, usize)> = Vec::new();
                for &(a, j) in key {
                    match groups.last_mut() {
                        Some(g) if g.0 == a as usize - 1 && g.1 == j as usize => g.2 += 1,
                        _ => groups.push((a as usize - 1, j as usize, 1)),
                    }
                }
                let mass: f64 = key.iter().map(|&(_, j)| self.atoms[j as usize].mass).product();
                let mut vol = 1.0;
                let mut kept_vol = 1.0;
                for &(k, _, q) in &groups {
                    let (lo, hi) = ranges[k];
                    let h: Vec<f64> = (lo..hi).map(|i| net.dt(i)).collect();
                    vol *= self.len(k + 1).powi(q as i32);
                    kept_vol *= factorial(q) * elementary_symmetric(&h, q);
                }
                if n > 0 {
                    let w = nf * c * c * arrangements(key) * mass;
                    full += w * vol;
                    kept += w * kept_vol;
                }
                compiled.push(Compiled { coef: c * nf, groups });
            }
        }
        let c0 = self.constant_term();
        let values: Vec<f64> = (0..bundle.n_paths())
            .into_par_iter()
            .map(|p| {
                let noise = bundle.path_noise(p);
                let mut total = 0.0;
                let mut buf = Vec::new();
                for e in &compiled {
                    let mut v = e.coef;
                    for &(k, j, q) in &e.groups {
                        let (lo, hi) = ranges[k];
                        buf.clear();
                        buf.extend((lo..hi).map(|i| noise[i * n_atoms + j]));
                        v *= elementary_symmetric(&buf, q);
                    }
                    total += v;
                }
                total
            })
            .collect();
        Ok(PathEvaluation {
            values,
            kept_norm_sq: c0 * c0 + kept,
            dropped_fraction: if full > 0.0 { 1.0 - kept / full } else { 0.0 },
        })
    }

    pub fn to_json(&self) -> String {
        let doc = KernelDoc {
            partition: self.partition.clone(),
            atoms: self.atoms.clone(),
            levels: self
                .levels
                .iter()
                .filter(|(_, e)| !e.is_empty())
                .map(|(&n, e)| LevelDoc {
                    n,
                    entries: e
                        .iter()
                        .map(|(k, &coef)| EntryDoc {
                            alpha: k.iter().map(|c| c.0).collect(),
                            marks: k.iter().map(|c| c.1).collect(),
                            coef,
                        })
                        .collect(),
                })
                .collect(),
            truncation: Some(self.truncation),
        };
        serde_json::to_string_pretty(&doc).expect("kernel sets serialize")
    }

    /// Loads a kernel set, rejecting non-canonical or duplicated entries.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: KernelDoc = serde_json::from_str(text)?;
        let mut set = Self::new(doc.partition, doc.atoms)?;
        let top = doc.levels.iter().map(|l| l.n).max().unwrap_or(0);
        set.truncation = doc.truncation.unwrap_or(DEFAULT_TRUNCATION).max(top);
        for level in &doc.levels {
            for e in &level.entries {
                if e.alpha.len() != level.n {
                    return Err(Error::InvalidKernel(format!(
                        "entry of length {} in level {}",
                        e.alpha.len(),
                        level.n
                    )));
                }
                set.insert_canonical(&e.alpha, &e.marks, e.coef)?;
            }
        }
        Ok(set)
    }
}

/// A random kernel set with `entries` entries on every level `1..=max_level`
/// and a random constant.
pub fn random_kernel_set<R: Rng>(
    rng: &mut R,
    partition: Vec<f64>,
    atoms: Vec<MarkAtom>,
    max_level: usize,
    entries: usize,
) -> Result<ChaosKernelSet> {
    let mut set = ChaosKernelSet::new(partition, atoms)?.with_truncation(max_level.max(DEFAULT_TRUNCATION))?;
    let (m, n_atoms) = (set.m() as u16, set.atoms.len() as u16);
    set.set_constant(rng.sample(StandardNormal));
    for n in 1..=max_level {
        for _ in 0..entries {
            let alpha: Vec<u16> = (0..n).map(|_| rng.gen_range(1..=m)).collect();
            let marks: Vec<u16> = (0..n).map(|_| rng.gen_range(0..n_atoms)).collect();
            let c: f64 = rng.sample(StandardNormal);
            set.add(&alpha, &marks, c)?;
        }
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy::{derive_mark_measure, simulate, LevyModel};
    use crate::stats::Estimate;
    use proptest::prelude::*;
    use rand::SeedableRng as _;
    use rand_chacha::ChaCha8Rng;

    fn toy_atoms() -> Vec<MarkAtom> {
        derive_mark_measure(&LevyModel::with_atoms(0.0, 1.0, &[(1.0, 2.0)], 1.0).unwrap())
            .atoms()
            .to_vec()
    }

    fn x_t(t: f64) -> ChaosKernelSet {
        ChaosKernelSet::x_at(vec![0.0, t], toy_atoms(), 1, 0.0).unwrap()
    }

    fn three_atoms() -> Vec<MarkAtom> {
        vec![
            MarkAtom { mark: 0.0, mass: 0.5 },
            MarkAtom { mark: 1.0, mass: 0.8 },
            MarkAtom { mark: -0.5, mass: 0.3 },
        ]
    }

    fn random_set(seed: u64, m: usize, max_level: usize) -> ChaosKernelSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cuts: Vec<f64> = (0..m - 1).map(|_| rand::Rng::gen_range(&mut rng, 0.1..0.9)).collect();
        cuts.sort_by(f64::total_cmp);
        let mut partition = vec![0.0];
        partition.extend(cuts);
        partition.push(1.0);
        random_kernel_set(&mut rng, partition, three_atoms(), max_level, 3).unwrap()
    }

    /// All ordered tuples in `{1..m}ⁿ × {0..J}ⁿ`.
    fn ordered_tuples(m: u16, j: u16, n: usize) -> Vec<(Vec<u16>, Vec<u16>)> {
        let mut out = vec![(Vec::new(), Vec::new())];
        for _ in 0..n {
            let mut next = Vec::new();
            for (a, b) in &out {
                for x in 1..=m {
                    for y in 0..j {
                        let (mut a2, mut b2) = (a.clone(), b.clone());
                        a2.push(x);
                        b2.push(y);
                        next.push((a2, b2));
                    }
                }
            }
            out = next;
        }
        out
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn norm_examples() {
        let mut c = ChaosKernelSet::new(vec![0.0, 1.0], toy_atoms()).unwrap();
        c.set_constant(2.5);
        assert_eq!(c.norm_sq(), 6.25);
        for t in [0.5, 1.0, 2.0] {
            assert!((x_t(t).norm_sq() - 3.0 * t).abs() < 1e-14);
        }
        let x = x_t(2.0);
        assert!((x.projection_norm_sq(1.0).unwrap() - 3.0).abs() < 1e-14);
        assert_eq!(x.projection_norm_sq(2.0).unwrap(), x.norm_sq());
        assert_eq!(c.projection_norm_sq(0.0).unwrap(), 6.25);
        assert!(x.projection_norm_sq(2.5).is_err());
        assert!((x.projection_distance_sq(0.3, 1.1).unwrap() - 3.0 * 0.8).abs() < 1e-14);
        assert_eq!(x.projection_distance_sq(0.7, 0.7).unwrap(), 0.0);
        assert!(x.projection_distance_sq(0.8, 0.7).is_err());
        assert!((x.resampling_distance_sq(0.5, 1.5).unwrap() - 6.0).abs() < 1e-14);
        assert!(x.resampling_distance_sq(0.5, 0.5).is_err());
    }

    #[test]
    fn asymmetric_kernel_symmetrization_matches_brute_force() {
        let atoms = toy_atoms();
        let partition = vec![0.0, 0.4, 1.0];
        let raw = vec![
            (vec![1, 2], vec![0, 1], 1.5),
            (vec![2, 1], vec![1, 0], -0.5),
            (vec![1, 1], vec![0, 1], 2.0),
            (vec![2, 2], vec![1, 1], 0.7),
            (vec![1, 2], vec![1, 1], 1.1),
        ];
        let mut set = ChaosKernelSet::new(partition.clone(), atoms.clone()).unwrap();
        set.add_symmetrized(2, &raw).unwrap();

        let raw_at = |a: &[u16], j: &[u16]| -> f64 {
            raw.iter()
                .filter(|(ra, rj, _)| ra == a && rj == j)
                .map(|r| r.2)
                .sum()
        };
        let mut brute = 0.0;
        for (a, j) in ordered_tuples(2, 2, 2) {
            let sym: f64 = permutations(2)
                .iter()
                .map(|p| {
                    let pa: Vec<u16> = p.iter().map(|&i| a[i]).collect();
                    let pj: Vec<u16> = p.iter().map(|&i| j[i]).collect();
                    raw_at(&pa, &pj)
                })
                .sum::<f64>()
                / 2.0;
            let vol: f64 = a.iter().map(|&l| partition[l as usize] - partition[l as usize - 1]).product();
            let mass: f64 = j.iter().map(|&x| atoms[x as usize].mass).product();
            brute += sym * sym * vol * mass;
        }
        brute *= 2.0;
        assert!((set.norm_sq() - brute).abs() < 1e-12 * brute);
        // canonicalizing again changes nothing
        let again = ChaosKernelSet::from_json(&set.to_json()).unwrap();
        assert_eq!(again.norm_sq(), set.norm_sq());
    }

    #[test]
    fn brute_force_norm_level_three() {
        let set = random_set(3, 2, 3);
        let partition = set.partition().to_vec();
        let mut brute = set.constant_term().powi(2);
        for n in 1..=3 {
            let mut level = 0.0;
            for (a, j) in ordered_tuples(2, 3, n) {
                let c = set.coefficient(&a, &j);
                let vol: f64 = a.iter().map(|&l| partition[l as usize] - partition[l as usize - 1]).product();
                let mass: f64 = j.iter().map(|&x| set.atoms()[x as usize].mass).product();
                level += c * c * vol * mass;
            }
            brute += factorial(n) * level;
        }
        assert!((set.norm_sq() - brute).abs() < 1e-12 * brute);
    }

    #[test]
    fn loader_rejects_non_canonical_and_duplicates() {
        let base = r#"{"partition":[0.0,0.5,1.0],"atoms":[{"mark":0.0,"mass":1.0}],"levels":[{"n":2,"entries":[ENTRIES]}]}"#;
        let ok = base.replace("ENTRIES", r#"{"alpha":[1,2],"marks":[0,0],"coef":1.0}"#);
        assert!(ChaosKernelSet::from_json(&ok).is_ok());
        let unsorted = base.replace("ENTRIES", r#"{"alpha":[2,1],"marks":[0,0],"coef":1.0}"#);
        assert!(matches!(ChaosKernelSet::from_json(&unsorted), Err(Error::InvalidKernel(_))));
        let dup = base.replace(
            "ENTRIES",
            r#"{"alpha":[1,2],"marks":[0,0],"coef":1.0},{"alpha":[1,2],"marks":[0,0],"coef":2.0}"#,
        );
        assert!(ChaosKernelSet::from_json(&dup).is_err());
        let bad_alpha = base.replace("ENTRIES", r#"{"alpha":[0,2],"marks":[0,0],"coef":1.0}"#);
        assert!(ChaosKernelSet::from_json(&bad_alpha).is_err());
    }

    #[test]
    fn malliavin_kernel_examples() {
        let x = x_t(1.0);
        for j in 0..2 {
            let d = x.malliavin_kernel(1, j).unwrap();
            assert_eq!(d.constant_term(), 1.0);
            assert_eq!(d.max_level(), 0);
        }
        let mut c = ChaosKernelSet::new(vec![0.0, 1.0], toy_atoms()).unwrap();
        c.set_constant(4.0);
        assert_eq!(c.malliavin_kernel(1, 0).unwrap().norm_sq(), 0.0);
        assert_eq!(c.dsmooth_norm_sq().unwrap(), 0.0);
        assert!((x.dsmooth_norm_sq().unwrap() - 3.0).abs() < 1e-14);
        assert!((x_t(2.0).dsmooth_norm_sq().unwrap() - 6.0).abs() < 1e-14);
    }

    #[test]
    fn dsmooth_identity_for_random_sets() {
        for seed in 0..20 {
            let set = random_set(seed, 3, 4);
            let a = set.dsmooth_norm_sq().unwrap();
            let b = set.dsmooth_norm_sq_via_kernels().unwrap();
            let c: f64 = set
                .level_norms_sq()
                .iter()
                .enumerate()
                .map(|(n, v)| n as f64 * v)
                .sum();
            assert!((a - b).abs() <= 1e-12 * a, "{a} {b}");
            assert!((a - c).abs() <= 1e-12 * a);
        }
    }

    #[test]
    fn d12_check_flags_growing_top_level() {
        let atoms = vec![MarkAtom { mark: 0.0, mass: 1.0 }];
        let mut set = ChaosKernelSet::new(vec![0.0, 1.0], atoms).unwrap().with_truncation(3).unwrap();
        set.add(&[1], &[0], 1.0).unwrap();
        set.add(&[1, 1], &[0, 0], 1.0).unwrap();
        set.add(&[1, 1, 1], &[0, 0, 0], 1.0).unwrap();
        assert!(matches!(set.check_d12(), Err(Error::NotInD12 { .. })));
        assert!(set.malliavin_kernel(1, 0).is_err());
        let mut ok = set.clone();
        ok.add(&[1, 1, 1], &[0, 0, 0], -0.9).unwrap();
        assert!(ok.check_d12().is_ok());
    }

    #[test]
    fn hsmooth_examples() {
        let x = x_t(1.0);
        let (l, r) = x.hsmooth_bound_check(1, 0.3, 0.6).unwrap();
        assert_eq!(l, 0.0);
        assert!(r > 0.0);
        assert_eq!(x.hsmooth_bound_check(1, 0.4, 0.4).unwrap(), (0.0, 0.0));
        let (l, r) = x.hsmooth_pointwise_check(1, 0.37).unwrap();
        assert!((l - 3.0).abs() < 1e-14 && (r - 3.0).abs() < 1e-12);
        let mut c = ChaosKernelSet::new(vec![0.0, 1.0], toy_atoms()).unwrap();
        c.set_constant(1.0);
        assert_eq!(c.hsmooth_pointwise_check(1, 0.5).unwrap(), (0.0, 0.0));
        assert!(x.hsmooth_bound_check(1, 0.0, 0.5).is_err());
        assert!(x.hsmooth_bound_check(1, 0.6, 0.5).is_err());
    }

    #[test]
    fn resampling_equals_twice_projection_gap_when_measurable() {
        for seed in 0..10 {
            let mut set = random_set(seed, 2, 3);
            // keep only entries living on the first interval: F_{r_1}-measurable
            for level in set.levels.values_mut() {
                level.retain(|k, _| k.iter().all(|c| c.0 == 1));
            }
            let r1 = set.partition()[1];
            for t in [0.0, 0.3 * r1, 0.9 * r1] {
                let a = set.resampling_distance_sq(t, r1).unwrap();
                let b = 2.0 * set.projection_distance_sq(t, r1).unwrap();
                assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
            }
        }
    }

    #[test]
    fn resampling_shrinks_with_window() {
        let set = random_set(5, 2, 3);
        let mut prev = f64::INFINITY;
        for e in [0.5, 0.1, 0.01, 1e-4, 1e-8] {
            let v = set.resampling_distance_sq(1.0 - e, 1.0).unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn resampling_bounds_hold_and_limit_is_sup() {
        for seed in 0..5 {
            let set = random_set(seed, 3, 4);
            let b = set.resampling_bounds(1000).unwrap();
            assert!(b.holds(), "{b:?}");
            for (s, l) in b.grid_sup.iter().zip(&b.limit) {
                assert!((s - l).abs() <= 1e-6 * l);
            }
        }
    }

    #[test]
    fn path_evaluation_second_moment() {
        let model = LevyModel::with_atoms(0.0, 1.0, &[(1.0, 2.0)], 1.0).unwrap();
        let net = TimeNet::equidistant(1.0, 8, 2).unwrap();
        let marks = model.mark_measure();
        let mut set = ChaosKernelSet::for_net(&net, &marks);
        set.set_constant(0.5);
        set.add(&[1], &[0], 1.0).unwrap();
        set.add(&[1, 2], &[0, 1], -0.7).unwrap();
        set.add(&[2, 2], &[1, 1], 0.4).unwrap();
        let bundle = simulate(&model, &net, 100_000, 17).unwrap();
        let eval = set.evaluate_paths(&bundle).unwrap();
        let mean = Estimate::from_slice(&eval.values);
        assert!(mean.within(0.5, 3.0));
        let sq: Vec<f64> = eval.values.iter().map(|v| v * v).collect();
        assert!(Estimate::from_slice(&sq).within(eval.kept_norm_sq, 3.0));
        // one repeated cell of 4 sub-intervals: kept fraction 12/16 on its entry
        assert!(eval.dropped_fraction > 0.0 && eval.dropped_fraction < 0.25);
    }

    #[test]
    fn elementary_symmetric_small() {
        assert_eq!(elementary_symmetric(&[1.0, 2.0, 3.0], 2), 11.0);
        assert_eq!(elementary_symmetric(&[1.0, 2.0, 3.0], 3), 6.0);
        assert_eq!(elementary_symmetric(&[1.0], 2), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn projection_is_monotone_and_consistent(seed in 0u64..10_000, s in 0.0f64..1.0, t in 0.0f64..1.0) {
            let set = random_set(seed, 2, 4);
            let (s, t) = if s <= t { (s, t) } else { (t, s) };
            let ts = set.projection_norm_sq(s).unwrap();
            let tt = set.projection_norm_sq(t).unwrap();
            prop_assert!(tt + 1e-12 * tt >= ts);
            let d = set.projection_distance_sq(s, t).unwrap();
            prop_assert!((d - (tt - ts)).abs() <= 1e-12 * set.norm_sq());
            prop_assert!((set.projection_norm_sq(1.0).unwrap() - set.norm_sq()).abs() <= 1e-12 * set.norm_sq());
            prop_assert_eq!(set.projection_norm_sq(0.0).unwrap(), set.constant_term().powi(2));
            let per_level: f64 = set.level_norms_sq().iter().sum();
            prop_assert!((per_level - set.norm_sq()).abs() <= 1e-15 * per_level);
        }

        #[test]
        fn smoothness_inequalities_hold(seed in 0u64..10_000, k in 1usize..=2, u in 0.01f64..0.99, v in 0.01f64..0.99) {
            let set = random_set(seed, 2, 4);
            let (lo, hi) = (set.partition()[k - 1], set.partition()[k]);
            let (u, v) = if u <= v { (u, v) } else { (v, u) };
            let (s, t) = (lo + u * (hi - lo), lo + v * (hi - lo));
            let (l, r) = set.hsmooth_bound_check(k, s, t).unwrap();
            prop_assert!(l <= r * (1.0 + 1e-8) + 1e-14);
            let l2 = set.hsmooth_lhs_via_kernels(k, s, t).unwrap();
            prop_assert!((l - l2).abs() <= 1e-12 * l.max(1e-300));
            let (l, r) = set.hsmooth_pointwise_check(k, t).unwrap();
            prop_assert!(l <= r * (1.0 + 1e-12));
        }
    }
}
