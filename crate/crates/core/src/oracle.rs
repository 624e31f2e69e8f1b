//! Exact finite-tree skeleton of the model.
//!
//! Each step carries independent binary components: a Brownian proxy `±σ_b√Δ`
//! and, per jump atom, a compensated jump `x(1{jump} − λΔ)` with probability
//! `λΔ`. Choosing `σ_b² = σ² + Σ x²λ²Δ` makes the per-step mean and variance
//! equal `γΔ` and `μ(ℝ)Δ`. With binary components the products of centered
//! increments over subsets of (step, component) pairs form a complete
//! orthogonal system, so chaos coefficients are exact.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bsde::{Functional, Generator};
use crate::chaos::{factorial, ChaosKernelSet};
use crate::error::{Error, Result};
use crate::levy::{LevyModel, MarkAtom, MarkMeasure, PathBundle, RngLineage, TimeNet};
use crate::rng::{Purpose, StreamFactory};

pub const MAX_STEPS: usize = 8;
pub const MAX_ALPHABET: usize = 4;
pub const MAX_LEAVES: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSpec {
    pub gamma: f64,
    pub sigma: f64,
    /// `(size, intensity)` per jump atom.
    pub jumps: Vec<(f64, f64)>,
    pub horizon: f64,
    pub n_steps: usize,
    /// Coarse partition as step indices, `0 = k_0 < … < k_m = n_steps`.
    pub coarse: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Component {
    pub mark: f64,
    /// Jump atom index, `None` for the Brownian proxy.
    pub jump: Option<usize>,
    /// Value of the centered increment for bit 0 and bit 1.
    pub values: [f64; 2],
    pub probs: [f64; 2],
}

impl Component {
    pub fn variance(&self) -> f64 {
        self.probs[0] * self.values[0].powi(2) + self.probs[1] * self.values[1].powi(2)
    }
}

#[derive(Debug, Clone)]
pub struct TreeModel {
    spec: TreeSpec,
    dt: f64,
    sigma_b: f64,
    components: Vec<Component>,
    alphabet: usize,
    prob: Vec<f64>,
    inc: Vec<f64>,
    /// `|mean − γΔ| + |variance − μ(ℝ)Δ|` per step.
    pub moment_error: f64,
}

impl TreeModel {
    pub fn new(spec: TreeSpec) -> Result<Self> {
        let n = spec.n_steps;
        if n == 0 || n > MAX_STEPS {
            return Err(Error::OutOfRange(format!("n_steps = {n} not in 1..={MAX_STEPS}")));
        }
        let model = LevyModel::with_atoms(spec.gamma, spec.sigma, &spec.jumps, spec.horizon)?;
        if spec.coarse.first() != Some(&0)
            || spec.coarse.last() != Some(&n)
            || spec.coarse.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::Config("coarse steps must rise strictly from 0 to n_steps".into()));
        }
        let dt = spec.horizon / n as f64;
        let sigma_b = (spec.sigma.powi(2) + spec.jumps.iter().map(|(x, l)| x * x * l * l * dt).sum::<f64>()).sqrt();
        let mut components = Vec::new();
        if sigma_b > 0.0 {
            let v = sigma_b * dt.sqrt();
            components.push(Component {
                mark: 0.0,
                jump: None,
                values: [-v, v],
                probs: [0.5, 0.5],
            });
        }
        for (j, a) in model.jump_atoms().iter().enumerate() {
            let p = a.intensity * dt;
            if p >= 1.0 {
                return Err(Error::StepTooCoarse { step: 0, product: p });
            }
            components.push(Component {
                mark: a.size,
                jump: Some(j),
                values: [-a.size * p, a.size * (1.0 - p)],
                probs: [1.0 - p, p],
            });
        }
        if components.is_empty() {
            return Err(Error::InvalidModel("the skeleton of a deterministic model has no randomness".into()));
        }
        let alphabet = 1usize << components.len();
        if alphabet > MAX_ALPHABET {
            return Err(Error::OutOfRange(format!(
                "alphabet {alphabet} above {MAX_ALPHABET}: use at most two components"
            )));
        }
        if alphabet.pow(n as u32) > MAX_LEAVES {
            return Err(Error::OutOfRange("tree too large".into()));
        }
        let mut prob = vec![1.0; alphabet];
        let mut inc = vec![spec.gamma * dt; alphabet];
        for d in 0..alphabet {
            for (c, comp) in components.iter().enumerate() {
                let bit = (d >> c) & 1;
                prob[d] *= comp.probs[bit];
                inc[d] += comp.values[bit];
            }
        }
        let mean: f64 = prob.iter().zip(&inc).map(|(p, x)| p * x).sum();
        let var: f64 = prob.iter().zip(&inc).map(|(p, x)| p * (x - mean).powi(2)).sum();
        let moment_error = (mean - spec.gamma * dt).abs() + (var - model.variance_rate() * dt).abs();
        Ok(Self {
            spec,
            dt,
            sigma_b,
            components,
            alphabet,
            prob,
            inc,
            moment_error,
        })
    }

    pub fn spec(&self) -> &TreeSpec {
        &self.spec
    }

    pub fn n_steps(&self) -> usize {
        self.spec.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sigma_b(&self) -> f64 {
        self.sigma_b
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    pub fn n_nodes(&self, depth: usize) -> usize {
        self.alphabet.pow(depth as u32)
    }

    /// Per-step mean and variance of the skeleton increment.
    pub fn step_moments(&self) -> (f64, f64) {
        let mean: f64 = self.prob.iter().zip(&self.inc).map(|(p, x)| p * x).sum();
        let var = self.prob.iter().zip(&self.inc).map(|(p, x)| p * (x - mean).powi(2)).sum();
        (mean, var)
    }

    /// Mark measure of the skeleton: component variances per unit time.
    pub fn mark_measure(&self) -> MarkMeasure {
        MarkMeasure::from_atoms(
            self.components
                .iter()
                .map(|c| MarkAtom {
                    mark: c.mark,
                    mass: c.variance() / self.dt,
                })
                .collect(),
        )
        .expect("component variances are positive")
    }

    /// The continuous model whose Brownian part has volatility `σ_b`; its
    /// paths at net points reproduce the skeleton when sampled by
    /// [`simulate_skeleton`].
    pub fn skeleton_model(&self) -> LevyModel {
        LevyModel::with_atoms(self.spec.gamma, self.sigma_b, &self.spec.jumps, self.spec.horizon)
            .expect("validated at construction")
    }

    pub fn net(&self) -> TimeNet {
        let points: Vec<f64> = (0..=self.n_steps()).map(|i| self.time(i)).collect();
        let coarse: Vec<f64> = self.spec.coarse.iter().map(|&i| self.time(i)).collect();
        TimeNet::new(points, &coarse).expect("tree nets are valid")
    }

    fn digit(&self, node: usize, step: usize) -> usize {
        (node / self.alphabet.pow(step as u32)) % self.alphabet
    }

    /// Skeleton `X` at every depth-`depth` node.
    pub fn x_nodes(&self, depth: usize) -> Vec<f64> {
        (0..self.n_nodes(depth))
            .map(|p| (0..depth).map(|i| self.inc[self.digit(p, i)]).sum())
            .collect()
    }

    /// Leaf values of `g(X_{t_0}, …, X_{t_n})`.
    pub fn leaf_values<F: Fn(&[f64]) -> f64>(&self, g: F) -> Vec<f64> {
        let n = self.n_steps();
        let mut path = vec![0.0; n + 1];
        (0..self.n_nodes(n))
            .map(|leaf| {
                for i in 0..n {
                    path[i + 1] = path[i] + self.inc[self.digit(leaf, i)];
                }
                g(&path)
            })
            .collect()
    }

    /// Leaf values of a functional whose times are tree points.
    pub fn functional_values(&self, phi: &Functional) -> Result<Vec<f64>> {
        let idx = phi.indices(&self.net())?;
        Ok(self.leaf_values(|path| {
            let vals: Vec<f64> = idx.iter().map(|&i| path[i]).collect();
            phi.eval(&vals)
        }))
    }

    fn check_depth(&self, values: &[f64]) -> Result<usize> {
        (0..=self.n_steps())
            .find(|&d| self.n_nodes(d) == values.len())
            .ok_or_else(|| Error::Mismatch(format!("{} values match no tree depth", values.len())))
    }

    /// `𝔼[G | 𝓕_step]` per depth-`step` node, `G` given on any deeper level.
    pub fn conditional_expectation(&self, values: &[f64], step: usize) -> Result<Vec<f64>> {
        let depth = self.check_depth(values)?;
        if step > depth {
            return Err(Error::OutOfRange(format!("step {step} beyond depth {depth}")));
        }
        let mut cur = values.to_vec();
        for d in (step..depth).rev() {
            let width = self.n_nodes(d);
            cur = (0..width)
                .map(|p| (0..self.alphabet).map(|a| self.prob[a] * cur[p + width * a]).sum())
                .collect();
        }
        Ok(cur)
    }

    /// Node values at depth `d` repeated over every leaf below each node.
    pub fn lift(&self, values: &[f64]) -> Result<Vec<f64>> {
        let d = self.check_depth(values)?;
        let width = self.n_nodes(d);
        Ok((0..self.n_nodes(self.n_steps())).map(|l| values[l % width]).collect())
    }

    /// Exact implicit scheme `Y_i = 𝔼_i Y_{i+1} + Δ f(t_i, X_i, Y_i, Z̄_i)`,
    /// `Z̄_i = 𝔼_i[Y_{i+1} Σ_c κ′_c ε_{i,c}] / Δ`.
    pub fn exact_bsde(&self, gen: &Generator, xi: &[f64]) -> Result<TreeSolution> {
        let n = self.n_steps();
        if xi.len() != self.n_nodes(n) {
            return Err(Error::Mismatch("terminal values must be given on the leaves".into()));
        }
        let kappa = gen.kappa_prime();
        if kappa.len() != self.components.len() {
            return Err(Error::Config(format!(
                "kappa' has {} values but the tree has {} components",
                kappa.len(),
                self.components.len()
            )));
        }
        let product = self.dt * gen.lipschitz();
        if product >= 1.0 {
            return Err(Error::StepTooCoarse { step: 0, product });
        }
        let weight: Vec<f64> = (0..self.alphabet)
            .map(|a| {
                self.components
                    .iter()
                    .enumerate()
                    .map(|(c, comp)| kappa[c] * comp.values[(a >> c) & 1])
                    .sum()
            })
            .collect();
        let mut y = vec![Vec::new(); n + 1];
        let mut z_bar = vec![Vec::new(); n];
        y[n] = xi.to_vec();
        for i in (0..n).rev() {
            let width = self.n_nodes(i);
            let x = self.x_nodes(i);
            let t = self.time(i);
            let next = &y[i + 1];
            let mut yi = Vec::with_capacity(width);
            let mut zi = Vec::with_capacity(width);
            for p in 0..width {
                let mut ey = 0.0;
                let mut ez = 0.0;
                for a in 0..self.alphabet {
                    let v = self.prob[a] * next[p + width * a];
                    ey += v;
                    ez += v * weight[a];
                }
                let z = ez / self.dt;
                let mut cur = ey;
                let mut converged = false;
                let mut resid = 0.0;
                for _ in 0..200 {
                    let nxt = ey + self.dt * gen.eval(t, x[p], cur, z);
                    resid = (nxt - cur).abs();
                    cur = nxt;
                    if resid <= 1e-14 * (1.0 + cur.abs()) {
                        converged = true;
                        break;
                    }
                }
                if !converged {
                    return Err(Error::NoConvergence { step: i, residual: resid });
                }
                yi.push(cur);
                zi.push(z);
            }
            y[i] = yi;
            z_bar[i] = zi;
        }
        Ok(TreeSolution { y, z_bar })
    }

    fn bit(&self, step: usize, c: usize) -> usize {
        1usize << (step * self.components.len() + c)
    }

    /// Coefficients `c_S` of `G = Σ_S c_S Π_{(i,c)∈S} ε_{i,c}` for every subset
    /// `S`, indexed by the bitmask with bit `i·C + c`; `G` given on the leaves.
    pub fn chaos_coefficients(&self, leaves: &[f64]) -> Result<Vec<f64>> {
        if leaves.len() != self.n_nodes(self.n_steps()) {
            return Err(Error::Mismatch("chaos projection needs leaf values".into()));
        }
        let nc = self.components.len();
        let mut f = leaves.to_vec();
        for step in 0..self.n_steps() {
            for (c, comp) in self.components.iter().enumerate() {
                let bit = self.bit(step, c);
                let var = comp.variance();
                let [q0, q1] = comp.probs;
                let [e0, e1] = comp.values;
                for j in 0..f.len() {
                    if j & bit == 0 {
                        let (v0, v1) = (f[j], f[j | bit]);
                        f[j] = q0 * v0 + q1 * v1;
                        f[j | bit] = (q0 * e0 * v0 + q1 * e1 * v1) / var;
                    }
                }
            }
        }
        let _ = nc;
        Ok(f)
    }

    /// Chaos projection up to `max_level` as a kernel set on the tree's time
    /// points and components: the entry of `S` is `c_S / |S|!`.
    pub fn chaos_project(&self, leaves: &[f64], max_level: usize) -> Result<TreeChaos> {
        let n_cells = self.n_steps() * self.components.len();
        if max_level > n_cells {
            return Err(Error::OutOfRange(format!(
                "level {max_level} beyond the {n_cells} (step, component) cells"
            )));
        }
        let coefs = self.chaos_coefficients(leaves)?;
        let marks = self.mark_measure();
        let partition: Vec<f64> = (0..=self.n_steps()).map(|i| self.time(i)).collect();
        let mut kernel =
            ChaosKernelSet::new(partition, marks.atoms().to_vec())?.with_truncation(max_level.max(1))?;
        kernel.set_constant(coefs[0]);
        let nc = self.components.len();
        let total_var: f64 = leaves
            .iter()
            .enumerate()
            .map(|(l, v)| self.leaf_prob(l) * (v - coefs[0]).powi(2))
            .sum();
        let mut captured = 0.0;
        for (mask, &c) in coefs.iter().enumerate().skip(1) {
            let level = mask.count_ones() as usize;
            let weight: f64 = (0..n_cells)
                .filter(|k| mask >> k & 1 == 1)
                .map(|k| self.components[k % nc].variance())
                .product();
            if level <= max_level {
                captured += c * c * weight;
                if c != 0.0 {
                    let (alpha, mk): (Vec<u16>, Vec<u16>) = (0..n_cells)
                        .filter(|k| mask >> k & 1 == 1)
                        .map(|k| ((k / nc + 1) as u16, (k % nc) as u16))
                        .unzip();
                    kernel.insert_canonical(&alpha, &mk, c / factorial(level))?;
                }
            }
        }
        Ok(TreeChaos {
            coefficients: coefs,
            kernel,
            variance: total_var,
            captured_variance: captured,
        })
    }

    fn normalized(&self, coefs: &[f64]) -> Vec<f64> {
        let nc = self.components.len();
        let sd: Vec<f64> = self.components.iter().map(|c| c.variance().sqrt()).collect();
        coefs
            .iter()
            .enumerate()
            .map(|(mask, c)| {
                let mut v = *c;
                let mut m = mask;
                let mut k = 0;
                while m != 0 {
                    if m & 1 == 1 {
                        v *= sd[k % nc];
                    }
                    m >>= 1;
                    k += 1;
                }
                v
            })
            .collect()
    }

    pub fn leaf_prob(&self, leaf: usize) -> f64 {
        (0..self.n_steps()).map(|i| self.prob[self.digit(leaf, i)]).product()
    }

    /// Canonical class of a subset under permutations of steps within each
    /// coarse interval (restricted to steps before `limit`).
    fn class_key(&self, mask: usize) -> Vec<Vec<usize>> {
        let nc = self.components.len();
        self.spec
            .coarse
            .windows(2)
            .map(|w| {
                let mut m: Vec<usize> = (w[0]..w[1])
                    .map(|i| (mask >> (i * nc)) & ((1 << nc) - 1))
                    .filter(|&b| b != 0)
                    .collect();
                m.sort_unstable();
                m
            })
            .collect()
    }

    /// Structure of `Y_{t_i}`'s chaos: (a) no coefficient touches steps at or
    /// after `i`; (b) coefficients are invariant under permutations of steps
    /// within each coarse interval.
    pub fn structure_flags(&self, node_values: &[f64], tol: f64) -> Result<StructureFlags> {
        let step = self.check_depth(node_values)?;
        // compare in the orthonormal scale c_S·Π sd, where round-off is uniform
        let coefs = self.normalized(&self.chaos_coefficients(&self.lift(node_values)?)?);
        let nc = self.components.len();
        let scale = coefs.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-300);
        let inside = (1usize << (step * nc)) - 1;
        let max_outside = coefs
            .iter()
            .enumerate()
            .filter(|(m, _)| m & !inside != 0)
            .fold(0.0f64, |acc, (_, c)| acc.max(c.abs()));
        let mut groups: BTreeMap<Vec<Vec<usize>>, (f64, f64)> = BTreeMap::new();
        for (mask, &c) in coefs.iter().enumerate().skip(1) {
            if mask & !inside != 0 {
                continue;
            }
            let g = groups.entry(self.class_key(mask)).or_insert((c, c));
            g.0 = g.0.min(c);
            g.1 = g.1.max(c);
        }
        let max_spread = groups.values().fold(0.0f64, |acc, (lo, hi)| acc.max(hi - lo));
        Ok(StructureFlags {
            step,
            support_ok: max_outside <= tol * scale,
            cuboid_ok: max_spread <= tol * scale,
            max_outside,
            max_spread,
        })
    }

    /// Discrete derivative of a leaf function in component `c` at `step`:
    /// `(G(bit 1) − G(bit 0)) / (e₁ − e₀)`.
    pub fn derivative(&self, leaves: &[f64], step: usize, c: usize) -> Result<Vec<f64>> {
        if leaves.len() != self.n_nodes(self.n_steps()) || step >= self.n_steps() || c >= self.components.len() {
            return Err(Error::OutOfRange("derivative direction outside the tree".into()));
        }
        let bit = self.bit(step, c);
        let comp = &self.components[c];
        let h = comp.values[1] - comp.values[0];
        Ok((0..leaves.len()).map(|l| (leaves[l | bit] - leaves[l & !bit]) / h).collect())
    }

    /// `𝒟_{t,x} 𝔼_s G = 𝔼_s(𝒟_{t,x} G) 1_{t<s}` for every step `t`, component
    /// and conditioning step `s`.
    pub fn commutation_check(&self, leaves: &[f64]) -> Result<CommutationReport> {
        let n = self.n_steps();
        let mut max_error: f64 = 0.0;
        let mut zero_violations = 0;
        let mut checks = 0;
        for s in 0..=n {
            let proj = self.lift(&self.conditional_expectation(leaves, s)?)?;
            for j in 0..n {
                for c in 0..self.components.len() {
                    let lhs = self.derivative(&proj, j, c)?;
                    checks += 1;
                    if j >= s {
                        zero_violations += lhs.iter().filter(|v| **v != 0.0).count();
                    } else {
                        let d = self.derivative(leaves, j, c)?;
                        let rhs = self.lift(&self.conditional_expectation(&d, s)?)?;
                        for (a, b) in lhs.iter().zip(&rhs) {
                            max_error = max_error.max((a - b).abs() / (1.0 + b.abs()));
                        }
                    }
                }
            }
        }
        Ok(CommutationReport {
            checks,
            max_error,
            zero_violations,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TreeSolution {
    /// `Y` per node, per depth.
    pub y: Vec<Vec<f64>>,
    /// `Z̄` per node for depths `0..n`.
    pub z_bar: Vec<Vec<f64>>,
}

impl TreeSolution {
    pub fn y0(&self) -> f64 {
        self.y[0][0]
    }

    pub fn zbar0(&self) -> f64 {
        self.z_bar[0][0]
    }
}

#[derive(Debug, Clone)]
pub struct TreeChaos {
    /// `c_S` by subset bitmask; index 0 is the mean.
    pub coefficients: Vec<f64>,
    pub kernel: ChaosKernelSet,
    /// Exact `Var G`.
    pub variance: f64,
    /// `Σ_{1≤|S|≤max level} c_S² Π Var ε`.
    pub captured_variance: f64,
}

impl TreeChaos {
    pub fn parseval_gap(&self) -> f64 {
        (self.variance - self.captured_variance).abs()
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StructureFlags {
    pub step: usize,
    pub support_ok: bool,
    pub cuboid_ok: bool,
    pub max_outside: f64,
    pub max_spread: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CommutationReport {
    pub checks: usize,
    pub max_error: f64,
    /// Entries of `𝒟_t 𝔼_s G` with `t ≥ s` that are not exactly zero.
    pub zero_violations: usize,
}

/// Paths of the skeleton random walk as a bundle of the skeleton model on
/// the tree net, jumps placed at the right end of their step.
pub fn simulate_skeleton(tree: &TreeModel, n_paths: usize, seed: u64) -> Result<PathBundle> {
    let n = tree.n_steps();
    let factory = StreamFactory::new(seed);
    let root = tree.dt.sqrt();
    let mut dw = Vec::with_capacity(n_paths * n);
    let mut events = Vec::with_capacity(n_paths);
    for p in 0..n_paths {
        let mut rng = factory.stream(Purpose::Skeleton, p as u64, 0, 0);
        let mut ev = Vec::new();
        for i in 0..n {
            let mut w = 0.0;
            for comp in &tree.components {
                let up = rng.gen::<f64>() < comp.probs[1];
                match comp.jump {
                    None => w = if up { root } else { -root },
                    Some(j) => {
                        if up {
                            ev.push((tree.time(i + 1), j as u32));
                        }
                    }
                }
            }
            dw.push(w);
        }
        events.push(ev);
    }
    PathBundle::from_raw(
        tree.skeleton_model(),
        tree.net(),
        dw,
        events,
        RngLineage {
            seed,
            base_points: None,
            windows: Vec::new(),
            skeleton: true,
        },
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, passed: bool, detail: String) -> OracleCheck {
    OracleCheck {
        name: name.into(),
        passed,
        detail,
    }
}

/// The exact self-test battery on one tree.
pub fn validate_tree(tree: &TreeModel) -> Result<Vec<OracleCheck>> {
    let n = tree.n_steps();
    let horizon = tree.spec.horizon;
    let gamma = tree.spec.gamma;
    let mut out = Vec::new();
    let scale = tree.dt * tree.skeleton_model().variance_rate().max(1.0);
    out.push(check(
        "moment matching",
        tree.moment_error <= 1e-14 * scale.max(1.0),
        format!("error {:.3e}", tree.moment_error),
    ));
    let xt = tree.leaf_values(|p| p[n]);
    let e0 = tree.conditional_expectation(&xt, 0)?[0];
    out.push(check(
        "E X_T = gamma T",
        (e0 - gamma * horizon).abs() <= 1e-12 * (1.0 + e0.abs()),
        format!("{e0} vs {}", gamma * horizon),
    ));
    let sq = tree.leaf_values(|p| p[n] * p[n] + p[n / 2].sin());
    let mut tower: f64 = 0.0;
    for j in 0..=n {
        let pj = tree.conditional_expectation(&sq, j)?;
        for i in 0..=j {
            let a = tree.conditional_expectation(&pj, i)?;
            let b = tree.conditional_expectation(&sq, i)?;
            for (x, y) in a.iter().zip(&b) {
                tower = tower.max((x - y).abs() / (1.0 + y.abs()));
            }
        }
    }
    out.push(check("tower property", tower <= 1e-12, format!("max rel error {tower:.3e}")));
    let k = tree.components().len();
    let zero = tree.exact_bsde(&Generator::zero(vec![1.0; k]), &xt)?;
    out.push(check(
        "f = 0: Y0 = E X_T",
        (zero.y0() - e0).abs() <= 1e-12 * (1.0 + e0.abs()),
        format!("{}", zero.y0()),
    ));
    let c = 0.7;
    let shifted = tree.exact_bsde(&Generator::constant(c, vec![1.0; k]), &sq)?;
    let mut shift_err: f64 = 0.0;
    for i in 0..=n {
        let e = tree.conditional_expectation(&sq, i)?;
        for (y, v) in shifted.y[i].iter().zip(&e) {
            shift_err = shift_err.max((y - v - c * (horizon - tree.time(i))).abs());
        }
    }
    out.push(check("f = c: shift", shift_err <= 1e-12, format!("max error {shift_err:.3e}")));
    let chaos = tree.chaos_project(&sq, n * k)?;
    out.push(check(
        "Parseval",
        chaos.parseval_gap() <= 1e-10 * (1.0 + chaos.variance),
        format!("variance {:.6e}, gap {:.3e}", chaos.variance, chaos.parseval_gap()),
    ));
    let lin = tree.chaos_project(&xt, n * k)?;
    let level1_ok = lin.kernel.entries(1).all(|(_, c)| (c - 1.0).abs() <= 1e-12)
        && lin.kernel.entries(1).count() == n * k
        && (2..=n * k).all(|l| lin.kernel.entries(l).count() == 0 || lin.kernel.entries(l).all(|(_, c)| c.abs() <= 1e-12));
    out.push(check("X_T has unit level-1 kernel", level1_ok, format!("{} level-1 entries", lin.kernel.entries(1).count())));
    let mut support = true;
    let mut cuboid = true;
    for i in 0..=n {
        let f = tree.structure_flags(&zero.y[i], 1e-10)?;
        support &= f.support_ok;
        cuboid &= f.cuboid_ok;
    }
    out.push(check("structure flags for f = 0", support && cuboid, format!("support {support}, cuboid {cuboid}")));
    let comm = tree.commutation_check(&sq)?;
    out.push(check(
        "commutation",
        comm.max_error <= 1e-10 && comm.zero_violations == 0,
        format!("{} checks, max error {:.3e}", comm.checks, comm.max_error),
    ));
    Ok(out)
}
