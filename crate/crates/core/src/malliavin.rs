//! Malliavin derivatives of path functionals, the linearized derivative
//! BSDE `(U, V)` and the Clark–Ocone reconstruction.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::solver::{backward, x_columns, StateBuilder};
use crate::bsde::{BsdeSolution, Functional, Generator, Regressor, SolverConfig, TerminalCondition};
use crate::error::{Error, Result};
use crate::levy::{MarkSource, PathBundle};
use crate::stats::Estimate;

/// Direction `(r, v)` of a derivative; `v = 0` is the Brownian direction,
/// differentiated by central differences with step `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerturbationSpec {
    pub r: f64,
    pub v: f64,
    pub h: f64,
}

impl PerturbationSpec {
    pub fn jump(r: f64, v: f64) -> Self {
        Self { r, v, h: 0.0 }
    }

    pub fn brownian(r: f64, h: f64) -> Self {
        Self { r, v: 0.0, h }
    }

    fn check(&self, bundle: &PathBundle) -> Result<()> {
        let horizon = bundle.net().horizon();
        if !(0.0..=horizon).contains(&self.r) {
            return Err(Error::OutOfRange(format!("r = {} outside [0, {horizon}]", self.r)));
        }
        if self.v == 0.0 {
            if !(self.h > 0.0) {
                return Err(Error::OutOfRange("the Brownian direction needs h > 0".into()));
            }
            if bundle.model().sigma() == 0.0 {
                return Err(Error::InvalidMark("sigma = 0: there is no Brownian direction".into()));
            }
        } else if !bundle.model().jump_atoms().iter().any(|a| a.size == self.v) {
            return Err(Error::InvalidMark(format!("v = {} is not a jump size of the model", self.v)));
        }
        Ok(())
    }
}

/// Values of `phi` on every path, with `shift` added to the arguments at
/// times `≥ r`.
fn shifted_values(phi: &Functional, bundle: &PathBundle, x: &[Vec<f64>], r: f64, shift: f64) -> Result<Vec<f64>> {
    let idx = phi.indices(bundle.net())?;
    let bump: Vec<f64> = phi.times().iter().map(|&s| if s >= r { shift } else { 0.0 }).collect();
    Ok((0..bundle.n_paths())
        .into_par_iter()
        .map(|p| {
            let vals: Vec<f64> = idx.iter().zip(&bump).map(|(&i, b)| x[i][p] + b).collect();
            phi.eval(&vals)
        })
        .collect())
}

/// `(Φ(X + v 1_{[r,T]}) − Φ(X)) / v` per path.
pub fn difference_quotient(phi: &Functional, bundle: &PathBundle, spec: &PerturbationSpec) -> Result<Vec<f64>> {
    if spec.v == 0.0 {
        return Err(Error::InvalidMark(
            "v = 0 is the Brownian direction; use brownian_direction_derivative".into(),
        ));
    }
    spec.check(bundle)?;
    let x = x_columns(bundle);
    quotient_with(phi, bundle, &x, spec)
}

fn quotient_with(phi: &Functional, bundle: &PathBundle, x: &[Vec<f64>], spec: &PerturbationSpec) -> Result<Vec<f64>> {
    if spec.v == 0.0 {
        let up = shifted_values(phi, bundle, x, spec.r, spec.h)?;
        let down = shifted_values(phi, bundle, x, spec.r, -spec.h)?;
        return Ok(up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * spec.h)).collect());
    }
    let base = shifted_values(phi, bundle, x, spec.r, 0.0)?;
    let moved = shifted_values(phi, bundle, x, spec.r, spec.v)?;
    Ok(moved.iter().zip(&base).map(|(m, b)| (m - b) / spec.v).collect())
}

/// `(Φ(X + h 1_{[r,T]}) − Φ(X − h 1_{[r,T]})) / 2h` per path.
pub fn brownian_direction_derivative(phi: &Functional, bundle: &PathBundle, spec: &PerturbationSpec) -> Result<Vec<f64>> {
    if spec.v != 0.0 {
        return Err(Error::InvalidMark("the Brownian direction has v = 0".into()));
    }
    spec.check(bundle)?;
    let x = x_columns(bundle);
    quotient_with(phi, bundle, &x, spec)
}

/// `𝒟_{r,v}ξ` per path for either form of terminal condition.
pub fn terminal_derivative(terminal: &TerminalCondition, bundle: &PathBundle, spec: &PerturbationSpec) -> Result<Vec<f64>> {
    spec.check(bundle)?;
    match terminal {
        TerminalCondition::Functional(phi) => quotient_with(phi, bundle, &x_columns(bundle), spec),
        TerminalCondition::Kernel(k) => {
            let marks = bundle.mark_measure();
            let atom = marks.index_of(spec.v)?;
            Ok(k.malliavin_kernel_at(spec.r, atom)?.evaluate_paths(bundle)?.values)
        }
    }
}

/// Solves the derivative equation in direction `(r, v)` along the base
/// solution `(Y, Z̄)`. `U` and `V̄` vanish on net points before `r`.
pub fn solve_uv(
    gen: &Generator,
    terminal: &TerminalCondition,
    bundle: &PathBundle,
    base: Option<&BsdeSolution>,
    spec: &PerturbationSpec,
    config: &SolverConfig,
) -> Result<BsdeSolution> {
    let base = base.ok_or_else(|| Error::Missing("solve_uv needs the base solution".into()))?;
    if base.net() != bundle.net() || base.n_paths() != bundle.n_paths() {
        return Err(Error::Mismatch("base solution was computed on a different bundle".into()));
    }
    let marks = bundle.mark_measure();
    gen.validate(&marks, bundle.net().horizon(), config.lipschitz_pairs)?;
    let xi = terminal_derivative(terminal, bundle, spec)?;
    let net = bundle.net();
    let first = net.points().partition_point(|&t| t < spec.r);
    let state = StateBuilder::new(bundle, terminal, config)?;
    let v = spec.v;
    let r = spec.r;
    let (ys, zs) = (&base.y, &base.z_bar);
    let driver = |i: usize, p: usize, u: f64, w: f64| {
        let t = net.point(i);
        let x = state.x[i][p];
        let on = if t >= r { 1.0 } else { 0.0 };
        let (y, z) = (ys[i][p], zs[i][p]);
        if v == 0.0 {
            let g = gen.gradient(t, x, y, z);
            g[0] * on + g[1] * u + g[2] * w
        } else {
            (gen.eval(t, x + v * on, y + v * u, z + v * w) - gen.eval(t, x, y, z)) / v
        }
    };
    backward(bundle, &state, xi, &driver, gen.lipschitz(), gen.kappa_prime(), config, first)
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagonalEntry {
    pub r: f64,
    pub v: f64,
    pub atom: usize,
    /// Net interval `]r, t_next]` the entry stands for.
    pub interval: usize,
    pub estimate: Estimate,
}

/// `Z_{r,v}` read off the derivative solutions at the first net point after
/// `r`. Every direction must come with its solution.
#[derive(Debug, Clone)]
pub struct ZDiagonal {
    pub entries: Vec<DiagonalEntry>,
    values: Vec<Vec<f64>>,
}

pub fn z_from_diagonal(uv: &[(PerturbationSpec, BsdeSolution)], bundle: &PathBundle) -> Result<ZDiagonal> {
    let marks = bundle.mark_measure();
    let net = bundle.net();
    let mut entries = Vec::new();
    let mut values = Vec::new();
    for (spec, sol) in uv {
        let i = net
            .index_of(spec.r)
            .ok_or_else(|| Error::Missing(format!("direction r = {} is not a net point", spec.r)))?;
        if i >= net.n_intervals() {
            return Err(Error::OutOfRange("r = T has no following net point".into()));
        }
        let atom = marks.index_of(spec.v)?;
        let u = sol.y[i + 1].clone();
        entries.push(DiagonalEntry {
            r: spec.r,
            v: spec.v,
            atom,
            interval: i,
            estimate: Estimate::from_slice(&u),
        });
        values.push(u);
    }
    Ok(ZDiagonal { entries, values })
}

impl ZDiagonal {
    /// `Σ_a κ′_a μ_a Z_{r,a}` per path for the interval starting at `r`;
    /// every atom must be present.
    pub fn kappa_integrated(&self, interval: usize, kappa: &[f64], bundle: &PathBundle) -> Result<Vec<f64>> {
        let marks = bundle.mark_measure();
        let mut out = vec![0.0; bundle.n_paths()];
        for a in 0..marks.len() {
            let pos = self
                .entries
                .iter()
                .position(|e| e.interval == interval && e.atom == a)
                .ok_or_else(|| Error::Missing(format!("no derivative solution for interval {interval}, atom {a}")))?;
            let w = kappa[a] * marks.mass(a);
            for (o, u) in out.iter_mut().zip(&self.values[pos]) {
                *o += w * u;
            }
        }
        Ok(out)
    }

    /// `r,v,time,mean_U,se` rows.
    pub fn write_csv<W: Write>(&self, mut out: W, bundle: &PathBundle) -> Result<()> {
        writeln!(out, "r,v,time,mean_U,se")?;
        for e in &self.entries {
            let t = bundle.net().point(e.interval + 1);
            writeln!(out, "{:e},{:e},{:e},{:e},{:e}", e.r, e.v, t, e.estimate.mean, e.estimate.se)?;
        }
        Ok(())
    }
}

/// Every direction the diagonal needs on interval `i`: `r = t_i` and each atom.
pub fn diagonal_directions(bundle: &PathBundle, i: usize, h: f64) -> Vec<PerturbationSpec> {
    let marks = bundle.mark_measure();
    let r = bundle.net().point(i);
    (0..marks.len())
        .map(|a| match marks.source(a) {
            MarkSource::Brownian => PerturbationSpec::brownian(r, h),
            MarkSource::Jump(_) => PerturbationSpec::jump(r, marks.mark(a)),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ClarkOconeReport {
    pub n_intervals: usize,
    /// Mean of `G − 𝔼G − Σ ^p(𝒟G)·M` with its standard error.
    pub residual: Estimate,
    /// `‖G − 𝔼G − Σ ^p(𝒟G)·M‖_{L₂}` with the sample mean as `𝔼G`.
    pub l2_residual: f64,
}

/// Rebuilds `Φ` from its mean and the regression estimate of the predictable
/// projection of `𝒟Φ` on each net interval, and reports the residual.
pub fn clark_ocone_check(phi: &Functional, bundle: &PathBundle, config: &SolverConfig, h: f64) -> Result<ClarkOconeReport> {
    let net = bundle.net();
    let np = bundle.n_paths();
    let marks = bundle.mark_measure();
    let na = marks.len();
    let x = x_columns(bundle);
    let g = shifted_values(phi, bundle, &x, 0.0, 0.0)?;
    let terminal = TerminalCondition::Functional(phi.clone());
    let state = StateBuilder::new(bundle, &terminal, config)?;
    let mut integral = vec![0.0; np];
    for i in 0..net.n_intervals() {
        // a perturbation inside ]t_i, t_{i+1}] moves the net values from t_{i+1} on
        let r = net.point(i + 1);
        let reg: Regressor = state.regressor(i)?;
        let noise = bundle.interval_noise(i);
        for a in 0..na {
            let spec = match marks.source(a) {
                MarkSource::Brownian => PerturbationSpec::brownian(r, h),
                MarkSource::Jump(_) => PerturbationSpec::jump(r, marks.mark(a)),
            };
            let d = quotient_with(phi, bundle, &x, &spec)?;
            let proj = reg.project(&d);
            for p in 0..np {
                integral[p] += proj[p] * noise[p * na + a];
            }
        }
    }
    let mean_g = Estimate::from_slice(&g);
    let rest = Estimate::from_fn(np, |p| g[p] - integral[p]);
    let l2 = (Estimate::from_fn(np, |p| (g[p] - mean_g.mean - integral[p]).powi(2)).mean).sqrt();
    Ok(ClarkOconeReport {
        n_intervals: net.n_intervals(),
        residual: Estimate {
            mean: rest.mean - mean_g.mean,
            se: (rest.se * rest.se + mean_g.se * mean_g.se).sqrt(),
        },
        l2_residual: l2,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::bsde::solve_backward;
    use crate::levy::{simulate, LevyModel, TimeNet};
    use crate::stats::diff_within;

    fn bundle(n: usize, paths: usize) -> PathBundle {
        let model = LevyModel::with_atoms(0.1, 0.4, &[(0.5, 1.0), (-0.3, 2.0)], 1.0).unwrap();
        simulate(&model, &TimeNet::equidistant(1.0, n, 4).unwrap(), paths, 5).unwrap()
    }

    fn functional(name: &str, g: fn(f64) -> f64) -> Functional {
        Functional::new(name, vec![1.0], Arc::new(move |x| g(x[0])), false).unwrap()
    }

    #[test]
    fn quotient_of_terminal_value_is_one() {
        let b = bundle(8, 500);
        let phi = functional("x", |x| x);
        let x = x_columns(&b);
        let scale = x[8].iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (r, v) in [(0.0, 0.5), (0.4, -0.3), (1.0, 0.5)] {
            let d = difference_quotient(&phi, &b, &PerturbationSpec::jump(r, v)).unwrap();
            for q in d {
                assert!((q - 1.0).abs() <= 8.0 * f64::EPSILON * scale / v.abs(), "{q}");
            }
        }
    }

    #[test]
    fn quotient_of_square() {
        let b = bundle(8, 200);
        let phi = functional("x2", |x| x * x);
        let x = x_columns(&b);
        let d = difference_quotient(&phi, &b, &PerturbationSpec::jump(0.3, 0.5)).unwrap();
        for p in 0..200 {
            assert!((d[p] - (2.0 * x[8][p] + 0.5)).abs() < 1e-12 * (1.0 + x[8][p].abs()));
        }
        let g = brownian_direction_derivative(&phi, &b, &PerturbationSpec::brownian(0.3, 1e-3)).unwrap();
        for p in 0..200 {
            assert!((g[p] - 2.0 * x[8][p]).abs() < 1e-9 * (1.0 + x[8][p].abs()));
        }
        let s = brownian_direction_derivative(&functional("sin", f64::sin), &b, &PerturbationSpec::brownian(0.3, 1e-4)).unwrap();
        for p in 0..200 {
            assert!((s[p] - x[8][p].cos()).abs() < 1e-7);
        }
    }

    #[test]
    fn rejects_bad_directions() {
        let b = bundle(4, 10);
        let phi = functional("x", |x| x);
        assert!(difference_quotient(&phi, &b, &PerturbationSpec::jump(0.2, 0.0)).is_err());
        assert!(difference_quotient(&phi, &b, &PerturbationSpec::jump(0.2, 0.7)).is_err());
        assert!(brownian_direction_derivative(&phi, &b, &PerturbationSpec::brownian(0.2, 0.0)).is_err());
        let pure = LevyModel::with_atoms(0.0, 0.0, &[(1.0, 1.0)], 1.0).unwrap();
        let bj = simulate(&pure, &TimeNet::equidistant(1.0, 4, 1).unwrap(), 10, 1).unwrap();
        assert!(brownian_direction_derivative(&phi, &bj, &PerturbationSpec::brownian(0.2, 1e-3)).is_err());
    }

    #[test]
    fn uv_for_decaying_generator() {
        let b = bundle(16, 4_000);
        let gen = Generator::linear(-1.0, 0.0, vec![1.0; 3]);
        let term = TerminalCondition::x_terminal(1.0);
        let cfg = SolverConfig::default();
        let base = solve_backward(&gen, &term, &b, &cfg).unwrap();
        let spec = PerturbationSpec::jump(0.5, 0.5);
        let uv = solve_uv(&gen, &term, &b, Some(&base), &spec, &cfg).unwrap();
        for i in 0..8 {
            assert!(uv.y[i].iter().all(|&u| u == 0.0));
        }
        // implicit Euler for U' = U: U_i = U_{i+1} / (1 + Δ)
        for i in 8..=16 {
            let exact = (1.0f64 + 1.0 / 16.0).powi(-(16 - i as i32));
            let est = Estimate::from_slice(&uv.y[i]);
            assert!((est.mean - exact).abs() < 1e-9, "{i}: {est:?} vs {exact}");
        }
        assert!(solve_uv(&gen, &term, &b, None, &spec, &cfg).is_err());
    }

    #[test]
    fn diagonal_matches_regression_zbar() {
        let b = bundle(8, 20_000);
        let kappa = vec![1.0, 0.5, 2.0];
        let gen = Generator::linear(0.3, 0.5, kappa.clone());
        let term = TerminalCondition::x_terminal(1.0);
        let cfg = SolverConfig::default();
        let base = solve_backward(&gen, &term, &b, &cfg).unwrap();
        let mut uv = Vec::new();
        for i in [0, 4] {
            for spec in diagonal_directions(&b, i, 1e-3) {
                uv.push((spec, solve_uv(&gen, &term, &b, Some(&base), &spec, &cfg).unwrap()));
            }
        }
        let diag = z_from_diagonal(&uv, &b).unwrap();
        for i in [0, 4] {
            let z = Estimate::from_slice(&diag.kappa_integrated(i, &kappa, &b).unwrap());
            let reg = Estimate::from_slice(&base.z_bar[i]);
            let reg = Estimate { mean: reg.mean, se: base.zbar_se[i] };
            assert!(diff_within(&z, &reg, 3.0), "{i}: {z:?} vs {reg:?}");
        }
        assert!(diag.kappa_integrated(2, &kappa, &b).is_err());
    }

    #[test]
    fn clark_ocone_for_terminal_value() {
        let b = bundle(8, 10_000);
        let rep = clark_ocone_check(&functional("x", |x| x), &b, &SolverConfig::default(), 1e-4).unwrap();
        assert!(rep.residual.within(0.0, 3.0), "{rep:?}");
        let c = clark_ocone_check(&functional("c", |_| 2.0), &b, &SolverConfig::default(), 1e-4).unwrap();
        assert_eq!(c.l2_residual, 0.0);
    }
}
