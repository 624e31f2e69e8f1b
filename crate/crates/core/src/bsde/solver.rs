//! Backward least-squares Monte Carlo scheme and Picard iteration.
//!
//! On the net `t_0 < … < t_n` the implicit scheme reads
//! `Y_i = Ê_i[Y_{i+1}] + Δ_i f(t_i, X_i, Y_i, Z̄_i)` with
//! `Z̄_i = Ê_i[(Y_{i+1} − Ê_i Y_{i+1}) I₁(1_{]t_i,t_{i+1}]} κ′)] / Δ_i`,
//! where `Ê_i` is regression on the state at `t_i`. Subtracting the fitted
//! conditional mean does not change the target's conditional expectation
//! (the increment is centered given `F_{t_i}`) but removes most of its variance.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::generator::Generator;
use super::regression::Regressor;
use super::terminal::{Functional, TerminalCondition};
use crate::error::{Error, Result};
use crate::levy::{PathBundle, TimeNet};
use crate::stats::{par_sum, par_sum_vec, Estimate};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub degree: usize,
    pub fixed_point_max_iter: usize,
    pub fixed_point_tol: f64,
    pub z_per_atom: bool,
    pub proxy_feature: bool,
    pub lipschitz_pairs: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            degree: 3,
            fixed_point_max_iter: 50,
            fixed_point_tol: 1e-12,
            z_per_atom: false,
            proxy_feature: true,
            lipschitz_pairs: 10_000,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub basis_size: usize,
    pub degree: usize,
    pub condition: f64,
    pub fixed_point_iterations: usize,
    pub fixed_point_residual: f64,
}

#[derive(Debug, Clone)]
pub struct BsdeSolution {
    net: TimeNet,
    n_paths: usize,
    /// `Y` per net point, time-major.
    pub y: Vec<Vec<f64>>,
    /// `Z̄` per net interval, time-major.
    pub z_bar: Vec<Vec<f64>>,
    /// `Z` per interval, path-major within each interval (`n_paths × n_atoms`).
    pub z_atoms: Option<Vec<Vec<f64>>>,
    /// With `z_atoms`: per interval the `na × na` covariance (row-major) of
    /// the regression error of the fitted per-atom `Z`, averaged over paths,
    /// from the heteroskedasticity-consistent sandwich `Σ_p lev_p e_{a,p} e_{b,p} / N`.
    pub z_noise: Option<Vec<Vec<f64>>>,
    pub y0: Estimate,
    pub zbar0: Estimate,
    /// Standard error of the sample mean of each step's `Z̄` regression target.
    pub zbar_se: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// `X` at every net point, time-major.
pub fn x_columns(bundle: &PathBundle) -> Vec<Vec<f64>> {
    let width = bundle.net().points().len();
    let x = bundle.x_matrix();
    (0..width)
        .into_par_iter()
        .map(|i| (0..bundle.n_paths()).map(|p| x[p * width + i]).collect())
        .collect()
}

/// Regression state at each net point: `X_{t_i}`, the past values `X_{s_j}`
/// the terminal condition reads, and optionally the terminal functional with
/// its future arguments frozen at `X_{t_i}`.
pub struct StateBuilder {
    pub x: Vec<Vec<f64>>,
    state_idx: Vec<usize>,
    functional: Option<(Functional, Vec<usize>)>,
    degree: usize,
}

impl StateBuilder {
    pub fn new(bundle: &PathBundle, terminal: &TerminalCondition, config: &SolverConfig) -> Result<Self> {
        let net = bundle.net();
        let mut state_idx: Vec<usize> = Vec::new();
        for s in terminal.state_times() {
            let i = net
                .index_of(s)
                .ok_or_else(|| Error::Mismatch(format!("terminal time {s} is not a net point")))?;
            state_idx.push(i);
        }
        let functional = match terminal {
            TerminalCondition::Functional(f) if f.uses_proxy() && config.proxy_feature => {
                Some((f.clone(), f.indices(net)?))
            }
            _ => None,
        };
        Ok(Self {
            x: x_columns(bundle),
            state_idx,
            functional,
            degree: config.degree,
        })
    }

    pub fn regressor(&self, i: usize) -> Result<Regressor> {
        let mut poly: Vec<&[f64]> = vec![&self.x[i]];
        for &j in &self.state_idx {
            if j < i {
                poly.push(&self.x[j]);
            }
        }
        let proxy: Option<Vec<f64>> = self.functional.as_ref().map(|(f, idx)| {
            let n = self.x[i].len();
            (0..n)
                .into_par_iter()
                .map(|p| {
                    let vals: Vec<f64> = idx
                        .iter()
                        .map(|&j| if j <= i { self.x[j][p] } else { self.x[i][p] })
                        .collect();
                    f.eval(&vals)
                })
                .collect()
        });
        let linear: Vec<&[f64]> = proxy.iter().map(|v| v.as_slice()).collect();
        Regressor::fit(&poly, &linear, self.degree, i)
    }
}

/// `I₁(1_{]t_i,t_{i+1}]} κ′)` per path.
fn kappa_increment(noise: &[f64], kappa: &[f64], n_paths: usize) -> Vec<f64> {
    let na = kappa.len();
    (0..n_paths)
        .map(|p| (0..na).map(|a| kappa[a] * noise[p * na + a]).sum())
        .collect()
}

/// `η·I₁(1_{]s,a]}κ′)/(a−s)` per path, the quantity whose conditional mean
/// given `F_s` is `∫ 𝔼_s 𝒟_{s,x}η κ′(x) μ(dx)`.
pub fn zbar_estimator(bundle: &PathBundle, eta: &[f64], s: f64, a: f64, kappa: &[f64]) -> Result<Vec<f64>> {
    if a <= s {
        return Err(Error::InvalidInterval {
            s,
            t: a,
            reason: "need s < a".into(),
        });
    }
    let marks = bundle.mark_measure();
    if kappa.len() != marks.len() {
        return Err(Error::Mismatch("kappa' length differs from the atom count".into()));
    }
    if eta.len() != bundle.n_paths() {
        return Err(Error::Mismatch("eta must have one value per path".into()));
    }
    (0..bundle.n_paths())
        .map(|p| {
            let mut inc = 0.0;
            for (atom, k) in kappa.iter().enumerate() {
                inc += k * bundle.m_increment(p, s, a, atom)?;
            }
            Ok(eta[p] * inc / (a - s))
        })
        .collect()
}

/// Driver of a backward solve: `(step, path, y, z̄) ↦ f`.
pub(crate) trait Driver: Sync {
    fn eval(&self, i: usize, p: usize, y: f64, z: f64) -> f64;
}

impl<F: Fn(usize, usize, f64, f64) -> f64 + Sync> Driver for F {
    fn eval(&self, i: usize, p: usize, y: f64, z: f64) -> f64 {
        self(i, p, y, z)
    }
}

/// The backward engine shared by the solver and the linearized derivative
/// equation. Steps `i < first` are set to zero.
pub(crate) fn backward<D: Driver>(
    bundle: &PathBundle,
    state: &StateBuilder,
    terminal: Vec<f64>,
    driver: &D,
    lipschitz: f64,
    kappa: &[f64],
    config: &SolverConfig,
    first: usize,
) -> Result<BsdeSolution> {
    let net = bundle.net();
    let n = net.n_intervals();
    let np = bundle.n_paths();
    let marks = bundle.mark_measure();
    let na = marks.len();
    if terminal.len() != np {
        return Err(Error::Mismatch("terminal values must have one entry per path".into()));
    }
    for i in 0..n {
        let product = net.dt(i) * lipschitz;
        if product >= 1.0 {
            return Err(Error::StepTooCoarse { step: i, product });
        }
    }
    let mut y = vec![Vec::new(); n + 1];
    let mut z_bar = vec![Vec::new(); n];
    let mut z_atoms = config.z_per_atom.then(|| vec![Vec::new(); n]);
    let mut z_noise = config.z_per_atom.then(|| vec![vec![0.0; na * na]; n]);
    let mut diagnostics = Vec::with_capacity(n);
    let mut driver_sum = vec![0.0; np];
    let mut zbar_se = vec![0.0; n];
    y[n] = terminal.clone();
    for i in (0..n).rev() {
        if i < first {
            y[i] = vec![0.0; np];
            z_bar[i] = vec![0.0; np];
            if let Some(z) = z_atoms.as_mut() {
                z[i] = vec![0.0; np * na];
            }
            continue;
        }
        let dt = net.dt(i);
        let reg = state.regressor(i)?;
        let next = &y[i + 1];
        let yhat = reg.project(next);
        let noise = bundle.interval_noise(i);
        let inc = kappa_increment(&noise, kappa, np);
        let target: Vec<f64> = (0..np).map(|p| (next[p] - yhat[p]) * inc[p] / dt).collect();
        let zb = reg.project(&target);
        zbar_se[i] = Estimate::from_slice(&target).se;
        if let Some(z) = z_atoms.as_mut() {
            let mut zi = vec![0.0; np * na];
            let mut resid = vec![0.0; np * na];
            for a in 0..na {
                let m = marks.mass(a);
                let ta: Vec<f64> = (0..np).map(|p| (next[p] - yhat[p]) * noise[p * na + a] / (dt * m)).collect();
                for (p, v) in reg.project(&ta).into_iter().enumerate() {
                    zi[p * na + a] = v;
                    resid[p * na + a] = ta[p] - v;
                }
            }
            let lev = reg.leverages();
            let cov = par_sum_vec(np, na * na, |p, acc| {
                for a in 0..na {
                    for b in 0..na {
                        acc[a * na + b] += lev[p] * resid[p * na + a] * resid[p * na + b];
                    }
                }
            });
            if let Some(noise) = z_noise.as_mut() {
                noise[i] = cov.into_iter().map(|v| v / np as f64).collect();
            }
            z[i] = zi;
        }
        let solved: Vec<(f64, usize, f64)> = (0..np)
            .into_par_iter()
            .map(|p| {
                let mut cur = yhat[p];
                let mut resid = 0.0;
                for it in 1..=config.fixed_point_max_iter {
                    let nxt = yhat[p] + dt * driver.eval(i, p, cur, zb[p]);
                    resid = (nxt - cur).abs();
                    cur = nxt;
                    if resid <= config.fixed_point_tol * (1.0 + cur.abs()) {
                        return (cur, it, resid);
                    }
                }
                (cur, usize::MAX, resid)
            })
            .collect();
        let mut iters = 0;
        let mut worst = 0.0f64;
        let mut yi = Vec::with_capacity(np);
        for (v, it, r) in solved {
            if it == usize::MAX {
                return Err(Error::NoConvergence { step: i, residual: r });
            }
            iters = iters.max(it);
            worst = worst.max(r);
            yi.push(v);
        }
        for p in 0..np {
            driver_sum[p] += dt * driver.eval(i, p, yi[p], zb[p]);
        }
        diagnostics.push(StepDiagnostics {
            step: i,
            basis_size: reg.basis_size(),
            degree: reg.degree(),
            condition: reg.condition(),
            fixed_point_iterations: iters,
            fixed_point_residual: worst,
        });
        y[i] = yi;
        z_bar[i] = zb;
    }
    diagnostics.reverse();
    let y0_mean = par_sum(np, |p| y[0][p]) / np as f64;
    let spread = Estimate::from_fn(np, |p| terminal[p] + driver_sum[p]);
    let zbar0 = Estimate {
        mean: par_sum(np, |p| z_bar[0][p]) / np as f64,
        se: zbar_se.first().copied().unwrap_or(0.0),
    };
    Ok(BsdeSolution {
        net: net.clone(),
        n_paths: np,
        y,
        z_bar,
        z_atoms,
        z_noise,
        y0: Estimate {
            mean: y0_mean,
            se: spread.se,
        },
        zbar0,
        zbar_se,
        diagnostics,
    })
}

/// Solves `Y_t = ξ + ∫_t^T f(s, X_s, Y_s, Z̄_s) ds − ∫ Z dM` on the bundle's net.
pub fn solve_backward(
    gen: &Generator,
    terminal: &TerminalCondition,
    bundle: &PathBundle,
    config: &SolverConfig,
) -> Result<BsdeSolution> {
    let marks = bundle.mark_measure();
    gen.validate(&marks, bundle.net().horizon(), config.lipschitz_pairs)?;
    let state = StateBuilder::new(bundle, terminal, config)?;
    let xi = terminal.evaluate(bundle)?;
    let net = bundle.net();
    let driver = |i: usize, p: usize, y: f64, z: f64| gen.eval(net.point(i), state.x[i][p], y, z);
    backward(bundle, &state, xi, &driver, gen.lipschitz(), gen.kappa_prime(), config, 0)
}

/// Picard iterates `(Y^k, Z̄^k)`, `k = 1..=iterations`, started from `(0, 0)`:
/// `Y^{k+1}_{t_i} = Ê_i[ξ + Σ_{j≥i} Δ_j f(t_j, X_j, Y^k_j, Z̄^k_j)]`.
pub fn picard_solve(
    gen: &Generator,
    terminal: &TerminalCondition,
    bundle: &PathBundle,
    config: &SolverConfig,
    iterations: usize,
) -> Result<Vec<BsdeSolution>> {
    if iterations == 0 {
        return Err(Error::OutOfRange("need at least one Picard iteration".into()));
    }
    let marks = bundle.mark_measure();
    gen.validate(&marks, bundle.net().horizon(), config.lipschitz_pairs)?;
    let net = bundle.net();
    let n = net.n_intervals();
    let np = bundle.n_paths();
    let state = StateBuilder::new(bundle, terminal, config)?;
    let xi = terminal.evaluate(bundle)?;
    let regs: Vec<Regressor> = (0..n).map(|i| state.regressor(i)).collect::<Result<_>>()?;
    let incs: Vec<Vec<f64>> = (0..n)
        .map(|i| kappa_increment(&bundle.interval_noise(i), gen.kappa_prime(), np))
        .collect();
    let mut prev_y = vec![vec![0.0; np]; n + 1];
    let mut prev_z = vec![vec![0.0; np]; n];
    let mut out = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let f: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..np)
                    .map(|p| gen.eval(net.point(i), state.x[i][p], prev_y[i][p], prev_z[i][p]))
                    .collect()
            })
            .collect();
        let mut g = xi.clone();
        let mut y = vec![Vec::new(); n + 1];
        let mut z_bar = vec![Vec::new(); n];
        let mut diagnostics = Vec::with_capacity(n);
        y[n] = xi.clone();
        let mut zbar_se = vec![0.0; n];
        for i in (0..n).rev() {
            let dt = net.dt(i);
            let ghat = regs[i].project(&g);
            let target: Vec<f64> = (0..np).map(|p| (g[p] - ghat[p]) * incs[i][p] / dt).collect();
            z_bar[i] = regs[i].project(&target);
            zbar_se[i] = Estimate::from_slice(&target).se;
            for p in 0..np {
                g[p] += dt * f[i][p];
            }
            y[i] = (0..np).map(|p| ghat[p] + dt * f[i][p]).collect();
            diagnostics.push(StepDiagnostics {
                step: i,
                basis_size: regs[i].basis_size(),
                degree: regs[i].degree(),
                condition: regs[i].condition(),
                fixed_point_iterations: 0,
                fixed_point_residual: 0.0,
            });
        }
        diagnostics.reverse();
        let sol = BsdeSolution {
            net: net.clone(),
            n_paths: np,
            y0: Estimate {
                mean: par_sum(np, |p| y[0][p]) / np as f64,
                se: Estimate::from_slice(&g).se,
            },
            zbar0: Estimate {
                mean: par_sum(np, |p| z_bar[0][p]) / np as f64,
                se: zbar_se[0],
            },
            zbar_se,
            y,
            z_bar,
            z_atoms: None,
            z_noise: None,
            diagnostics,
        };
        prev_y = sol.y.clone();
        prev_z = sol.z_bar.clone();
        out.push(sol);
    }
    Ok(out)
}

impl BsdeSolution {
    pub fn net(&self) -> &TimeNet {
        &self.net
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    /// `‖Y‖²_S = 𝔼 sup_i |Y_{t_i}|²` on the net.
    pub fn s_norm_sq(&self) -> f64 {
        let np = self.n_paths;
        par_sum(np, |p| self.y.iter().map(|c| c[p] * c[p]).fold(0.0, f64::max)) / np as f64
    }

    /// `‖Z‖²_H = Σ_i Δ_i 𝔼 Σ_a mass_a Z_a²`; needs per-atom `Z`.
    pub fn h_norm_sq(&self, masses: &[f64]) -> Option<f64> {
        let z = self.z_atoms.as_ref()?;
        let na = masses.len();
        let np = self.n_paths;
        Some(
            z.iter()
                .enumerate()
                .map(|(i, zi)| {
                    self.net.dt(i)
                        * par_sum(np, |p| (0..na).map(|a| masses[a] * zi[p * na + a].powi(2)).sum::<f64>())
                        / np as f64
                })
                .sum(),
        )
    }

    /// `Σ_i Δ_i 𝔼|Z̄_{t_i}|²`.
    pub fn zbar_norm_sq(&self) -> f64 {
        let np = self.n_paths;
        self.z_bar
            .iter()
            .enumerate()
            .map(|(i, z)| self.net.dt(i) * par_sum(np, |p| z[p] * z[p]) / np as f64)
            .sum()
    }

    /// Per-step sample mean of `Y` and `Z̄` with standard errors.
    pub fn time_profile(&self) -> Vec<(f64, Estimate, Option<Estimate>)> {
        (0..self.y.len())
            .map(|i| {
                let z = self.z_bar.get(i).map(|z| Estimate::from_slice(z));
                (self.net.point(i), Estimate::from_slice(&self.y[i]), z)
            })
            .collect()
    }

    /// `path,time,Y,Zbar` rows for the first `max_paths` paths.
    pub fn write_csv<W: Write>(&self, mut out: W, max_paths: usize) -> Result<()> {
        writeln!(out, "path,time,Y,Zbar")?;
        for p in 0..self.n_paths.min(max_paths) {
            for i in 0..self.y.len() {
                let z = self.z_bar.get(i).map(|z| format!("{:e}", z[p])).unwrap_or_default();
                writeln!(out, "{p},{:e},{:e},{z}", self.net.point(i), self.y[i][p])?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StabilityGap {
    /// `𝔼 sup|Y−Y′|² + Σ Δ 𝔼|Z̄−Z̄′|²`.
    pub lhs: f64,
    /// `𝔼|ξ−ξ′|²`.
    pub xi_term: f64,
    /// `Σ Δ 𝔼|f(t,X,Y,Z̄) − f′(t,X,Y,Z̄)|²` along the first solution.
    pub generator_term: f64,
    /// `lhs / (xi_term + generator_term)`, when the denominator is positive.
    pub ratio: Option<f64>,
}

pub fn stability_gap(
    sol: &BsdeSolution,
    sol2: &BsdeSolution,
    gen: &Generator,
    gen2: &Generator,
    bundle: &PathBundle,
) -> Result<StabilityGap> {
    if sol.net != sol2.net || sol.n_paths != sol2.n_paths || bundle.net() != &sol.net {
        return Err(Error::Mismatch("solutions live on different nets or bundles".into()));
    }
    let np = sol.n_paths;
    let n = sol.net.n_intervals();
    let sup = par_sum(np, |p| {
        sol.y
            .iter()
            .zip(&sol2.y)
            .map(|(a, b)| (a[p] - b[p]).powi(2))
            .fold(0.0, f64::max)
    }) / np as f64;
    let mut z = 0.0;
    let mut gterm = 0.0;
    let x = x_columns(bundle);
    for i in 0..n {
        let dt = sol.net.dt(i);
        let t = sol.net.point(i);
        z += dt * par_sum(np, |p| (sol.z_bar[i][p] - sol2.z_bar[i][p]).powi(2)) / np as f64;
        gterm += dt
            * par_sum(np, |p| {
                let (y, zb) = (sol.y[i][p], sol.z_bar[i][p]);
                (gen.eval(t, x[i][p], y, zb) - gen2.eval(t, x[i][p], y, zb)).powi(2)
            })
            / np as f64;
    }
    let xi_term = par_sum(np, |p| (sol.y[n][p] - sol2.y[n][p]).powi(2)) / np as f64;
    let lhs = sup + z;
    let denom = xi_term + gterm;
    Ok(StabilityGap {
        lhs,
        xi_term,
        generator_term: gterm,
        ratio: (denom > 0.0).then(|| lhs / denom),
    })
}
