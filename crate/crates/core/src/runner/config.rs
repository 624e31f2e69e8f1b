//! Experiment configuration as read from JSON.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bsde::{Functional, Generator, SolverConfig, TerminalCondition};
use crate::chaos::ChaosKernelSet;
use crate::error::{Error, Result};
use crate::levy::{LevyModel, MarkMeasure, TimeNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Solve,
    Regularity,
    Suffcond,
    Rates,
    ChaosChecks,
    Counterexample,
    OracleValidate,
    Malliavin,
}

impl Kind {
    pub const ALL: [Kind; 8] = [
        Kind::Solve,
        Kind::Regularity,
        Kind::Suffcond,
        Kind::Rates,
        Kind::ChaosChecks,
        Kind::Counterexample,
        Kind::OracleValidate,
        Kind::Malliavin,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Kind::Solve => "solve",
            Kind::Regularity => "regularity",
            Kind::Suffcond => "suffcond",
            Kind::Rates => "rates",
            Kind::ChaosChecks => "chaos-checks",
            Kind::Counterexample => "counterexample",
            Kind::OracleValidate => "oracle-validate",
            Kind::Malliavin => "malliavin",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub sigma: f64,
    /// `[size, intensity]` per jump atom.
    #[serde(default)]
    pub jumps: Vec<[f64; 2]>,
    #[serde(default = "one")]
    pub horizon: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            sigma: 0.4,
            jumps: vec![[0.5, 1.0], [-0.3, 2.0]],
            horizon: 1.0,
        }
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<LevyModel> {
        let atoms: Vec<(f64, f64)> = self.jumps.iter().map(|j| (j[0], j[1])).collect();
        LevyModel::with_atoms(self.gamma, self.sigma, &atoms, self.horizon)
    }
}

/// Either `n` equidistant intervals or explicit `points`; `coarse` is the
/// partition `0 = r_0 < … < r_m = T`, every point of which must be a net point.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub points: Option<Vec<f64>>,
    #[serde(default)]
    pub coarse: Option<Vec<f64>>,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self {
            n: Some(16),
            points: None,
            coarse: None,
        }
    }
}

impl NetSpec {
    pub fn build(&self, horizon: f64) -> Result<TimeNet> {
        let points = match (&self.n, &self.points) {
            (Some(_), Some(_)) => return Err(Error::Config("net: give either `n` or `points`, not both".into())),
            (Some(n), None) => {
                if *n == 0 {
                    return Err(Error::Config("net.n must be positive".into()));
                }
                (0..=*n).map(|i| horizon * i as f64 / *n as f64).collect()
            }
            (None, Some(p)) => p.clone(),
            (None, None) => return Err(Error::Config("net: one of `n` or `points` is required".into())),
        };
        let coarse = self.coarse.clone().unwrap_or_else(|| vec![0.0, horizon]);
        TimeNet::new(points, &coarse)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    Zero,
    Constant { c: f64 },
    /// `a·x + b·y + c·z̄ + d`.
    Affine { a: f64, b: f64, c: f64, d: f64 },
    /// `b·y + c·z̄`.
    Linear { b: f64, c: f64 },
    /// `a·sin(y) + b·cos(z̄) + c·x`.
    SineMix { a: f64, b: f64, c: f64 },
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self::Zero
    }
}

impl GeneratorSpec {
    pub fn build(&self, kappa: Vec<f64>) -> Result<Generator> {
        Ok(match *self {
            Self::Zero => Generator::zero(kappa),
            Self::Constant { c } => Generator::constant(c, kappa),
            Self::Affine { a, b, c, d } => Generator::affine(a, b, c, d, kappa),
            Self::Linear { b, c } => Generator::linear(b, c, kappa),
            Self::SineMix { a, b, c } => Generator::new(
                format!("sine_mix({a},{b},{c})"),
                Arc::new(move |_, x, y, z| a * y.sin() + b * z.cos() + c * x),
                a.abs().max(b.abs()).max(c.abs()),
                kappa,
            )?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalSpec {
    XTerminal,
    XSquared,
    Call { strike: f64 },
    Indicator { time: f64, level: f64 },
    /// `min(|X_time|^exponent, cap)`.
    Power { time: f64, exponent: f64, cap: f64 },
    Constant { value: f64 },
    /// A kernel set in its JSON document form.
    Kernel { set: serde_json::Value },
}

impl Default for TerminalSpec {
    fn default() -> Self {
        Self::XTerminal
    }
}

impl TerminalSpec {
    pub fn build(&self, horizon: f64) -> Result<TerminalCondition> {
        Ok(match self {
            Self::XTerminal => TerminalCondition::x_terminal(horizon),
            Self::XSquared => TerminalCondition::x_squared(horizon),
            Self::Call { strike } => TerminalCondition::call(horizon, *strike),
            Self::Indicator { time, level } => TerminalCondition::indicator(*time, *level),
            Self::Power { time, exponent, cap } => {
                if !(*exponent > 0.0) || !(*cap > 0.0) {
                    return Err(Error::Config("power terminal needs exponent > 0 and cap > 0".into()));
                }
                let (e, c) = (*exponent, *cap);
                TerminalCondition::Functional(Functional::new(
                    format!("min(|X_{time}|^{e},{c})"),
                    vec![*time],
                    Arc::new(move |x| x[0].abs().powf(e).min(c)),
                    true,
                )?)
            }
            Self::Constant { value } => TerminalCondition::constant(horizon, *value),
            Self::Kernel { set } => TerminalCondition::Kernel(ChaosKernelSet::from_json(&set.to_string())?),
        })
    }
}

/// Kind-specific settings; each kind reads the fields it needs and ignores
/// the rest.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    /// solve: number of Picard iterates to report.
    pub picard_iterations: Option<usize>,
    /// solve: paths written to `paths.csv`.
    pub export_paths: Option<usize>,
    /// regularity, suffcond: coarse interval index.
    pub k: Option<usize>,
    /// regularity: weight `h` per mark atom for condition (iv).
    pub h: Option<Vec<f64>>,
    /// suffcond: paths for the pilot estimate of the terminal exponent.
    pub pilot_paths: Option<usize>,
    /// suffcond: also recompute the solution on each resampled bundle.
    pub coupling: Option<bool>,
    /// rates: coarse equidistant nets.
    pub nets: Option<Vec<usize>>,
    /// rates: reference net size.
    pub reference: Option<usize>,
    /// chaos-checks: subset of `inequalities`, `bounds`, `identity`, `mc`.
    pub suite: Option<Vec<String>>,
    /// chaos-checks: number of random kernel sets.
    pub cases: Option<usize>,
    /// chaos-checks: top chaos level.
    pub levels: Option<usize>,
    /// chaos-checks: entries per level.
    pub entries: Option<usize>,
    /// chaos-checks: random `(s, t)` per coarse interval and case.
    pub pairs: Option<usize>,
    /// chaos-checks: base grid of the resampling supremum.
    pub grid: Option<usize>,
    /// chaos-checks: `[t, r]` windows of the Monte Carlo check.
    pub windows: Option<Vec<[f64; 2]>>,
    /// counterexample: values of `s`.
    pub s_values: Option<Vec<f64>>,
    /// counterexample: random weight vectors.
    pub trials: Option<usize>,
    /// counterexample: length of each weight vector.
    pub dimension: Option<usize>,
    /// counterexample: exponents of the asymptotic separation table.
    pub theta_grid: Option<Vec<f64>>,
    /// oracle-validate: tree depth.
    pub tree_steps: Option<usize>,
    /// oracle-validate: the constant of the `f ≡ c` scenario.
    pub constant: Option<f64>,
    /// malliavin: intervals of the diagonal comparison.
    pub intervals: Option<Vec<usize>>,
    /// malliavin: central-difference step in the Brownian direction.
    pub step: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Standard errors allowed in Monte Carlo comparisons.
    pub se_multiple: f64,
    /// Admissible range of fitted exponents for conditions (i)-(iii).
    pub theta_range: [f64; 2],
    /// Slack for one-sided exponent comparisons.
    pub theta_slack: f64,
    /// Admissible range of the rate slope.
    pub slope_range: [f64; 2],
    /// Admissible range of the series-to-asymptotic ratio.
    pub ratio_range: [f64; 2],
    /// Relative tolerance of exact identities.
    pub exact_rel: f64,
    /// Multiple of machine epsilon allowed in difference quotients.
    pub ulps: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            se_multiple: 3.0,
            theta_range: [0.85, 1.0],
            theta_slack: 0.15,
            slope_range: [0.35, 0.65],
            ratio_range: [1.0, 6.0],
            exact_rel: 1e-12,
            ulps: 4.0,
        }
    }
}

fn default_paths() -> usize {
    10_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub kind: Kind,
    pub seed: u64,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub net: NetSpec,
    #[serde(default)]
    pub generator: GeneratorSpec,
    /// `κ′` per mark atom; defaults to ones.
    #[serde(default)]
    pub kappa: Option<Vec<f64>>,
    #[serde(default)]
    pub terminal: TerminalSpec,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub params: Params,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Output directory used when the command line does not give one.
    #[serde(default)]
    pub output: Option<String>,
    #[serde(default)]
    pub description: Option<String>,
}

/// Problems found while reading a configuration.
#[derive(Debug)]
pub enum ConfigError {
    /// The text is not JSON.
    Syntax { line: usize, column: usize, message: String },
    /// A field is missing, unknown or of the wrong type.
    Field { path: String, message: String },
    /// The fields parse but do not describe a runnable experiment.
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Syntax { line, column, message } => write!(f, "malformed JSON at line {line}, column {column}: {message}"),
            Self::Field { path, message } => write!(f, "invalid config field `{path}`: {message}"),
            Self::Invalid(m) => write!(f, "invalid config: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// The pieces every simulation kind builds from the config.
pub struct Setup {
    pub model: LevyModel,
    pub net: TimeNet,
    pub marks: MarkMeasure,
    pub generator: Generator,
    pub terminal: TerminalCondition,
}

impl ExperimentConfig {
    /// Parses and validates a configuration.
    pub fn from_json(text: &str) -> std::result::Result<Self, ConfigError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let config: Self = serde_path_to_error::deserialize(value).map_err(|e| ConfigError::Field {
            path: e.path().to_string(),
            message: e.into_inner().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn setup(&self) -> Result<Setup> {
        let model = self.model.build()?;
        let net = self.net.build(model.horizon())?;
        let marks = model.mark_measure();
        let kappa = self.kappa.clone().unwrap_or_else(|| vec![1.0; marks.len()]);
        let generator = self.generator.build(kappa)?;
        generator.validate(&marks, model.horizon(), self.solver.lipschitz_pairs)?;
        let terminal = self.terminal.build(model.horizon())?;
        if let TerminalCondition::Functional(f) = &terminal {
            f.indices(&net)?;
        }
        Ok(Setup {
            model,
            net,
            marks,
            generator,
            terminal,
        })
    }

    /// Checks that every reference resolves and the kind has what it needs.
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.name.trim().is_empty() {
            return invalid("`name` must not be empty".into());
        }
        let t = &self.tolerances;
        if !(t.se_multiple > 0.0 && t.theta_slack >= 0.0 && t.exact_rel >= 0.0 && t.ulps >= 0.0) {
            return invalid("tolerances must be non-negative (se_multiple positive)".into());
        }
        for (name, r) in [("theta_range", t.theta_range), ("slope_range", t.slope_range), ("ratio_range", t.ratio_range)] {
            if !(r[0] <= r[1]) {
                return invalid(format!("tolerances.{name} must be an interval [lo, hi]"));
            }
        }
        let p = &self.params;
        match self.kind {
            Kind::Counterexample => {
                if let Some(s) = &p.s_values {
                    if s.is_empty() || s.iter().any(|v| !(0.0..1.0).contains(v)) {
                        return invalid("params.s_values must be non-empty and inside [0, 1)".into());
                    }
                }
                if p.dimension == Some(0) {
                    return invalid("params.dimension must be positive".into());
                }
                return Ok(());
            }
            Kind::ChaosChecks => {
                if p.levels == Some(0) || p.cases == Some(0) {
                    return invalid("params.levels and params.cases must be positive".into());
                }
            }
            _ => {}
        }
        let setup = self.setup().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let needs_paths = !matches!(self.kind, Kind::ChaosChecks);
        if needs_paths && self.n_paths < 2 {
            return invalid("n_paths must be at least 2".into());
        }
        match self.kind {
            Kind::Regularity | Kind::Suffcond => {
                let k = p.k.unwrap_or(1);
                if k == 0 || k > setup.net.n_coarse() {
                    return invalid(format!("params.k = {k} is not a coarse interval of the net"));
                }
                if let Some(h) = &p.h {
                    if h.len() != setup.marks.len() {
                        return invalid(format!("params.h needs {} values, one per mark atom", setup.marks.len()));
                    }
                }
            }
            Kind::Rates => {
                let reference = p.reference.unwrap_or(256);
                for &n in p.nets.as_deref().unwrap_or(&[4, 8, 16, 32]) {
                    if n == 0 || reference % n != 0 {
                        return invalid(format!("params.nets: {n} does not divide the reference size {reference}"));
                    }
                }
            }
            Kind::Malliavin => {
                if let Some(iv) = &p.intervals {
                    if iv.iter().any(|&i| i >= setup.net.n_intervals()) {
                        return invalid("params.intervals must index net intervals".into());
                    }
                }
                if !matches!(setup.terminal, TerminalCondition::Functional(_)) {
                    return invalid("malliavin needs a functional terminal condition".into());
                }
            }
            Kind::OracleValidate => {
                if !matches!(setup.terminal, TerminalCondition::Functional(_)) {
                    return invalid("oracle-validate needs a functional terminal condition".into());
                }
            }
            Kind::ChaosChecks => {
                if let Some(s) = &p.suite {
                    if let Some(bad) = s.iter().find(|x| !["inequalities", "bounds", "identity", "mc"].contains(&x.as_str())) {
                        return invalid(format!("params.suite: unknown check `{bad}`"));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}
