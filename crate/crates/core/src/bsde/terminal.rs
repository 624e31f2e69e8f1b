use std::fmt;
use std::sync::Arc;

use crate::chaos::ChaosKernelSet;
use crate::error::{Error, Result};
use crate::levy::{PathBundle, TimeNet};

pub type FunctionalFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A path functional `g(X_{s_1}, …, X_{s_d})` of the process at fixed times.
#[derive(Clone)]
pub struct Functional {
    name: String,
    times: Vec<f64>,
    g: FunctionalFn,
    /// Whether `g` with future values frozen at the current state is a useful
    /// extra regression feature (true for kinked or discontinuous `g`).
    proxy: bool,
}

impl fmt::Debug for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Functional")
            .field("name", &self.name)
            .field("times", &self.times)
            .finish()
    }
}

impl Functional {
    pub fn new(name: impl Into<String>, times: Vec<f64>, g: FunctionalFn, proxy: bool) -> Result<Self> {
        if times.is_empty() || times.windows(2).any(|w| w[1] <= w[0]) || times[0] <= 0.0 {
            return Err(Error::Config("functional times must be positive and strictly increasing".into()));
        }
        Ok(Self {
            name: name.into(),
            times,
            g,
            proxy,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.g)(x)
    }

    pub fn uses_proxy(&self) -> bool {
        self.proxy
    }

    /// Net indices of the times; every time must be a net point.
    pub fn indices(&self, net: &TimeNet) -> Result<Vec<usize>> {
        self.times
            .iter()
            .map(|&s| {
                net.index_of(s)
                    .ok_or_else(|| Error::Mismatch(format!("functional time {s} is not a net point")))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub enum TerminalCondition {
    Functional(Functional),
    Kernel(ChaosKernelSet),
}

impl TerminalCondition {
    pub fn functional(name: &str, times: Vec<f64>, g: FunctionalFn) -> Result<Self> {
        Ok(Self::Functional(Functional::new(name, times, g, false)?))
    }

    /// `X_T`.
    pub fn x_terminal(horizon: f64) -> Self {
        Self::Functional(Functional::new("X_T", vec![horizon], Arc::new(|x| x[0]), false).unwrap())
    }

    /// `X_T²`.
    pub fn x_squared(horizon: f64) -> Self {
        Self::Functional(Functional::new("X_T^2", vec![horizon], Arc::new(|x| x[0] * x[0]), false).unwrap())
    }

    /// `max(X_T − K, 0)`.
    pub fn call(horizon: f64, strike: f64) -> Self {
        Self::Functional(
            Functional::new(
                format!("max(X_T-{strike},0)"),
                vec![horizon],
                Arc::new(move |x| (x[0] - strike).max(0.0)),
                true,
            )
            .unwrap(),
        )
    }

    /// `1{X_r > level}`.
    pub fn indicator(r: f64, level: f64) -> Self {
        Self::Functional(
            Functional::new(
                format!("1(X_{r}>{level})"),
                vec![r],
                Arc::new(move |x| if x[0] > level { 1.0 } else { 0.0 }),
                true,
            )
            .unwrap(),
        )
    }

    pub fn constant(horizon: f64, c: f64) -> Self {
        Self::Functional(Functional::new(format!("{c}"), vec![horizon], Arc::new(move |_| c), false).unwrap())
    }

    pub fn name(&self) -> String {
        match self {
            Self::Functional(f) => f.name.clone(),
            Self::Kernel(k) => format!("kernel(levels<={})", k.max_level()),
        }
    }

    /// Times whose `X` values the regression state carries once they are past.
    pub fn state_times(&self) -> Vec<f64> {
        match self {
            Self::Functional(f) => f.times.clone(),
            Self::Kernel(k) => k.partition()[1..].to_vec(),
        }
    }

    /// `ξ` per path.
    pub fn evaluate(&self, bundle: &PathBundle) -> Result<Vec<f64>> {
        match self {
            Self::Functional(f) => {
                let idx = f.indices(bundle.net())?;
                let x = bundle.x_matrix();
                let width = bundle.net().points().len();
                Ok((0..bundle.n_paths())
                    .map(|p| {
                        let vals: Vec<f64> = idx.iter().map(|&i| x[p * width + i]).collect();
                        f.eval(&vals)
                    })
                    .collect())
            }
            Self::Kernel(k) => Ok(k.evaluate_paths(bundle)?.values),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy::{simulate, LevyModel};

    #[test]
    fn functional_reads_net_points() {
        let model = LevyModel::with_atoms(0.0, 1.0, &[(1.0, 2.0)], 1.0).unwrap();
        let net = TimeNet::equidistant(1.0, 4, 2).unwrap();
        let b = simulate(&model, &net, 10, 1).unwrap();
        let xi = TerminalCondition::x_terminal(1.0).evaluate(&b).unwrap();
        for p in 0..10 {
            assert_eq!(xi[p], b.x_path(p)[4]);
        }
        let ind = TerminalCondition::indicator(0.3, 0.0);
        assert!(ind.evaluate(&b).is_err());
        assert!(Functional::new("bad", vec![0.5, 0.5], Arc::new(|_| 0.0), false).is_err());
    }
}
