//! Built-in experiment definitions.

use serde_json::{json, Value};

use super::config::{ExperimentConfig, Kind};

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: &'static str,
    pub kind: Kind,
    pub description: &'static str,
    doc: Value,
}

impl Scenario {
    pub fn config(&self) -> ExperimentConfig {
        let mut doc = self.doc.clone();
        doc["name"] = json!(self.name);
        doc["kind"] = json!(self.kind.label());
        doc["description"] = json!(self.description);
        ExperimentConfig::from_json(&doc.to_string()).unwrap_or_else(|e| panic!("built-in scenario {}: {e}", self.name))
    }
}

fn three_atoms() -> Value {
    json!({"gamma": 0.1, "sigma": 0.5, "jumps": [[0.5, 1.0], [-0.4, 1.5]], "horizon": 1.0})
}

pub fn scenarios() -> Vec<Scenario> {
    let sc = |name, kind, description, doc| Scenario {
        name,
        kind,
        description,
        doc,
    };
    vec![
        sc(
            "chaos-inequalities",
            Kind::ChaosChecks,
            "both smoothness inequalities on 100 random kernel sets (m = 2, levels <= 4, 3 atoms)",
            json!({"seed": 101, "model": three_atoms(), "net": {"n": 10, "coarse": [0.0, 0.4, 1.0]},
                   "params": {"suite": ["inequalities"], "cases": 100, "levels": 4, "entries": 3, "pairs": 3}}),
        ),
        sc(
            "resampling-bounds",
            Kind::ChaosChecks,
            "two-sided bound between resampling quotients and the derivative norm on the same population",
            json!({"seed": 101, "model": three_atoms(), "net": {"n": 10, "coarse": [0.0, 0.4, 1.0]},
                   "params": {"suite": ["bounds"], "cases": 100, "levels": 4, "entries": 3, "grid": 16}}),
        ),
        sc(
            "resampling-identity",
            Kind::ChaosChecks,
            "exact resampling identity for measurable kernel sets and coupled-path estimates for X_T",
            json!({"seed": 101, "n_paths": 100000, "model": three_atoms(), "net": {"n": 10, "coarse": [0.0, 0.4, 1.0]},
                   "params": {"suite": ["identity", "mc"], "cases": 100, "levels": 4, "entries": 3}}),
        ),
        sc(
            "counterexample",
            Kind::Counterexample,
            "series against asymptotics and the condition (iv) bound on random unit weights",
            json!({"seed": 7, "params": {"trials": 1000, "dimension": 64}}),
        ),
        sc(
            "oracle-equivalence",
            Kind::OracleValidate,
            "least-squares solver against the exact tree for f = 0, f = c and f = -y",
            json!({"seed": 3, "n_paths": 100000, "model": {"gamma": 0.1, "sigma": 0.3, "jumps": [[0.5, 1.2]], "horizon": 1.0},
                   "net": {"n": 6}, "terminal": {"type": "x_squared"}, "params": {"tree_steps": 6, "constant": 0.5}}),
        ),
        sc(
            "malliavin-consistency",
            Kind::Malliavin,
            "diagonal of the derivative equation against regression Z, quotients and Clark-Ocone for X_T",
            json!({"seed": 5, "n_paths": 40000, "net": {"n": 16}, "generator": {"type": "linear", "b": 0.3, "c": 0.5},
                   "kappa": [1.0, 0.5, 2.0], "terminal": {"type": "x_terminal"}, "params": {"intervals": [0, 8], "step": 0.001}}),
        ),
        sc(
            "rates-lipschitz",
            Kind::Rates,
            "Err on nets 4..32 against a 256-step reference for max(X_T, 0), f = 0",
            json!({"seed": 13, "n_paths": 20000, "terminal": {"type": "call", "strike": 0.0},
                   "params": {"nets": [4, 8, 16, 32], "reference": 256}}),
        ),
        sc(
            "rates-indicator",
            Kind::Rates,
            "Err for the discontinuous 1(X_T > 0); the rate is expected below the Lipschitz one",
            json!({"seed": 17, "n_paths": 10000, "terminal": {"type": "indicator", "time": 1.0, "level": 0.0},
                   "params": {"nets": [4, 8, 16, 32], "reference": 128},
                   "tolerances": {"slope_range": [0.05, 0.5]}}),
        ),
        sc(
            "regularity-xt",
            Kind::Regularity,
            "fitted exponents of conditions (i)-(iv) for xi = X_T",
            json!({"seed": 19, "n_paths": 50000, "net": {"n": 64}, "terminal": {"type": "x_terminal"}, "params": {"k": 1}}),
        ),
        sc(
            "suffcond-nonlipschitz",
            Kind::Suffcond,
            "exponent of Y against a pilot exponent of xi = min(|X_0.5|^0.5, 2)",
            json!({"seed": 23, "n_paths": 100000, "net": {"n": 64, "coarse": [0.0, 0.5, 1.0]},
                   "generator": {"type": "sine_mix", "a": 0.5, "b": 0.3, "c": 0.2},
                   "terminal": {"type": "power", "time": 0.5, "exponent": 0.5, "cap": 2.0},
                   "params": {"k": 1, "pilot_paths": 200000}}),
        ),
        sc(
            "solve-jump-diffusion",
            Kind::Solve,
            "nonlinear generator with a call terminal condition on a jump diffusion",
            json!({"seed": 29, "n_paths": 20000, "net": {"n": 16},
                   "generator": {"type": "sine_mix", "a": 0.5, "b": 0.3, "c": 0.2},
                   "terminal": {"type": "call", "strike": 0.1}}),
        ),
        sc(
            "solve-picard",
            Kind::Solve,
            "Picard iterates converging to the backward solution for an affine generator",
            json!({"seed": 31, "n_paths": 20000, "net": {"n": 16},
                   "generator": {"type": "affine", "a": 0.2, "b": -0.5, "c": 0.3, "d": 0.1},
                   "terminal": {"type": "x_squared"}, "params": {"picard_iterations": 8}}),
        ),
    ]
}

pub fn scenario(name: &str) -> Option<Scenario> {
    scenarios().into_iter().find(|s| s.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_scenario_validates() {
        let all = scenarios();
        assert!(all.len() >= 10);
        for s in &all {
            let c = s.config();
            assert_eq!(c.kind, s.kind);
            let again = ExperimentConfig::from_json(&c.to_json()).unwrap();
            assert_eq!(again.to_json(), c.to_json());
        }
        let mut names: Vec<_> = all.iter().map(|s| s.name).collect();
        names.dedup();
        assert_eq!(names.len(), all.len());
    }
}
