//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs the built-in scenarios through the library and checks each
//! criterion at its stated tolerance. Exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use levy_bsde::runner::{self, RunOutcome};

struct Verdict {
    passed: bool,
    detail: String,
}

fn fail(detail: impl Into<String>) -> Verdict {
    Verdict {
        passed: false,
        detail: detail.into(),
    }
}

fn run_scenario(name: &str) -> Result<(RunOutcome, Duration), String> {
    let config = runner::scenario(name).ok_or_else(|| format!("no scenario {name}"))?.config();
    let start = Instant::now();
    let out = runner::run(&config, false).map_err(|e| format!("{name}: {e}"))?;
    Ok((out, start.elapsed()))
}

/// Every check whose name starts with one of `prefixes` must exist and pass.
fn require(out: &RunOutcome, prefixes: &[&str]) -> Verdict {
    let mut notes = Vec::new();
    let mut passed = true;
    for p in prefixes {
        let hits: Vec<_> = out.checks.iter().filter(|c| c.name.starts_with(p)).collect();
        if hits.is_empty() {
            passed = false;
            notes.push(format!("missing check '{p}'"));
        }
        for c in hits {
            passed &= c.passed;
            if !c.passed {
                notes.push(format!("{}: {}", c.name, c.detail));
            }
        }
    }
    let detail = if notes.is_empty() {
        out.checks
            .iter()
            .filter(|c| prefixes.iter().any(|p| c.name.starts_with(p)))
            .map(|c| c.detail.clone())
            .collect::<Vec<_>>()
            .join("; ")
    } else {
        notes.join("; ")
    };
    Verdict { passed, detail }
}

/// Last floating-point number in a detail string.
fn last_number(s: &str) -> Option<f64> {
    s.split(|c: char| !(c.is_ascii_digit() || matches!(c, '.' | '-' | 'e')))
        .filter_map(|w| w.parse::<f64>().ok())
        .last()
}

fn fact(out: &RunOutcome, key: &str) -> Option<f64> {
    out.fact(key).and_then(|v| v.parse().ok())
}

fn criterion_1() -> Result<Verdict, String> {
    let (out, took) = run_scenario("chaos-inequalities")?;
    let mut v = require(&out, &["smoothness inequalities"]);
    if took > Duration::from_secs(60) {
        v = fail(format!("took {took:?}, limit 60 s"));
    }
    v.detail = format!("{} in {:.1} s", v.detail, took.as_secs_f64());
    Ok(v)
}

fn criterion_2() -> Result<Verdict, String> {
    let (out, _) = run_scenario("resampling-bounds")?;
    Ok(require(&out, &["resampling bounds"]))
}

fn criterion_3() -> Result<Verdict, String> {
    let (out, _) = run_scenario("resampling-identity")?;
    Ok(require(&out, &["resampling identity", "window resampling of X_T"]))
}

fn criterion_4() -> Result<Verdict, String> {
    let (out, _) = run_scenario("counterexample")?;
    let mut v = require(&out, &["series to asymptotic ratio", "condition (iv) bound"]);
    // the bound printed by the run must be 1/(log 2)^2
    let bound = 1.0 / std::f64::consts::LN_2.powi(2);
    let printed = out.check("condition (iv) bound").and_then(|c| last_number(&c.detail));
    if printed.map_or(true, |b| (b - bound).abs() > 1e-5) {
        v = fail(format!("reported bound {printed:?}, expected {bound:.6}"));
    }
    Ok(v)
}

fn criterion_5() -> Result<Verdict, String> {
    let (out, _) = run_scenario("oracle-equivalence")?;
    let mut v = require(
        &out,
        &[
            "lsmc Y0 (zero)",
            "lsmc Zbar0 (zero)",
            "lsmc Y0 (constant)",
            "lsmc Zbar0 (constant)",
            "lsmc Y0 (decay)",
            "lsmc Zbar0 (decay)",
            "structure flags (f = 0)",
        ],
    );
    // for f = 0 and xi = X_T^2 the tree matches mean and variance, so
    // Y0 = (gamma T)^2 + T (sigma^2 + sum x^2 lambda)
    let exact = 0.1f64.powi(2) + 0.3f64.powi(2) + 0.5f64.powi(2) * 1.2;
    let tree = out.check("lsmc Y0 (zero)").and_then(|c| last_number(&c.detail));
    if tree.map_or(true, |t| (t - exact).abs() > 1e-6) {
        v = fail(format!("tree Y0 {tree:?}, closed form {exact}"));
    }
    Ok(v)
}

fn criterion_6() -> Result<Verdict, String> {
    let (out, _) = run_scenario("malliavin-consistency")?;
    Ok(require(
        &out,
        &["diagonal Z matches regression Zbar", "difference quotient of X_T is one", "Clark-Ocone residual"],
    ))
}

fn criterion_7() -> Result<Verdict, String> {
    let (out, took) = run_scenario("rates-lipschitz")?;
    let mut v = require(&out, &["rate slope in range"]);
    if took > Duration::from_secs(600) {
        v = fail(format!("took {took:?}, limit 10 min"));
    }
    v.detail = format!("{} in {:.1} s", v.detail, took.as_secs_f64());
    Ok(v)
}

fn criterion_8() -> Result<Verdict, String> {
    let (out, _) = run_scenario("regularity-xt")?;
    let mut v = require(
        &out,
        &["theta i in range", "theta ii in range", "theta iii in range", "theta iv not below the others"],
    );
    if v.passed {
        let th: Vec<String> = ["i", "ii", "iii", "iv"]
            .iter()
            .map(|c| format!("{c}={:.3}", fact(&out, &format!("theta {c}")).unwrap_or(f64::NAN)))
            .collect();
        v.detail = th.join(" ");
        if let Some(u) = out.fact("curve iv within noise floor") {
            v.detail += &format!(" (iv within noise floor: {u})");
        }
    }
    Ok(v)
}

fn criterion_9() -> Result<Verdict, String> {
    let config = runner::scenario("suffcond-nonlipschitz").ok_or("no scenario")?.config();
    if config.n_paths < 100_000 {
        return Ok(fail(format!("only {} paths", config.n_paths)));
    }
    let (out, _) = run_scenario("suffcond-nonlipschitz")?;
    Ok(require(&out, &["theta_Y >= theta_xi - slack"]))
}

fn csvs_with_threads(name: &str, threads: usize) -> Result<Vec<(String, String)>, String> {
    let config = runner::scenario(name).ok_or("no scenario")?.config();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
    let out = pool.install(|| runner::run(&config, false)).map_err(|e| e.to_string())?;
    Ok(out.tables.iter().map(|t| (t.name.clone(), t.to_csv())).collect())
}

fn criterion_10() -> Result<Verdict, String> {
    let names = [
        "solve-jump-diffusion",
        "resampling-identity",
        "oracle-equivalence",
        "malliavin-consistency",
        "regularity-xt",
    ];
    let mut files = 0;
    for name in names {
        let one = csvs_with_threads(name, 1)?;
        let eight = csvs_with_threads(name, 8)?;
        if one != eight {
            let diff: Vec<_> = one
                .iter()
                .zip(&eight)
                .filter(|(a, b)| a != b)
                .map(|(a, _)| a.0.clone())
                .collect();
            return Ok(fail(format!("{name}: tables differ: {diff:?}")));
        }
        files += one.len();
    }
    Ok(Verdict {
        passed: true,
        detail: format!("{files} CSV tables from {} scenarios byte-identical at 1 and 8 threads", names.len()),
    })
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Result<Verdict, String>); 10] = [
        ("smoothness inequalities", criterion_1),
        ("resampling two-sided bounds", criterion_2),
        ("resampling identity", criterion_3),
        ("counterexample", criterion_4),
        ("oracle equivalence", criterion_5),
        ("malliavin consistency", criterion_6),
        ("convergence rate", criterion_7),
        ("regularity exponents", criterion_8),
        ("sufficient condition", criterion_9),
        ("thread determinism", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let v = f().unwrap_or_else(fail);
        if !v.passed {
            failed += 1;
        }
        println!("[{}] {:>2} {name}: {}", if v.passed { "PASS" } else { "FAIL" }, i + 1, v.detail);
    }
    println!("{} criteria, {failed} failed", criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
