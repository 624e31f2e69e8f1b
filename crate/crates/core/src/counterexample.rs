//! A terminal condition satisfying the `Z`-increment bound (iv) for every
//! exponent while `‖Z_s‖²` blows up faster than any `(1−s)^{θ−1}`.
//!
//! With `T = 1`, `m = 1`, `f ≡ 0` and `g_n = β_n (n!)^{-1/2} p_n^{⊗n}` for an
//! orthonormal basis `(p_n)` of `L₂(μ)`, only the numbers `β_n²` enter:
//! `‖Z_{s,·}‖² = Σ_n n β_n² s^{n−1}`.

use serde::Serialize;

use crate::error::{Error, Result};

/// `β₁² = 1`, `β₂² = 0`, `β_n² = 1/(n (log(n−1))²)` for `n ≥ 3`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CounterexampleSpec {
    /// Fixed truncation; `None` picks the smallest one meeting the tail bound.
    pub truncation: Option<usize>,
}

pub const TAIL_TOLERANCE: f64 = 1e-10;

impl CounterexampleSpec {
    pub fn beta_sq(n: usize) -> f64 {
        match n {
            0 => 0.0,
            1 => 1.0,
            2 => 0.0,
            _ => {
                let l = ((n - 1) as f64).ln();
                1.0 / (n as f64 * l * l)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CounterexampleSeries {
    pub s: f64,
    /// Truncated `Σ_{n≤N} n β_n² s^{n−1}`.
    pub z_norm_sq: f64,
    /// `1/((1−s)(1−log(1−s))²)`.
    pub asymptotic: f64,
    pub truncation: usize,
    /// Bound on the omitted tail.
    pub tail_bound: f64,
}

impl CounterexampleSeries {
    pub fn ratio(&self) -> f64 {
        self.z_norm_sq / self.asymptotic
    }
}

/// `Σ_{n>N} n β_n² s^{n−1} = Σ_{k≥N} s^k/(log k)² ≤ s^N / ((log N)² (1−s))`.
fn tail_bound(n: usize, s: f64) -> f64 {
    if n < 3 {
        return f64::INFINITY;
    }
    let l = ((n - 1) as f64).ln();
    s.powi((n - 1) as i32) / (l * l * (1.0 - s))
}

pub fn counterexample_series(spec: &CounterexampleSpec, s: f64) -> Result<CounterexampleSeries> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::OutOfRange(format!("s = {s} must lie in [0, 1)")));
    }
    let mut sum = 1.0;
    let mut n = 2;
    let mut power = s;
    loop {
        // `power` holds s^{n-1}; the tail after n is bounded by tail_bound(n + 1, s)
        let tail = tail_bound(n + 1, s);
        let done = match spec.truncation {
            Some(limit) => n >= limit,
            None => tail < TAIL_TOLERANCE,
        };
        if done || s == 0.0 {
            if s > 0.0 && tail >= TAIL_TOLERANCE {
                return Err(Error::OutOfRange(format!(
                    "truncation {n} leaves a tail bound {tail:.3e} above {TAIL_TOLERANCE:e}"
                )));
            }
            let asymptotic = 1.0 / ((1.0 - s) * (1.0 - (1.0 - s).ln()).powi(2));
            return Ok(CounterexampleSeries {
                s,
                z_norm_sq: sum,
                asymptotic,
                truncation: n,
                tail_bound: if s == 0.0 { 0.0 } else { tail },
            });
        }
        n += 1;
        power *= s;
        sum += n as f64 * CounterexampleSpec::beta_sq(n) * power;
    }
}

/// `Σ_{n≥3} α_n² (log(n−1))^{-2} (t^{n−1} − s^{n−1})` for coefficients
/// `alpha[i]` of `p_{i+1}`; bounded by `‖α‖²/(log 2)²`.
pub fn condition_iv_quantity(alpha: &[f64], s: f64, t: f64) -> Result<f64> {
    if !(0.0 <= s && s <= t && t < 1.0) {
        return Err(Error::InvalidInterval {
            s,
            t,
            reason: "need 0 <= s <= t < 1".into(),
        });
    }
    Ok(alpha
        .iter()
        .enumerate()
        .skip(2)
        .map(|(i, a)| {
            let n = i + 1;
            let l = ((n - 1) as f64).ln();
            a * a / (l * l) * (t.powi(n as i32 - 1) - s.powi(n as i32 - 1))
        })
        .sum())
}

pub fn condition_iv_bound() -> f64 {
    1.0 / std::f64::consts::LN_2.powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_at_zero_is_one() {
        let r = counterexample_series(&CounterexampleSpec::default(), 0.0).unwrap();
        assert_eq!(r.z_norm_sq, 1.0);
        assert_eq!(r.asymptotic, 1.0);
    }

    #[test]
    fn series_matches_direct_sum() {
        let s = 0.5;
        let r = counterexample_series(&CounterexampleSpec::default(), s).unwrap();
        let direct: f64 = 1.0 + (2..400).map(|k| s.powi(k) / (k as f64).ln().powi(2)).sum::<f64>();
        assert!((r.z_norm_sq - direct).abs() < 1e-10);
        assert!(r.tail_bound < TAIL_TOLERANCE);
    }

    #[test]
    fn rejects_s_at_one_and_short_truncation() {
        assert!(counterexample_series(&CounterexampleSpec::default(), 1.0).is_err());
        let short = CounterexampleSpec { truncation: Some(10) };
        assert!(counterexample_series(&short, 0.9).is_err());
    }

    #[test]
    fn ratio_stays_bounded() {
        for s in [0.9, 0.99, 0.999, 0.9999] {
            let r = counterexample_series(&CounterexampleSpec::default(), s).unwrap();
            assert!(r.ratio() > 1.0 && r.ratio() < 6.0, "{s}: {}", r.ratio());
        }
    }

    #[test]
    fn condition_iv_example() {
        let mut alpha = vec![0.0; 6];
        alpha[2] = 1.0;
        let v = condition_iv_quantity(&alpha, 0.0, 0.999_999).unwrap();
        assert!(v < condition_iv_bound());
        assert!((v - 0.999_998 / std::f64::consts::LN_2.powi(2)).abs() < 1e-5);
    }
}
