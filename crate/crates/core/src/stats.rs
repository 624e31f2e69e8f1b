//! Small sample-statistics helpers.
//!
//! Parallel reductions are chunked with a fixed chunk size and the chunk
//! partials are combined in chunk order, so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

pub(crate) const CHUNK: usize = 2048;

/// Deterministic parallel sum of `f(i)` for `i in 0..n`.
pub fn par_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partials: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            (lo..hi).map(&f).sum::<f64>()
        })
        .collect();
    partials.iter().sum()
}

/// Deterministic parallel sum of vectors of length `dim`.
pub fn par_sum_vec<F>(n: usize, dim: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let partials: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; dim];
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            for i in lo..hi {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; dim];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub fn from_fn<F>(n: usize, f: F) -> Self
    where
        F: Fn(usize) -> f64 + Sync,
    {
        let s = par_sum_vec(n, 2, |i, acc| {
            let v = f(i);
            acc[0] += v;
            acc[1] += v * v;
        });
        Self::from_moments(n, s[0], s[1])
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Self::from_fn(values.len(), |i| values[i])
    }

    fn from_moments(n: usize, sum: f64, sum_sq: f64) -> Self {
        let nf = n as f64;
        let mean = sum / nf;
        let var = if n > 1 {
            ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0)
        } else {
            0.0
        };
        Self {
            mean,
            se: (var / nf).sqrt(),
        }
    }

    /// `|mean - target| <= k * se`, with an absolute floor for zero-variance samples.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.se + 1e-12 * (1.0 + target.abs())
    }
}

/// Difference of two estimates assumed independent.
pub fn diff_within(a: &Estimate, b: &Estimate, k: f64) -> bool {
    let se = (a.se * a.se + b.se * b.se).sqrt();
    (a.mean - b.mean).abs() <= k * se + 1e-12 * (1.0 + a.mean.abs())
}

/// Pearson correlation of paired samples.
pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let s = par_sum_vec(n, 5, |i, acc| {
        acc[0] += x[i];
        acc[1] += y[i];
        acc[2] += x[i] * x[i];
        acc[3] += y[i] * y[i];
        acc[4] += x[i] * y[i];
    });
    let nf = n as f64;
    let cov = s[4] / nf - s[0] * s[1] / (nf * nf);
    let vx = s[2] / nf - (s[0] / nf).powi(2);
    let vy = s[3] / nf - (s[1] / nf).powi(2);
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_sum_matches_serial() {
        let n = 10_007;
        let s = par_sum(n, |i| (i as f64).sqrt());
        let serial: f64 = (0..n.div_ceil(CHUNK))
            .map(|c| ((c * CHUNK)..((c + 1) * CHUNK).min(n)).map(|i| (i as f64).sqrt()).sum::<f64>())
            .sum();
        assert_eq!(s, serial);
    }

    #[test]
    fn estimate_of_constant() {
        let e = Estimate::from_slice(&[2.0; 10]);
        assert_eq!(e.mean, 2.0);
        assert_eq!(e.se, 0.0);
        assert!(e.within(2.0, 3.0));
    }
}
