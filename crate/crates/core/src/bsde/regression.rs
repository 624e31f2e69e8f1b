//! Least-squares projection onto polynomials of the regression state.
//!
//! Variables are standardized; the basis is every monomial of total degree
//! `≤ d` in the polynomial variables, followed by optional extra columns that
//! enter linearly. The normal equations are assembled with deterministic
//! chunked sums and solved through a symmetric eigendecomposition, which also
//! yields the condition number.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::stats::{par_sum, par_sum_vec};

/// Gram matrices with a larger condition number are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct Regressor {
    n: usize,
    /// Standardized polynomial variables, variable-major.
    poly: Vec<Vec<f64>>,
    /// Standardized linear-only columns.
    linear: Vec<Vec<f64>>,
    exponents: Vec<Vec<u8>>,
    eigen: SymmetricEigen<f64, nalgebra::Dyn>,
    condition: f64,
    degree: usize,
}

fn monomials(vars: usize, degree: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![0u8; vars]];
    let mut frontier = out.clone();
    for _ in 0..degree {
        let mut next = Vec::new();
        for m in &frontier {
            // only raise variables at or after the last raised one: no duplicates
            let last = m.iter().rposition(|&e| e > 0).unwrap_or(0);
            for v in last..vars {
                let mut e = m.clone();
                e[v] += 1;
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn standardize(col: &[f64]) -> Option<Vec<f64>> {
    let n = col.len();
    let mean = par_sum(n, |i| col[i]) / n as f64;
    let var = par_sum(n, |i| (col[i] - mean).powi(2)) / n as f64;
    let sd = var.sqrt();
    if !(sd > 1e-10 * (1.0 + mean.abs())) {
        return None;
    }
    Some(col.iter().map(|v| (v - mean) / sd).collect())
}

impl Regressor {
    /// Fits the basis for the given state. Columns with no variation are
    /// dropped; if the Gram matrix is too ill-conditioned the polynomial
    /// degree is lowered, and `RankDeficient` is returned only when even the
    /// affine basis is singular.
    pub fn fit(poly_vars: &[&[f64]], linear_vars: &[&[f64]], degree: usize, step: usize) -> Result<Self> {
        let n = poly_vars
            .first()
            .or(linear_vars.first())
            .map(|c| c.len())
            .ok_or_else(|| Error::Config("regression needs at least one state column".into()))?;
        let poly: Vec<Vec<f64>> = poly_vars.iter().filter_map(|c| standardize(c)).collect();
        let linear: Vec<Vec<f64>> = linear_vars.iter().filter_map(|c| standardize(c)).collect();
        let mut last = (0.0, 0);
        for d in (1..=degree.max(1)).rev() {
            let exponents = monomials(poly.len(), d);
            let dim = exponents.len() + linear.len();
            let mut reg = Self {
                n,
                poly: poly.clone(),
                linear: linear.clone(),
                exponents,
                eigen: SymmetricEigen::new(DMatrix::zeros(1, 1)),
                condition: 0.0,
                degree: d,
            };
            let g = par_sum_vec(n, dim * dim, |p, acc| {
                let phi = reg.basis(p);
                for a in 0..dim {
                    for b in a..dim {
                        acc[a * dim + b] += phi[a] * phi[b];
                    }
                }
            });
            let mut gram = DMatrix::zeros(dim, dim);
            for a in 0..dim {
                for b in a..dim {
                    let v = g[a * dim + b] / n as f64;
                    gram[(a, b)] = v;
                    gram[(b, a)] = v;
                }
            }
            let eigen = SymmetricEigen::new(gram);
            let max = eigen.eigenvalues.max();
            let min = eigen.eigenvalues.min();
            let condition = if min > 0.0 { max / min } else { f64::INFINITY };
            if condition <= MAX_CONDITION {
                reg.eigen = eigen;
                reg.condition = condition;
                return Ok(reg);
            }
            last = (condition, dim);
        }
        Err(Error::RankDeficient {
            step,
            condition: last.0,
            basis_size: last.1,
        })
    }

    /// An intercept-only regressor (the state is deterministic).
    pub fn intercept(n: usize) -> Self {
        Self::fit(&[], &[&vec![0.0; n]], 0, 0).unwrap_or_else(|_| unreachable!())
    }

    pub fn basis_size(&self) -> usize {
        self.exponents.len() + self.linear.len()
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    fn basis(&self, p: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.basis_size());
        for e in &self.exponents {
            let mut v = 1.0;
            for (k, &pow) in e.iter().enumerate() {
                if pow > 0 {
                    v *= self.poly[k][p].powi(pow as i32);
                }
            }
            out.push(v);
        }
        for c in &self.linear {
            out.push(c[p]);
        }
        out
    }

    pub fn coefficients(&self, target: &[f64]) -> Vec<f64> {
        let dim = self.basis_size();
        let b = par_sum_vec(self.n, dim, |p, acc| {
            let phi = self.basis(p);
            for a in 0..dim {
                acc[a] += phi[a] * target[p];
            }
        });
        let b = DVector::from_iterator(dim, b.into_iter().map(|v| v / self.n as f64));
        let q = &self.eigen.eigenvectors;
        let coords = q.transpose() * b;
        let scaled = DVector::from_iterator(dim, coords.iter().zip(self.eigen.eigenvalues.iter()).map(|(c, l)| c / l));
        (q * scaled).iter().copied().collect()
    }

    /// Leverage `φ_pᵀ(Σ_q φ_qφ_qᵀ)⁻¹φ_p` of every path.
    pub fn leverages(&self) -> Vec<f64> {
        let q = &self.eigen.eigenvectors;
        let dim = self.basis_size();
        (0..self.n)
            .into_par_iter()
            .map(|p| {
                let phi = DVector::from_vec(self.basis(p));
                let coords = q.transpose() * phi;
                (0..dim).map(|k| coords[k] * coords[k] / self.eigen.eigenvalues[k]).sum::<f64>() / self.n as f64
            })
            .collect()
    }

    /// Fitted values `Ê[target | state]` per path.
    pub fn project(&self, target: &[f64]) -> Vec<f64> {
        let c = self.coefficients(target);
        (0..self.n)
            .into_par_iter()
            .map(|p| self.basis(p).iter().zip(&c).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_count() {
        assert_eq!(monomials(1, 3).len(), 4);
        assert_eq!(monomials(2, 3).len(), 10);
        assert_eq!(monomials(3, 2).len(), 10);
        assert_eq!(monomials(0, 3).len(), 1);
    }

    #[test]
    fn recovers_polynomial() {
        let x: Vec<f64> = (0..1000).map(|i| (i as f64 / 100.0).sin() * 3.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 1.0 + 2.0 * v - 0.5 * v * v * v).collect();
        let r = Regressor::fit(&[&x], &[], 3, 0).unwrap();
        let fit = r.project(&y);
        for (a, b) in fit.iter().zip(&y) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn leverages_sum_to_basis_size() {
        let x: Vec<f64> = (0..500).map(|i| (i as f64 * 0.37).cos()).collect();
        let r = Regressor::fit(&[&x], &[], 3, 0).unwrap();
        let total: f64 = r.leverages().iter().sum();
        assert!((total - 4.0).abs() < 1e-9, "{total}");
    }

    #[test]
    fn constant_state_gives_mean() {
        let x = vec![2.0; 50];
        let y: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let r = Regressor::fit(&[&x], &[], 3, 0).unwrap();
        assert_eq!(r.basis_size(), 1);
        assert!(r.project(&y).iter().all(|v| (v - 24.5).abs() < 1e-12));
    }

    #[test]
    fn few_distinct_values_lower_the_degree() {
        let x: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
        let r = Regressor::fit(&[&x], &[], 3, 0).unwrap();
        assert_eq!(r.degree(), 1);
        let dup = x.clone();
        assert!(matches!(
            Regressor::fit(&[&x], &[&dup], 1, 7),
            Err(Error::RankDeficient { step: 7, .. })
        ));
    }
}
