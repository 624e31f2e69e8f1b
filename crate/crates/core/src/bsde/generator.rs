use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::levy::MarkMeasure;
use crate::rng::{Purpose, StreamFactory};

pub type GeneratorFn = Arc<dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync>;

/// A driver `f(t, x, y, z̄)` with its declared Lipschitz constant and the
/// density `κ′` (one value per mark atom) defining `Z̄ = ∫ Z κ′ dμ`.
#[derive(Clone)]
pub struct Generator {
    name: String,
    f: GeneratorFn,
    lipschitz: f64,
    kappa_prime: Vec<f64>,
}

impl fmt::Debug for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Generator")
            .field("name", &self.name)
            .field("lipschitz", &self.lipschitz)
            .field("kappa_prime", &self.kappa_prime)
            .finish()
    }
}

impl Generator {
    pub fn new(name: impl Into<String>, f: GeneratorFn, lipschitz: f64, kappa_prime: Vec<f64>) -> Result<Self> {
        if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
            return Err(Error::Config("Lipschitz constant must be finite and >= 0".into()));
        }
        if kappa_prime.iter().any(|k| !k.is_finite()) {
            return Err(Error::Config("kappa' must be finite".into()));
        }
        Ok(Self {
            name: name.into(),
            f,
            lipschitz,
            kappa_prime,
        })
    }

    pub fn zero(kappa_prime: Vec<f64>) -> Self {
        Self::constant(0.0, kappa_prime)
    }

    pub fn constant(c: f64, kappa_prime: Vec<f64>) -> Self {
        Self::new(format!("constant({c})"), Arc::new(move |_, _, _, _| c), 0.0, kappa_prime).unwrap()
    }

    /// `f = a·x + b·y + c·z̄ + d`.
    pub fn affine(a: f64, b: f64, c: f64, d: f64, kappa_prime: Vec<f64>) -> Self {
        let lip = a.abs().max(b.abs()).max(c.abs());
        Self::new(
            format!("affine({a},{b},{c},{d})"),
            Arc::new(move |_, x, y, z| a * x + b * y + c * z + d),
            lip,
            kappa_prime,
        )
        .unwrap()
    }

    /// `f = b·y + c·z̄`.
    pub fn linear(b: f64, c: f64, kappa_prime: Vec<f64>) -> Self {
        Self::affine(0.0, b, c, 0.0, kappa_prime)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn kappa_prime(&self) -> &[f64] {
        &self.kappa_prime
    }

    #[inline]
    pub fn eval(&self, t: f64, x: f64, y: f64, z: f64) -> f64 {
        (self.f)(t, x, y, z)
    }

    /// `(∂_x f, ∂_y f, ∂_z f)` by central differences.
    pub fn gradient(&self, t: f64, x: f64, y: f64, z: f64) -> [f64; 3] {
        let step = |v: f64| 1e-6 * (1.0 + v.abs());
        let (hx, hy, hz) = (step(x), step(y), step(z));
        [
            (self.eval(t, x + hx, y, z) - self.eval(t, x - hx, y, z)) / (2.0 * hx),
            (self.eval(t, x, y + hy, z) - self.eval(t, x, y - hy, z)) / (2.0 * hy),
            (self.eval(t, x, y, z + hz) - self.eval(t, x, y, z - hz)) / (2.0 * hz),
        ]
    }

    /// `‖κ′‖²_{L₂(μ)}`.
    pub fn kappa_norm_sq(&self, marks: &MarkMeasure) -> f64 {
        marks.l2_norm_sq(&self.kappa_prime)
    }

    /// `∫ κ′ dμ`: the value of `Z̄` when `Z ≡ 1`.
    pub fn kappa_mass(&self, marks: &MarkMeasure) -> f64 {
        marks.atoms().iter().zip(&self.kappa_prime).map(|(a, k)| a.mass * k).sum()
    }

    /// Checks `κ′` against the mark measure and spot-checks the Lipschitz
    /// bound on `pairs` random argument pairs in `[0,T] × [-10,10]³`.
    pub fn validate(&self, marks: &MarkMeasure, horizon: f64, pairs: usize) -> Result<()> {
        if self.kappa_prime.len() != marks.len() {
            return Err(Error::Config(format!(
                "kappa' has {} values but the mark measure has {} atoms",
                self.kappa_prime.len(),
                marks.len()
            )));
        }
        let mut rng = StreamFactory::new(0x5eed).stream(Purpose::Generic, 0, 0, 0);
        for _ in 0..pairs {
            let t = rng.gen_range(0.0..=horizon);
            let a: [f64; 3] = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
            let b: [f64; 3] = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)];
            let lhs = (self.eval(t, a[0], a[1], a[2]) - self.eval(t, b[0], b[1], b[2])).abs();
            let dist: f64 = a.iter().zip(&b).map(|(u, v)| (u - v).abs()).sum();
            if !lhs.is_finite() || lhs > self.lipschitz * dist * (1.0 + 1e-9) + 1e-12 {
                return Err(Error::Config(format!(
                    "generator {} violates its Lipschitz constant {} at t={t}, {a:?} vs {b:?}",
                    self.name, self.lipschitz
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy::LevyModel;

    #[test]
    fn validation() {
        let marks = LevyModel::with_atoms(0.0, 1.0, &[(1.0, 2.0)], 1.0).unwrap().mark_measure();
        let g = Generator::affine(0.5, -1.0, 0.25, 2.0, vec![1.0, 1.0]);
        assert!(g.validate(&marks, 1.0, 10_000).is_ok());
        assert_eq!(g.kappa_mass(&marks), 3.0);
        assert!(Generator::zero(vec![1.0]).validate(&marks, 1.0, 10).is_err());
        let lying = Generator::new("sq", Arc::new(|_, _, y, _| y * y), 1.0, vec![1.0, 1.0]).unwrap();
        assert!(lying.validate(&marks, 1.0, 10_000).is_err());
    }

    #[test]
    fn gradient_of_affine() {
        let g = Generator::affine(0.5, -1.0, 0.25, 2.0, vec![1.0]);
        let d = g.gradient(0.3, 1.0, 2.0, -3.0);
        assert!((d[0] - 0.5).abs() < 1e-8 && (d[1] + 1.0).abs() < 1e-8 && (d[2] - 0.25).abs() < 1e-8);
    }
}
