//! Axis-aligned Gaussian mixtures: the synthetic data distributions behind
//! every toy experiment, with exact densities for the grid oracle.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A source of i.i.d. d-dimensional data points.
pub trait DataSampler {
    fn dim(&self) -> usize;
    fn sample_into(&self, rng: &mut ChaCha8Rng, out: &mut [f64]);
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub mean: Vec<f64>,
    /// Diagonal of the covariance matrix.
    pub var: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<MixtureComponent>,
}

impl GaussianMixture {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::input("mixture needs at least one component"));
        }
        let dim = components[0].mean.len();
        let mut total = 0.0;
        for c in &components {
            if c.mean.len() != dim || c.var.len() != dim {
                return Err(Error::Dimension {
                    context: "GaussianMixture component",
                    expected: dim,
                    got: c.mean.len().min(c.var.len()),
                });
            }
            if c.weight <= 0.0 || c.var.iter().any(|&v| v <= 0.0) {
                return Err(Error::input("component weights and variances must be positive"));
            }
            total += c.weight;
        }
        let components = components
            .into_iter()
            .map(|mut c| {
                c.weight /= total;
                c
            })
            .collect();
        Ok(GaussianMixture { dim, components })
    }

    /// Single isotropic Gaussian.
    pub fn isotropic(mean: &[f64], var: f64) -> Self {
        GaussianMixture::new(vec![MixtureComponent {
            mean: mean.to_vec(),
            var: vec![var; mean.len()],
            weight: 1.0,
        }])
        .unwrap()
    }

    pub fn standard_normal(dim: usize) -> Self {
        GaussianMixture::isotropic(&vec![0.0; dim], 1.0)
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        let mut p = 0.0;
        for c in &self.components {
            let mut log_norm = 0.0;
            let mut quad = 0.0;
            for i in 0..self.dim {
                log_norm += (2.0 * std::f64::consts::PI * c.var[i]).ln();
                let d = x[i] - c.mean[i];
                quad += d * d / c.var[i];
            }
            p += c.weight * (-0.5 * (quad + log_norm)).exp();
        }
        p
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for c in &self.components {
            for i in 0..self.dim {
                m[i] += c.weight * c.mean[i];
            }
        }
        m
    }
}

impl DataSampler for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample_into(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u <= acc {
                chosen = i;
                break;
            }
        }
        let c = &self.components[chosen];
        for i in 0..self.dim {
            let z: f64 = rng.sample(StandardNormal);
            out[i] = c.mean[i] + c.var[i].sqrt() * z;
        }
    }
}

/// Degenerate distribution at a single point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMass(pub Vec<f64>);

impl DataSampler for PointMass {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn sample_into(&self, _rng: &mut ChaCha8Rng, out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn weights_normalize() {
        let m = GaussianMixture::new(vec![
            MixtureComponent {
                mean: vec![0.0],
                var: vec![1.0],
                weight: 2.0,
            },
            MixtureComponent {
                mean: vec![3.0],
                var: vec![1.0],
                weight: 6.0,
            },
        ])
        .unwrap();
        assert!((m.components()[0].weight - 0.25).abs() < 1e-12);
        assert!((m.mean()[0] - 2.25).abs() < 1e-12);
    }

    #[test]
    fn standard_normal_density_at_zero() {
        let m = GaussianMixture::standard_normal(1);
        let expected = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((m.density(&[0.0]) - expected).abs() < 1e-12);
    }

    #[test]
    fn sample_moments_match() {
        let m = GaussianMixture::isotropic(&[1.0, -2.0], 0.25);
        let mut rng = seeded_rng(5, &[1]);
        let n = 20_000;
        let mut sum = [0.0; 2];
        let mut buf = [0.0; 2];
        for _ in 0..n {
            m.sample_into(&mut rng, &mut buf);
            sum[0] += buf[0];
            sum[1] += buf[1];
        }
        assert!((sum[0] / n as f64 - 1.0).abs() < 0.02);
        assert!((sum[1] / n as f64 + 2.0).abs() < 0.02);
    }
}
