//! Synthetic Gaussian mixtures whose clusters lie along a common direction, so
//! that inserting them cluster by cluster drifts the data steadily.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::vecs::Vectors;
use crate::error::{Error, Result};
use crate::kd::{random_rotation, rotate};
use crate::rng::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub n: usize,
    pub dim: usize,
    pub clusters: usize,
    /// Distance between consecutive cluster centers, in units of the
    /// largest within-cluster standard deviation.
    pub drift: f64,
    /// Ratio between successive standard deviations of the shared
    /// covariance, which is anisotropic in a random basis.
    pub decay: f64,
    pub seed: u64,
}

impl MixtureConfig {
    pub fn new(n: usize, dim: usize, clusters: usize, seed: u64) -> Self {
        MixtureConfig { n, dim, clusters, drift: 10.0, decay: 0.93, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.dim == 0 || self.clusters == 0 {
            return Err(Error::Config("mixture needs positive n, dim and clusters".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) || !(self.drift >= 0.0) {
            return Err(Error::Config(format!("bad mixture shape: decay {}, drift {}", self.decay, self.drift)));
        }
        Ok(())
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws the mixture. Cluster weights vary in `[0.5, 1.5]` so cluster sizes
/// are uneven. Returns the vectors and the cluster each one came from.
pub fn drifting_mixture(config: &MixtureConfig) -> Result<(Vectors<f32>, Vec<usize>)> {
    config.validate()?;
    let d = config.dim;
    let mut rng = rng_for(config.seed, 0);
    let basis = random_rotation(d, &mut rng);
    let scales: Vec<f64> = (0..d).map(|i| config.decay.powi(i as i32)).collect();
    let direction: Vec<f64> = {
        let g: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        g.iter().map(|v| v / norm).collect()
    };
    let centers: Vec<Vec<f64>> = (0..config.clusters)
        .map(|c| {
            direction
                .iter()
                .map(|u| c as f64 * config.drift * u + 0.5 * normal(&mut rng) / (d as f64).sqrt())
                .collect()
        })
        .collect();
    let weights: Vec<f64> = (0..config.clusters).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = weights.iter().sum();

    let mut data = Vec::with_capacity(config.n * d);
    let mut labels = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let mut u = rng.random_range(0.0..total);
        let mut c = 0;
        while c + 1 < config.clusters && u >= weights[c] {
            u -= weights[c];
            c += 1;
        }
        let z: Vec<f64> = scales.iter().map(|s| s * normal(&mut rng)).collect();
        let x = rotate(&basis, &z);
        data.extend(x.iter().zip(&centers[c]).map(|(a, b)| (a + b) as f32));
        labels.push(c);
    }
    Ok((Vectors::new(d, data)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_shaped() {
        let cfg = MixtureConfig::new(2000, 8, 4, 3);
        let (a, la) = drifting_mixture(&cfg).unwrap();
        let (b, lb) = drifting_mixture(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(a.len(), 2000);
        for c in 0..4 {
            assert!(la.iter().filter(|&&l| l == c).count() > 150);
        }
    }

    #[test]
    fn cluster_means_step_along_one_direction() {
        let mut cfg = MixtureConfig::new(8000, 6, 3, 9);
        cfg.drift = 10.0;
        let (v, labels) = drifting_mixture(&cfg).unwrap();
        let mean = |c: usize| -> Vec<f64> {
            let rows: Vec<&[f32]> = (0..v.len()).filter(|&i| labels[i] == c).map(|i| v.row(i)).collect();
            (0..6).map(|j| rows.iter().map(|r| r[j] as f64).sum::<f64>() / rows.len() as f64).collect()
        };
        let (m0, m1, m2) = (mean(0), mean(1), mean(2));
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!((dist(&m0, &m1) - 10.0).abs() < 1.0);
        assert!((dist(&m0, &m2) - 20.0).abs() < 1.0);
    }
}
