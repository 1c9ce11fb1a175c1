use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Smallest variance any Gaussian density or sample is allowed to use.
pub const VARIANCE_FLOOR: f64 = 1e-8;
pub const LOG_VARIANCE_MIN: f64 = -10.0;
pub const LOG_VARIANCE_MAX: f64 = 10.0;

/// Diagonal Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, log_variance: Vec<f64>) -> Result<Self> {
        if mean.len() != log_variance.len() {
            return Err(shape_err(format!(
                "mean has {} entries, log-variance {}",
                mean.len(),
                log_variance.len()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) || log_variance.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidInput("Gaussian parameters must be finite".into()));
        }
        Ok(Self { mean, log_variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_variance
            .iter()
            .map(|&lv| lv.exp().max(VARIANCE_FLOOR))
            .collect()
    }

    /// `mean + σ ⊙ noise`.
    pub fn sample_with_noise(&self, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.dim() {
            return Err(shape_err("noise length differs from Gaussian dimension"));
        }
        Ok(self
            .mean
            .iter()
            .zip(self.variance())
            .zip(noise)
            .map(|((m, var), e)| m + var.sqrt() * e)
            .collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let noise: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.sample_with_noise(&noise).expect("noise sized to dim")
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        diag_log_density(x.iter().copied(), self.mean.iter().copied(), self.variance().into_iter())
    }

    /// `KL(self ‖ N(0, I))` in closed form.
    pub fn kl_to_standard_normal(&self) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_variance)
            .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
            .sum()
    }
}

pub(crate) fn diag_log_density(
    x: impl Iterator<Item = f64>,
    mean: impl Iterator<Item = f64>,
    var: impl Iterator<Item = f64>,
) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    x.zip(mean)
        .zip(var)
        .map(|((x, m), v)| {
            let v = v.max(VARIANCE_FLOOR);
            -0.5 * (ln_2pi + v.ln() + (x - m) * (x - m) / v)
        })
        .sum()
}

/// Per-row diagonal Gaussians read off a network head.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBatch {
    pub mean: Array2<f64>,
    /// Clamped to `[LOG_VARIANCE_MIN, LOG_VARIANCE_MAX]`.
    pub log_variance: Array2<f64>,
}

impl GaussianBatch {
    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn row(&self, i: usize) -> GaussianParams {
        GaussianParams {
            mean: self.mean.row(i).to_vec(),
            log_variance: self.log_variance.row(i).to_vec(),
        }
    }

    pub fn rows(&self) -> Vec<GaussianParams> {
        (0..self.len()).map(|i| self.row(i)).collect()
    }

    /// Reparameterized samples `mean + exp(lv / 2) ⊙ noise`.
    pub fn sample_with_noise(&self, noise: &Array2<f64>) -> Array2<f64> {
        let std = self.log_variance.mapv(|lv| lv.exp().max(VARIANCE_FLOOR).sqrt());
        &self.mean + &(std * noise)
    }
}

/// Splits a `2·dim`-wide head into mean (first half) and clamped
/// log-variance (second half).
pub fn split_gaussian_head(head: &Array2<f64>, dim: usize) -> Result<GaussianBatch> {
    if head.ncols() != 2 * dim {
        return Err(shape_err(format!(
            "Gaussian head has width {}, expected {}",
            head.ncols(),
            2 * dim
        )));
    }
    Ok(GaussianBatch {
        mean: head.slice(s![.., ..dim]).to_owned(),
        log_variance: head
            .slice(s![.., dim..])
            .mapv(|v| v.clamp(LOG_VARIANCE_MIN, LOG_VARIANCE_MAX)),
    })
}

/// Gradient with respect to the raw head given gradients on mean and the
/// clamped log-variance. Clamped entries receive zero gradient.
pub fn gaussian_head_backward(
    head: &Array2<f64>,
    d_mean: &Array2<f64>,
    d_log_variance: &Array2<f64>,
) -> Array2<f64> {
    let dim = d_mean.ncols();
    let mut out = Array2::zeros(head.raw_dim());
    out.slice_mut(s![.., ..dim]).assign(d_mean);
    let raw_lv = head.slice(s![.., dim..]);
    let mut dst = out.slice_mut(s![.., dim..]);
    ndarray::Zip::from(&mut dst)
        .and(&raw_lv)
        .and(d_log_variance)
        .for_each(|o, &raw, &g| {
            *o = if (LOG_VARIANCE_MIN..=LOG_VARIANCE_MAX).contains(&raw) {
                g
            } else {
                0.0
            }
        });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fixed_noise_formula() {
        let g = GaussianParams::new(vec![2.0, 2.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(g.sample_with_noise(&[1.0, -1.0]).unwrap(), vec![3.0, 1.0]);
    }

    #[test]
    fn vanishing_variance_returns_mean() {
        let g = GaussianParams::new(vec![0.3, -4.0], vec![f64::NEG_INFINITY, -1e6]).unwrap();
        for e in [-3.0, -1.2, 0.0, 0.5, 3.0] {
            let s = g.sample_with_noise(&[e, -e]).unwrap();
            assert!((s[0] - 0.3).abs() < 1e-3);
            assert!((s[1] + 4.0).abs() < 1e-3);
        }
    }

    #[test]
    fn monte_carlo_matches_standard_normal() {
        let g = GaussianParams::new(vec![0.0], vec![0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| g.sample(&mut rng)[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn kl_of_standard_normal_is_zero() {
        let g = GaussianParams::new(vec![0.0; 4], vec![0.0; 4]).unwrap();
        assert_eq!(g.kl_to_standard_normal(), 0.0);
        let h = GaussianParams::new(vec![1.0, -0.5], vec![0.3, -0.2]).unwrap();
        assert!(h.kl_to_standard_normal() > 0.0);
    }

    #[test]
    fn head_split_clamps_log_variance() {
        let head = ndarray::array![[1.0, 2.0, -30.0, 0.5]];
        let g = split_gaussian_head(&head, 2).unwrap();
        assert_eq!(g.mean, ndarray::array![[1.0, 2.0]]);
        assert_eq!(g.log_variance, ndarray::array![[-10.0, 0.5]]);
        let back = gaussian_head_backward(
            &head,
            &ndarray::array![[1.0, 1.0]],
            &ndarray::array![[1.0, 1.0]],
        );
        assert_eq!(back, ndarray::array![[1.0, 1.0, 0.0, 1.0]]);
    }
}
