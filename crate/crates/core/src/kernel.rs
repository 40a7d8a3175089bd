//! Compactly supported smoothing kernels and Nadaraya-Watson weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulate::Dataset;

/// Default upper bound on the rate estimate.
pub const DEFAULT_RATE_CAP: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kernel {
    /// `c_p (4/3 - ‖u‖²)` on the unit ball; `c_1 = 1/2`. Bounded below by
    /// `c_p / 3` on its support.
    #[default]
    ModifiedEpanechnikov,
}

fn unit_ball_volume(p: usize) -> f64 {
    // V_p = π^{p/2} / Γ(p/2 + 1), via V_p = V_{p-2} · 2π / p
    let (mut v, start) = if p % 2 == 0 { (1.0, 2) } else { (2.0, 3) };
    let mut d = start;
    while d <= p {
        v *= 2.0 * std::f64::consts::PI / d as f64;
        d += 2;
    }
    v
}

impl Kernel {
    /// Normalising constant so the kernel integrates to one over `R^p`.
    pub fn normaliser(self, p: usize) -> f64 {
        match self {
            Kernel::ModifiedEpanechnikov => {
                let pf = p as f64;
                1.0 / (unit_ball_volume(p) * (4.0 / 3.0 - pf / (pf + 2.0)))
            }
        }
    }

    /// `K(u)` given `‖u‖²`, for dimension `p`.
    #[inline]
    pub fn eval_sq(self, norm_sq: f64, p: usize) -> f64 {
        match self {
            Kernel::ModifiedEpanechnikov => {
                if norm_sq <= 1.0 {
                    // (4 - 3‖u‖²)/6 keeps K(0) = 2/3 and K(1) = 1/6 correctly rounded
                    if p == 1 {
                        (4.0 - 3.0 * norm_sq) / 6.0
                    } else {
                        self.normaliser(p) * (4.0 - 3.0 * norm_sq) / 3.0
                    }
                } else {
                    0.0
                }
            }
        }
    }

    pub fn eval(self, u: &[f64]) -> f64 {
        self.eval_sq(u.iter().map(|v| v * v).sum(), u.len())
    }

    /// `K((z - z') / h)`; the `h^{-p}` factor cancels in every ratio we form.
    #[inline]
    pub fn eval_scaled(self, z: &[f64], other: &[f64], h: f64) -> f64 {
        let norm_sq: f64 = z
            .iter()
            .zip(other)
            .map(|(a, b)| {
                let u = (a - b) / h;
                u * u
            })
            .sum();
        self.eval_sq(norm_sq, z.len())
    }

    /// `K((z - z') / h)` for scalar covariates.
    #[inline]
    pub fn eval_scalar(self, z: f64, other: f64, h: f64) -> f64 {
        let u = (z - other) / h;
        self.eval_sq(u * u, 1)
    }
}

/// The modified Epanechnikov kernel at `u`.
pub fn kernel_value(u: &[f64]) -> f64 {
    Kernel::ModifiedEpanechnikov.eval(u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidth: f64,
    pub rate_cap: f64,
    #[serde(default)]
    pub kernel: Kernel,
}

impl KernelConfig {
    pub fn new(bandwidth: f64, rate_cap: f64) -> Result<Self> {
        let cfg = KernelConfig {
            bandwidth,
            rate_cap,
            kernel: Kernel::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        if !(self.rate_cap > 0.0 && self.rate_cap.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "rate cap must be positive, got {}",
                self.rate_cap
            )));
        }
        Ok(())
    }
}

/// Normalised kernel weights; `empty` marks an all-zero neighbourhood.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub values: Vec<f64>,
    pub empty: bool,
}

/// `ω_i = K_h(z - Z_i) / Σ_j K_h(z - Z_j)` over the records selected by `keep`.
/// Unselected records get weight 0.
pub(crate) fn weights_where(
    dataset: &Dataset,
    z: &[f64],
    config: &KernelConfig,
    keep: impl Fn(usize) -> bool,
) -> Weights {
    let raw: Vec<f64> = dataset
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if keep(i) {
                config.kernel.eval_scaled(z, &r.z, config.bandwidth)
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        Weights {
            values: raw.into_iter().map(|w| w / total).collect(),
            empty: false,
        }
    } else {
        Weights {
            values: vec![0.0; dataset.len()],
            empty: true,
        }
    }
}

pub fn kernel_weights(dataset: &Dataset, z: &[f64], config: &KernelConfig) -> Weights {
    weights_where(dataset, z, config, |_| true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::erlang::simpson;
    use crate::simulate::ObservationRecord;

    fn dataset_at(zs: &[f64]) -> Dataset {
        Dataset::new(
            zs.iter()
                .map(|&z| ObservationRecord {
                    z: vec![z],
                    states: vec![0, 1],
                    hit_time: 1.0,
                    delta: true,
                    limit_draw: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn kernel_values() {
        assert_eq!(kernel_value(&[0.0]), 2.0 / 3.0);
        assert_eq!(kernel_value(&[1.0]), 1.0 / 6.0);
        assert_eq!(kernel_value(&[-1.0]), 1.0 / 6.0);
        assert_eq!(kernel_value(&[1.5]), 0.0);
        let area = simpson(|u| kernel_value(&[u]), -1.0, 1.0, 2);
        assert!((area - 1.0).abs() < 1e-12);
    }

    #[test]
    fn multivariate_kernel_is_normalised() {
        assert!((unit_ball_volume(2) - std::f64::consts::PI).abs() < 1e-15);
        assert!((unit_ball_volume(3) - 4.0 / 3.0 * std::f64::consts::PI).abs() < 1e-14);
        assert_eq!(Kernel::ModifiedEpanechnikov.normaliser(1), 0.5);
        // 2-d: integrate in polar coordinates, 2π ∫ K(r) r dr
        let k = Kernel::ModifiedEpanechnikov;
        let mass = 2.0 * std::f64::consts::PI * simpson(|r| k.eval_sq(r * r, 2) * r, 0.0, 1.0, 64);
        assert!((mass - 1.0).abs() < 1e-12);
        // bounded away from zero on the support
        assert!(k.eval(&[0.6, 0.8]) > 0.0);
    }

    #[test]
    fn identical_covariates_give_uniform_weights() {
        let d = dataset_at(&[0.3; 4]);
        let w = kernel_weights(&d, &[0.3], &KernelConfig::new(0.1, 5.0).unwrap());
        assert!(!w.empty);
        assert!(w.values.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_point_in_bandwidth() {
        let d = dataset_at(&[0.1, 0.5, 0.9]);
        let w = kernel_weights(&d, &[0.5], &KernelConfig::new(0.2, 5.0).unwrap());
        assert_eq!(w.values, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn empty_neighbourhood_is_flagged() {
        let d = dataset_at(&[0.1, 0.9]);
        let w = kernel_weights(&d, &[0.5], &KernelConfig::new(0.2, 5.0).unwrap());
        assert!(w.empty);
        assert_eq!(w.values, vec![0.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        assert!(KernelConfig::new(0.0, 5.0).is_err());
        assert!(KernelConfig::new(0.1, -1.0).is_err());
        assert!(KernelConfig::new(f64::NAN, 5.0).is_err());
    }
}
