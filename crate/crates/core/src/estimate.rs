//! Kernel estimators of the holding rate and jump matrix, terminal-set
//! discovery, the truncated coefficient recursion, and the plug-in density,
//! survival and cure-rate estimators built on them.

use std::collections::BTreeSet;

use crate::erlang::{erlang_mixture_density, erlang_mixture_survival};
use crate::error::{Error, Result};
use crate::kernel::{kernel_weights, weights_where, KernelConfig, Weights};
use crate::model::TransitionMatrix;
use crate::oracle::{check_k, CoefficientTable, Partition};
use crate::simulate::Dataset;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateEstimate {
    pub value: f64,
    /// No usable record had positive weight; `value` is the cap.
    pub degenerate: bool,
}

/// `λ̂ = (Σ_i ω_i E_{M_i}/M_i)^{-1} ∧ λ̃`. Records with `M = 0` carry no
/// holding-time information and are left out of the weights.
pub fn estimate_rate(dataset: &Dataset, z: &[f64], config: &KernelConfig) -> RateEstimate {
    let w = weights_where(dataset, z, config, |i| dataset.records[i].m() > 0);
    if w.empty {
        return RateEstimate {
            value: config.rate_cap,
            degenerate: true,
        };
    }
    let mean_holding: f64 = dataset
        .records
        .iter()
        .zip(&w.values)
        .filter_map(|(r, &wi)| r.mean_holding_time().map(|u| wi * u))
        .sum();
    let raw = 1.0 / mean_holding;
    RateEstimate {
        value: if raw < config.rate_cap { raw } else { config.rate_cap },
        degenerate: false,
    }
}

/// Final states of the uncensored records.
pub fn observed_terminal_set(dataset: &Dataset) -> BTreeSet<usize> {
    dataset
        .records
        .iter()
        .filter(|r| r.delta)
        .map(|r| r.last_state())
        .collect()
}

/// `p̂(x,x') = Σ_j ω_j N_j^{x,x'} / Σ_j ω_j N_j^x`; rows with a zero
/// denominator are left at zero.
pub fn estimate_transition_matrix_with(dataset: &Dataset, weights: &Weights, n_states: usize) -> Result<TransitionMatrix> {
    let mut counts = TransitionMatrix::zeros(n_states);
    let mut visits = vec![0.0; n_states];
    for (r, &w) in dataset.records.iter().zip(&weights.values) {
        if w == 0.0 {
            continue;
        }
        for pair in r.states.windows(2) {
            let (x, y) = (pair[0], pair[1]);
            if x >= n_states || y >= n_states {
                return Err(Error::InvalidArgument(format!(
                    "state label {} exceeds the {n_states} declared states",
                    x.max(y) + 1
                )));
            }
            counts.set(x, y, counts.get(x, y) + w);
            visits[x] += w;
        }
    }
    for (x, &total) in visits.iter().enumerate() {
        if total > 0.0 {
            for v in counts.row_mut(x) {
                *v /= total;
            }
        }
    }
    Ok(counts)
}

pub fn estimate_transition_matrix(
    dataset: &Dataset,
    z: &[f64],
    config: &KernelConfig,
    n_states: usize,
) -> Result<TransitionMatrix> {
    estimate_transition_matrix_with(dataset, &kernel_weights(dataset, z, config), n_states)
}

/// Truncated coefficient recursion on an estimated matrix and terminal set.
/// States with no path into `a_n` in the support graph of `p_hat` are
/// zeroed explicitly.
pub fn estimate_coefficients(p_hat: &TransitionMatrix, a_n: &BTreeSet<usize>, k: usize) -> Result<CoefficientTable> {
    check_k(k)?;
    let n = p_hat.n();
    let terminal: Vec<bool> = (0..n).map(|x| a_n.contains(&x)).collect();
    let mut table = CoefficientTable::from_recursion(p_hat, &terminal, k);
    let partition = Partition::from_support(p_hat, &terminal);
    for &x in &partition.isolated {
        for row in table.values.iter_mut() {
            row[x] = 0.0;
        }
    }
    Ok(table)
}

/// Everything estimated at one query covariate.
#[derive(Debug, Clone)]
pub struct FittedEstimator {
    pub z: Vec<f64>,
    pub lambda_hat: f64,
    pub rate_degenerate: bool,
    /// No record (usable or not) fell inside the bandwidth.
    pub weights_empty: bool,
    pub p_hat: TransitionMatrix,
    pub a_n: BTreeSet<usize>,
    pub coeffs: CoefficientTable,
    pub h: f64,
    pub k: usize,
}

/// Fits every estimator at `z` from a shared read-only dataset.
pub fn fit(dataset: &Dataset, z: &[f64], config: &KernelConfig, n_states: usize, k: usize) -> Result<FittedEstimator> {
    config.validate()?;
    check_k(k)?;
    if dataset.is_empty() {
        return Err(Error::InsufficientData("cannot fit on an empty dataset".into()));
    }
    let a_n = observed_terminal_set(dataset);
    let rate = estimate_rate(dataset, z, config);
    let weights = kernel_weights(dataset, z, config);
    let p_hat = estimate_transition_matrix_with(dataset, &weights, n_states)?;
    let mut coeffs = estimate_coefficients(&p_hat, &a_n, k)?;
    coeffs.z = Some(z.to_vec());
    Ok(FittedEstimator {
        z: z.to_vec(),
        lambda_hat: rate.value,
        rate_degenerate: rate.degenerate,
        weights_empty: weights.empty,
        p_hat,
        a_n,
        coeffs,
        h: config.bandwidth,
        k,
    })
}

impl FittedEstimator {
    /// Assembles a fit from given components, e.g. exact model inputs.
    pub fn from_parts(z: &[f64], lambda_hat: f64, p_hat: TransitionMatrix, a_n: BTreeSet<usize>, k: usize) -> Result<Self> {
        let mut coeffs = estimate_coefficients(&p_hat, &a_n, k)?;
        coeffs.z = Some(z.to_vec());
        Ok(FittedEstimator {
            z: z.to_vec(),
            lambda_hat,
            rate_degenerate: false,
            weights_empty: false,
            p_hat,
            a_n,
            coeffs,
            h: f64::NAN,
            k,
        })
    }

    pub fn n_states(&self) -> usize {
        self.p_hat.n()
    }

    /// Whether any of the degenerate-fit flags is raised.
    pub fn is_degenerate(&self) -> bool {
        self.rate_degenerate || self.weights_empty || self.a_n.is_empty()
    }

    /// `Σ_{j=1}^{k} ĉ_j(x) Erlang(j, λ̂)(t)`.
    pub fn density(&self, x: usize, t: f64) -> f64 {
        erlang_mixture_density(&self.coeffs.mixture_weights(x), self.lambda_hat, t)
    }

    /// `1 - Σ_j ĉ_j(x) P(Erlang(j, λ̂) ≤ t)`.
    pub fn survival(&self, x: usize, t: f64) -> f64 {
        erlang_mixture_survival(&self.coeffs.mixture_weights(x), self.lambda_hat, t)
    }

    /// `0` on `A_n`, else `1 - Σ_{j=1}^{k} ĉ_j(x)` clipped to `[0, 1]`.
    pub fn cure_rate(&self, x: usize) -> f64 {
        if self.a_n.contains(&x) {
            return 0.0;
        }
        (1.0 - self.coeffs.hitting_mass(x)).clamp(0.0, 1.0)
    }
}

pub fn estimate_density(fit: &FittedEstimator, x: usize, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("time must be nonnegative, got {t}")));
    }
    Ok(fit.density(x, t))
}

pub fn estimate_cure_rate(fit: &FittedEstimator, x: usize) -> f64 {
    fit.cure_rate(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::oracle::{true_coefficients, true_density};
    use crate::simulate::{simulate_dataset, ObservationRecord};

    fn record(z: f64, states: &[usize], hit_time: f64, delta: bool) -> ObservationRecord {
        ObservationRecord {
            z: vec![z],
            states: states.to_vec(),
            hit_time,
            delta,
            limit_draw: None,
        }
    }

    fn cfg(h: f64) -> KernelConfig {
        KernelConfig::new(h, 5.0).unwrap()
    }

    #[test]
    fn rate_of_single_record() {
        let d = Dataset::new(vec![record(0.5, &[0, 3, 4], 1.0, true)]).unwrap();
        let r = estimate_rate(&d, &[0.5], &cfg(0.1));
        assert_eq!(r.value, 2.0);
        assert!(!r.degenerate);
    }

    #[test]
    fn rate_cap_binds() {
        let d = Dataset::new(vec![record(0.5, &[0, 1], 0.1, false)]).unwrap();
        assert_eq!(estimate_rate(&d, &[0.5], &cfg(0.1)).value, 5.0);
    }

    #[test]
    fn degenerate_rate_returns_cap() {
        let d = Dataset::new(vec![record(0.5, &[4], 0.0, true), record(0.9, &[0, 1], 1.0, false)]).unwrap();
        let r = estimate_rate(&d, &[0.5], &cfg(0.1));
        assert!(r.degenerate);
        assert_eq!(r.value, 5.0);
    }

    #[test]
    fn terminal_set_discovery() {
        let censored = Dataset::new(vec![record(0.5, &[0, 1], 1.0, false)]).unwrap();
        assert!(observed_terminal_set(&censored).is_empty());
        let d = Dataset::new(vec![
            record(0.5, &[0, 4], 1.0, true),
            record(0.5, &[1, 5], 1.0, true),
            record(0.5, &[0, 2], 1.0, false),
        ])
        .unwrap();
        assert_eq!(observed_terminal_set(&d), BTreeSet::from([4, 5]));
    }

    #[test]
    fn single_path_transition_matrix() {
        let d = Dataset::new(vec![record(0.5, &[0, 3, 4], 1.0, true)]).unwrap();
        let p = estimate_transition_matrix(&d, &[0.5], &cfg(0.1), 6).unwrap();
        assert_eq!(p.get(0, 3), 1.0);
        assert_eq!(p.get(3, 4), 1.0);
        for x in [1, 2, 4, 5] {
            assert!(p.row(x).iter().all(|&v| v == 0.0));
        }
        let far = estimate_transition_matrix(&d, &[0.9], &cfg(0.1), 6).unwrap();
        assert_eq!(far, TransitionMatrix::zeros(6));
        assert!(estimate_transition_matrix(&d, &[0.5], &cfg(0.1), 3).is_err());
    }

    #[test]
    fn empty_terminal_set_gives_zero_table() {
        let a = ModelSpec::builtin("model-a").unwrap();
        let t = estimate_coefficients(&a.transition_at(&[0.5]), &BTreeSet::new(), 20).unwrap();
        assert!(t.values.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn exact_inputs_reproduce_the_oracle() {
        let a = ModelSpec::builtin("model-a").unwrap();
        let z = [0.5];
        let est = estimate_coefficients(&a.transition_at(&z), &BTreeSet::from([4, 5]), 130).unwrap();
        let truth = true_coefficients(&a, &z, 130).unwrap();
        for j in 0..=130 {
            for x in 0..6 {
                assert!((est.get(j, x) - truth.get(j, x)).abs() <= 1e-14);
            }
        }
        let fit = FittedEstimator::from_parts(&z, a.rate_at(&z), a.transition_at(&z), BTreeSet::from([4, 5]), 130).unwrap();
        for x in 0..6 {
            for t in [0.0, 0.3, 1.0, 4.0, 20.0] {
                let f = true_density(&a, &z, x, t, 130).unwrap();
                let g = estimate_density(&fit, x, t).unwrap();
                assert!((f - g).abs() <= 1e-12 * f.abs().max(f64::MIN_POSITIVE));
            }
        }
    }

    #[test]
    fn zero_row_kills_coefficients() {
        let mut p = TransitionMatrix::zeros(3);
        p.set(1, 2, 1.0);
        let t = estimate_coefficients(&p, &BTreeSet::from([2]), 10).unwrap();
        assert!((1..=10).all(|j| t.get(j, 0) == 0.0));
        assert_eq!(t.get(1, 1), 1.0);
    }

    #[test]
    fn density_and_cure_rate_of_simple_fit() {
        let mut p = TransitionMatrix::zeros(2);
        p.set(0, 1, 1.0);
        let fit = FittedEstimator::from_parts(&[0.5], 2.0, p, BTreeSet::from([1]), 5).unwrap();
        assert_eq!(estimate_density(&fit, 0, 0.0).unwrap(), 2.0);
        assert_eq!(estimate_density(&fit, 1, 0.7).unwrap(), 0.0);
        assert_eq!(estimate_cure_rate(&fit, 1), 0.0);
        assert_eq!(estimate_cure_rate(&fit, 0), 0.0);
        assert!((fit.survival(0, 1.0) - (-2.0f64).exp()).abs() < 1e-15);
        assert!(estimate_density(&fit, 0, -1.0).is_err());
    }

    #[test]
    fn model_b_isolated_state_stays_cured() {
        let b = ModelSpec::builtin("model-b").unwrap();
        let data = simulate_dataset(&b, 400, 5).unwrap();
        for z in [0.2, 0.3, 0.6] {
            let fit = fit(&data, &[z], &cfg(0.15), 7, 130).unwrap();
            assert!((0..=130).all(|j| fit.coeffs.get(j, 4) == 0.0));
            assert_eq!(fit.cure_rate(4), 1.0);
        }
    }

    #[test]
    fn out_of_bandwidth_record_changes_nothing() {
        let a = ModelSpec::builtin("model-a").unwrap();
        let mut data = simulate_dataset(&a, 200, 9).unwrap();
        data.records.retain(|r| r.z[0] < 0.7);
        let before = fit(&data, &[0.3], &cfg(0.2), 6, 50).unwrap();
        data.records.push(record(0.95, &[1, 2, 0, 3, 4], 2.0, true));
        let after = fit(&data, &[0.3], &cfg(0.2), 6, 50).unwrap();
        assert_eq!(before.lambda_hat, after.lambda_hat);
        assert_eq!(before.p_hat, after.p_hat);
        assert_eq!(before.coeffs, after.coeffs);
    }
}
