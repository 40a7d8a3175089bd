//! Exact (truncated) hitting-time quantities for a known model.
//!
//! `c_j(x, z) = P(S = j | Y_0 = x, Z = z)` obeys the one-step recursion
//! `c_0 = 1_A`, `c_j(x) = 1{x ∉ A} Σ_{x'} P^(z)(x, x') c_{j-1}(x')`. The
//! hitting-time density is the Erlang mixture `Σ_{j≥1} c_j Erlang(j, λ_z)`.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::erlang::{erlang_mixture_density, simpson, tail_horizon};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, TransitionMatrix};

/// Largest truncation order; Erlang terms past it fall below double precision.
pub const MAX_K: usize = 130;

/// A coefficient is reported as a non-negligible tail above this level.
pub const TAIL_FLAG_LEVEL: f64 = 1e-12;

/// Panels used for normalisation and risk quadrature.
pub const DEFAULT_PANELS: usize = 1 << 14;

pub(crate) fn check_k(k: usize) -> Result<()> {
    if k > MAX_K {
        return Err(Error::TruncationCeiling {
            requested: k,
            ceiling: MAX_K,
        });
    }
    Ok(())
}

/// `values[j][x] = c_j(x, z)` for `j = 0..=k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTable {
    pub k: usize,
    pub values: Vec<Vec<f64>>,
    pub z: Option<Vec<f64>>,
}

impl CoefficientTable {
    /// Runs the truncated recursion with transition matrix `p` and terminal mask.
    pub fn from_recursion(p: &TransitionMatrix, terminal: &[bool], k: usize) -> Self {
        let n = p.n();
        assert_eq!(terminal.len(), n, "terminal mask length");
        let mut values = Vec::with_capacity(k + 1);
        values.push(terminal.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect::<Vec<f64>>());
        for j in 1..=k {
            let prev: &Vec<f64> = &values[j - 1];
            let next: Vec<f64> = (0..n)
                .map(|x| {
                    if terminal[x] {
                        0.0
                    } else {
                        p.row(x).iter().zip(prev).map(|(pxy, c)| pxy * c).sum()
                    }
                })
                .collect();
            values.push(next);
        }
        CoefficientTable { k, values, z: None }
    }

    pub fn n_states(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    #[inline]
    pub fn get(&self, j: usize, x: usize) -> f64 {
        if j > self.k {
            0.0
        } else {
            self.values[j][x]
        }
    }

    /// `(c_1(x), ..., c_k(x))`, the weights of the Erlang mixture.
    pub fn mixture_weights(&self, x: usize) -> Vec<f64> {
        (1..=self.k).map(|j| self.values[j][x]).collect()
    }

    /// `Σ_{j=1}^{k} c_j(x)`.
    pub fn hitting_mass(&self, x: usize) -> f64 {
        (1..=self.k).map(|j| self.values[j][x]).sum()
    }

    /// `Σ_{j=0}^{k} c_j(x)`.
    pub fn total_mass(&self, x: usize) -> f64 {
        (0..=self.k).map(|j| self.values[j][x]).sum()
    }
}

/// Connectivity of the non-terminal states to the terminal set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub terminal: Vec<usize>,
    /// Non-terminal states with a path into the terminal set.
    pub connected: Vec<usize>,
    /// Non-terminal states that can never reach it.
    pub isolated: Vec<usize>,
}

impl Partition {
    /// Backward breadth-first search from the terminal set over edges with
    /// strictly positive weight.
    pub fn from_support(p: &TransitionMatrix, terminal: &[bool]) -> Self {
        let n = p.n();
        let mut reaches = terminal.to_vec();
        let mut queue: VecDeque<usize> = (0..n).filter(|&x| terminal[x]).collect();
        while let Some(y) = queue.pop_front() {
            for x in 0..n {
                if !reaches[x] && p.get(x, y) > 0.0 {
                    reaches[x] = true;
                    queue.push_back(x);
                }
            }
        }
        let mut part = Partition {
            terminal: Vec::new(),
            connected: Vec::new(),
            isolated: Vec::new(),
        };
        for x in 0..n {
            if terminal[x] {
                part.terminal.push(x);
            } else if reaches[x] {
                part.connected.push(x);
            } else {
                part.isolated.push(x);
            }
        }
        part
    }

    pub fn is_isolated(&self, x: usize) -> bool {
        self.isolated.binary_search(&x).is_ok()
    }
}

pub fn true_coefficients(spec: &ModelSpec, z: &[f64], k: usize) -> Result<CoefficientTable> {
    check_k(k)?;
    let mut table = CoefficientTable::from_recursion(&spec.transition_at(z), &spec.terminal_mask(), k);
    table.z = Some(z.to_vec());
    Ok(table)
}

/// Truncated hitting-time density `Σ_{j=1}^{k} c_j(x,z) Erlang(j, λ_z)(t)`.
pub fn true_density(spec: &ModelSpec, z: &[f64], x: usize, t: f64, k: usize) -> Result<f64> {
    check_k(k)?;
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("time must be nonnegative, got {t}")));
    }
    let table = true_coefficients(spec, z, k)?;
    Ok(erlang_mixture_density(&table.mixture_weights(x), spec.rate_at(z), t))
}

/// Composite Simpson integral of the truncated density over `[0, T_max]`,
/// `T_max = (k + 10√k)/λ_z`.
pub fn integrate_true_density(spec: &ModelSpec, z: &[f64], x: usize, k: usize, panels: usize) -> Result<f64> {
    check_k(k)?;
    let table = true_coefficients(spec, z, k)?;
    let weights = table.mixture_weights(x);
    let lambda = spec.rate_at(z);
    Ok(simpson(
        |t| erlang_mixture_density(&weights, lambda, t),
        0.0,
        tail_horizon(k, lambda),
        panels,
    ))
}

pub fn reachable_partition(spec: &ModelSpec, z: &[f64]) -> Partition {
    Partition::from_support(&spec.transition_at(z), &spec.terminal_mask())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CureRate {
    pub value: f64,
    /// Set when the last computed coefficient exceeds [`TAIL_FLAG_LEVEL`].
    pub tail_truncated: bool,
}

/// `P(T = ∞ | Y_0 = x, Z = z)`, truncated at `k` coefficients.
pub fn true_cure_rate(spec: &ModelSpec, z: &[f64], x: usize, k: usize) -> Result<CureRate> {
    check_k(k)?;
    if spec.is_terminal(x) {
        return Ok(CureRate {
            value: 0.0,
            tail_truncated: false,
        });
    }
    if reachable_partition(spec, z).is_isolated(x) {
        return Ok(CureRate {
            value: 1.0,
            tail_truncated: false,
        });
    }
    let table = true_coefficients(spec, z, k)?;
    Ok(CureRate {
        value: 1.0 - table.hitting_mass(x),
        tail_truncated: table.get(k, x) > TAIL_FLAG_LEVEL,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    /// `exp(intercept)`.
    pub m_hat: f64,
    /// `exp(slope)`; 0 when the tail is identically zero.
    pub r_hat: f64,
    pub pass: bool,
}

impl DecayFit {
    /// Tail bound `λ m² r^{2k+1} / (2(1 - r))` on the integrated squared
    /// truncation error, or `None` for a failed or degenerate fit.
    pub fn truncation_bound(&self, lambda: f64, k: usize) -> Option<f64> {
        if !self.pass || !(self.r_hat > 0.0 && self.r_hat < 1.0) {
            return None;
        }
        Some(lambda * self.m_hat * self.m_hat * self.r_hat.powi(2 * k as i32 + 1) / (2.0 * (1.0 - self.r_hat)))
    }
}

/// Least-squares fit of `ln sup_x c_j` against `j` over `j ≥ k/2`, skipping
/// exact zeros. Passes iff the fitted slope is negative.
pub fn geometric_decay_check(table: &CoefficientTable) -> Result<DecayFit> {
    if table.k < 20 {
        return Err(Error::InvalidArgument(format!(
            "decay fit needs k >= 20, got {}",
            table.k
        )));
    }
    let points: Vec<(f64, f64)> = (table.k.div_ceil(2)..=table.k)
        .filter_map(|j| {
            let sup = table.values[j].iter().copied().fold(0.0, f64::max);
            (sup > 0.0).then(|| (j as f64, sup.ln()))
        })
        .collect();
    match points.len() {
        0 => Ok(DecayFit {
            m_hat: 0.0,
            r_hat: 0.0,
            pass: true,
        }),
        1 => Ok(DecayFit {
            m_hat: f64::NAN,
            r_hat: f64::NAN,
            pass: false,
        }),
        n => {
            let n = n as f64;
            let mean_j = points.iter().map(|p| p.0).sum::<f64>() / n;
            let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
            let sxx: f64 = points.iter().map(|p| (p.0 - mean_j).powi(2)).sum();
            let sxy: f64 = points.iter().map(|p| (p.0 - mean_j) * (p.1 - mean_y)).sum();
            let slope = sxy / sxx;
            let intercept = mean_y - slope * mean_j;
            Ok(DecayFit {
                m_hat: intercept.exp(),
                r_hat: slope.exp(),
                pass: slope < 0.0,
            })
        }
    }
}

/// Empirical distribution of the hitting step from repeated jump-chain walks.
#[derive(Debug, Clone)]
pub struct HittingHistogram {
    /// `counts[j]` = walks with `S = j`, for `j = 0..=cap`.
    pub counts: Vec<u64>,
    /// Walks that did not hit the terminal set within `cap` steps.
    pub not_hit: u64,
    pub walks: u64,
}

impl HittingHistogram {
    pub fn frequency(&self, j: usize) -> f64 {
        self.counts.get(j).copied().unwrap_or(0) as f64 / self.walks as f64
    }

    pub fn not_hit_frequency(&self) -> f64 {
        self.not_hit as f64 / self.walks as f64
    }
}

/// Brute-force hitting-step frequencies by direct simulation of the jump
/// chain; independent of the coefficient recursion.
pub fn monte_carlo_hitting(
    spec: &ModelSpec,
    z: &[f64],
    start: usize,
    walks: u64,
    cap: usize,
    seed: u64,
) -> HittingHistogram {
    let local = spec.at(z);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0u64; cap + 1];
    let mut not_hit = 0;
    for _ in 0..walks {
        match local.hitting_step(start, cap, &mut rng) {
            Some(j) => counts[j] += 1,
            None => not_hit += 1,
        }
    }
    HittingHistogram { counts, not_hit, walks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn model(name: &str) -> ModelSpec {
        ModelSpec::builtin(name).unwrap()
    }

    fn two_state(rate: &str) -> ModelSpec {
        ModelSpec::from_toml_str(&format!(
            r#"
name = "two-state"
n_states = 2
terminal = [2]
rate = "{rate}"
transition = [["0", "1"], ["0", "1"]]
[covariate]
law = "uniform"
[limit]
base = 3
poisson_mean = 1.0
"#
        ))
        .unwrap()
    }

    #[test]
    fn model_a_row_four_hits_in_one_step_with_prob_point_two() {
        let a = model("model-a");
        for z in [0.0, 0.3, 0.9] {
            let t = true_coefficients(&a, &[z], 5).unwrap();
            assert!((t.get(1, 3) - 0.2).abs() < 1e-15);
        }
        let t0 = true_coefficients(&a, &[0.0], 5).unwrap();
        assert!((t0.get(2, 0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn terminal_columns_are_unit_vectors() {
        let a = model("model-a");
        let t = true_coefficients(&a, &[0.4], 30).unwrap();
        for x in [4, 5] {
            assert_eq!(t.get(0, x), 1.0);
            assert!((1..=30).all(|j| t.get(j, x) == 0.0));
        }
        for x in 0..4 {
            assert_eq!(t.get(0, x), 0.0);
        }
        assert_eq!(t.get(31, 0), 0.0);
    }

    #[test]
    fn two_state_density() {
        let s = two_state("2");
        let f = true_density(&s, &[0.5], 0, 0.5, 10).unwrap();
        assert!((f - 0.735758882).abs() < 1e-9);
        assert_eq!(true_density(&s, &[0.5], 1, 0.5, 10).unwrap(), 0.0);
        assert!(matches!(
            true_density(&s, &[0.5], 0, 0.5, 131),
            Err(Error::TruncationCeiling { requested: 131, .. })
        ));
    }

    #[test]
    fn partitions_of_the_builtin_models() {
        let a = model("model-a");
        for z in [0.1, 0.5, 0.9] {
            let p = reachable_partition(&a, &[z]);
            assert_eq!(p.connected, vec![0, 1, 2, 3]);
            assert!(p.isolated.is_empty());
            assert_eq!(p.terminal, vec![4, 5]);
        }
        let b = model("model-b");
        for z in [0.0, 0.3, 1.0] {
            let p = reachable_partition(&b, &[z]);
            assert!(p.is_isolated(4));
            assert_eq!(p.isolated, vec![4]);
        }
    }

    #[test]
    fn all_terminal_partition_is_trivial() {
        let mut p = TransitionMatrix::zeros(3);
        for i in 0..3 {
            p.set(i, i, 1.0);
        }
        let part = Partition::from_support(&p, &[true, true, true]);
        assert!(part.connected.is_empty() && part.isolated.is_empty());
    }

    #[test]
    fn cure_rates() {
        let b = model("model-b");
        assert_eq!(true_cure_rate(&b, &[0.3], 4, 130).unwrap().value, 1.0);
        assert_eq!(true_cure_rate(&b, &[0.3], 5, 130).unwrap().value, 0.0);
        let c1 = true_cure_rate(&b, &[0.3], 0, 130).unwrap();
        assert!(c1.value > 0.0 && c1.value < 1.0);
        assert!(!c1.tail_truncated);
        let short = true_cure_rate(&b, &[0.3], 0, 3).unwrap();
        assert!(short.tail_truncated);
        let a = model("model-a");
        // irreducible: only the truncated tail remains, and it is flagged
        let ca = true_cure_rate(&a, &[0.5], 0, 130).unwrap();
        assert!(ca.value > 0.0 && ca.value < 1e-7);
        assert!(ca.tail_truncated);
    }

    #[test]
    fn isolated_states_have_zero_coefficients() {
        let b = model("model-b");
        let t = true_coefficients(&b, &[0.6], 130).unwrap();
        assert!((0..=130).all(|j| t.get(j, 4) == 0.0));
    }

    #[test]
    fn decay_fits() {
        for (name, z) in [("model-a", 0.5), ("model-b", 0.3)] {
            let t = true_coefficients(&model(name), &[z], 130).unwrap();
            let fit = geometric_decay_check(&t).unwrap();
            assert!(fit.pass, "{name}");
            assert!(fit.r_hat > 0.0 && fit.r_hat < 1.0, "{name}: r={}", fit.r_hat);
        }
    }

    #[test]
    fn decay_fit_degenerate_and_precondition() {
        let mut p = TransitionMatrix::zeros(2);
        p.set(0, 1, 1.0);
        p.set(1, 1, 1.0);
        let t = CoefficientTable::from_recursion(&p, &[true, true], 40);
        let fit = geometric_decay_check(&t).unwrap();
        assert!(fit.pass);
        assert_eq!(fit.r_hat, 0.0);
        let short = CoefficientTable::from_recursion(&p, &[false, true], 10);
        assert!(geometric_decay_check(&short).is_err());
    }

    #[test]
    fn partial_sums_are_monotone_and_bounded() {
        for name in ["model-a", "model-b"] {
            let t = true_coefficients(&model(name), &[0.7], 130).unwrap();
            for x in 0..t.n_states() {
                let mut acc = 0.0;
                for j in 0..=130 {
                    let next = acc + t.get(j, x);
                    assert!(next >= acc);
                    acc = next;
                }
                assert!(acc <= 1.0 + 1e-12);
            }
        }
    }
}
