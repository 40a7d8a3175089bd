//! Replicated estimation study: integrated sup-squared density risk,
//! coefficient sup-error and normalised rate estimates, with Tukey boxplot
//! summaries.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandwidth::{select_bandwidth_with, BandwidthGrid, CpeTarget, FoldScheme};
use crate::erlang::{erlang_terms, tail_horizon};
use crate::error::{Error, Result};
use crate::estimate::{fit, FittedEstimator};
use crate::kernel::{KernelConfig, DEFAULT_RATE_CAP};
use crate::model::ModelSpec;
use crate::oracle::{check_k, true_coefficients, DEFAULT_PANELS, MAX_K};
use crate::simulate::simulate_dataset;

pub const CONFIG_SCHEMA: u32 = 1;
pub const REPORT_HEADER: &str = "model,n,z,replicate,seed,h_selected,lambda_hat,lambda_ratio,coeff_sup_err,i_risk,\
a_n_correct,degenerate,max_coeff_mass,min_cure_rate,max_cure_rate,status";
pub const BOXPLOT_HEADER: &str = "metric,n,z,q1,median,q3,lo_whisker,hi_whisker";
/// Describes the boxplot convention; written into run manifests.
pub const BOXPLOT_CONVENTION: &str =
    "quartiles by linear interpolation (type 7); whiskers at the most extreme data within 1.5*IQR of the box (Tukey)";

fn default_schema() -> u32 {
    CONFIG_SCHEMA
}
fn default_sizes() -> Vec<usize> {
    vec![100, 200, 400, 800]
}
fn default_replicates() -> usize {
    50
}
fn default_z_grid() -> Vec<f64> {
    vec![0.2, 0.4, 0.6, 0.8]
}
fn default_k() -> usize {
    MAX_K
}
fn default_panels() -> usize {
    DEFAULT_PANELS
}
fn default_rate_cap() -> f64 {
    DEFAULT_RATE_CAP
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandwidthConfig {
    /// Candidate bandwidths; defaults to [`BandwidthGrid::default_for`] the sample size.
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    /// Skip selection and use this bandwidth everywhere.
    #[serde(default)]
    pub fixed: Option<f64>,
    #[serde(default)]
    pub folds: FoldScheme,
    /// Select a bandwidth per query covariate instead of once per dataset.
    #[serde(default)]
    pub per_z: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema: u32,
    /// Built-in model name or path to a model file.
    pub model: String,
    #[serde(default = "default_sizes")]
    pub sample_sizes: Vec<usize>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_z_grid")]
    pub z_grid: Vec<f64>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Simpson panels on `[0, T_max]`, `T_max = (k + 10√k) / min(λ̂, λ_z)`.
    #[serde(default = "default_panels")]
    pub panels: usize,
    #[serde(default = "default_rate_cap")]
    pub rate_cap: f64,
    #[serde(default)]
    pub bandwidth: BandwidthConfig,
}

impl ExperimentConfig {
    /// The full default protocol for a model.
    pub fn protocol(model: &str, master_seed: u64) -> Self {
        ExperimentConfig {
            schema: CONFIG_SCHEMA,
            model: model.to_string(),
            sample_sizes: default_sizes(),
            replicates: default_replicates(),
            z_grid: default_z_grid(),
            k: default_k(),
            master_seed,
            panels: default_panels(),
            rate_cap: default_rate_cap(),
            bandwidth: BandwidthConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema != CONFIG_SCHEMA {
            return bad(format!("unsupported config schema {}", self.schema));
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1".into());
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.contains(&0) {
            return bad("sample_sizes must be nonempty and positive".into());
        }
        if self.z_grid.is_empty() {
            return bad("z_grid must be nonempty".into());
        }
        if self.k == 0 || self.k > MAX_K {
            return bad(format!("k must lie in 1..={MAX_K}, got {}", self.k));
        }
        if self.panels < 2 {
            return bad("panels must be at least 2".into());
        }
        if !(self.rate_cap > 0.0) {
            return bad("rate_cap must be positive".into());
        }
        if let Some(h) = self.bandwidth.fixed {
            if !(h > 0.0) {
                return bad("fixed bandwidth must be positive".into());
            }
        }
        if let Some(g) = &self.bandwidth.grid {
            BandwidthGrid::new(g.clone()).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// Seed of replicate `rep` at sample size `n`, independent of sweep order.
pub fn replicate_seed(master: u64, n: usize, rep: usize) -> u64 {
    fn mix(mut x: u64) -> u64 {
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^ (x >> 31)
    }
    let a = mix(master.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let b = mix(a ^ (n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    mix(b ^ (rep as u64).wrapping_add(0x632b_e59b_d9b4_e019))
}

/// `∫_0^{T_max} sup_x (f̂(t,x) - f(t,x))² dt` by composite Simpson, with the
/// true density truncated at `k` terms.
pub fn integrated_risk_with(fit: &FittedEstimator, spec: &ModelSpec, z: &[f64], k: usize, panels: usize) -> Result<f64> {
    check_k(k)?;
    let n = spec.n_states();
    if fit.n_states() != n {
        return Err(Error::InvalidArgument(format!(
            "fit has {} states, model has {n}",
            fit.n_states()
        )));
    }
    let truth = true_coefficients(spec, z, k)?;
    let lambda = spec.rate_at(z);
    let est_w: Vec<Vec<f64>> = (0..n).map(|x| fit.coeffs.mixture_weights(x)).collect();
    let true_w: Vec<Vec<f64>> = (0..n).map(|x| truth.mixture_weights(x)).collect();
    let t_max = tail_horizon(k.max(fit.k), lambda.min(fit.lambda_hat));
    let components = |t: f64| -> Vec<f64> {
        let e_hat = erlang_terms(fit.lambda_hat, t, fit.k);
        let e = erlang_terms(lambda, t, k);
        (0..n)
            .map(|x| {
                let f_hat: f64 = est_w[x].iter().zip(&e_hat).map(|(c, e)| c * e).sum();
                let f: f64 = true_w[x].iter().zip(&e).map(|(c, e)| c * e).sum();
                (f_hat - f).powi(2)
            })
            .collect()
    };
    Ok(sup_simpson(components, 0.0, t_max, panels))
}

fn argmax(v: &[f64]) -> (usize, f64) {
    v.iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, x)| if x > best.1 { (i, x) } else { best })
}

/// Composite Simpson for `∫ max_x g_x(t) dt`. The maximum has kinks where
/// the leading component changes; panels containing one are split at the
/// crossing so each piece integrates a smooth component.
fn sup_simpson<F: Fn(f64) -> Vec<f64>>(g: F, a: f64, b: f64, panels: usize) -> f64 {
    // `panels` counts subintervals, as for plain Simpson; each parabola spans two
    let panels = panels.max(2).div_ceil(2);
    let h = (b - a) / panels as f64;
    let nodes: Vec<Vec<f64>> = (0..=2 * panels).map(|i| g(a + i as f64 * h / 2.0)).collect();
    let pieces: Vec<f64> = (0..panels)
        .map(|p| {
            let (l, m, r) = (&nodes[2 * p], &nodes[2 * p + 1], &nodes[2 * p + 2]);
            h / 6.0 * (argmax(l).1 + 4.0 * argmax(m).1 + argmax(r).1)
        })
        .collect();
    let coarse: f64 = pieces.iter().sum();
    // kink panels whose mass cannot move the total are left alone
    let floor = 1e-14 * coarse.abs();
    pieces
        .iter()
        .enumerate()
        .map(|(p, &plain)| {
            let (l, m, r) = (&nodes[2 * p], &nodes[2 * p + 1], &nodes[2 * p + 2]);
            let same = argmax(l).0 == argmax(m).0 && argmax(m).0 == argmax(r).0;
            if same || plain.abs() <= floor {
                plain
            } else {
                let lo = a + p as f64 * h;
                refine(&g, lo, lo + h, l, r, KINK_DEPTH)
            }
        })
        .sum()
}

const KINK_DEPTH: u32 = 24;

fn refine<F: Fn(f64) -> Vec<f64>>(g: &F, a: f64, b: f64, ga: &[f64], gb: &[f64], depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let gm = g(m);
    let (ia, ib, im) = (argmax(ga).0, argmax(gb).0, argmax(&gm).0);
    if (ia == im && im == ib) || depth == 0 {
        return (b - a) / 6.0 * (argmax(ga).1 + 4.0 * argmax(&gm).1 + argmax(gb).1);
    }
    if ia != ib && (im == ia || im == ib) {
        // single crossing of components ia and ib: bisect for it
        let diff = |v: &[f64]| v[ia] - v[ib];
        let (mut lo, mut hi) = (a, b);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if diff(&g(mid)) >= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let c = 0.5 * (lo + hi);
        let gc = g(c);
        let one = |x: usize, u: f64, w: f64, gu: f64, gw: f64| {
            let mid = g(0.5 * (u + w))[x];
            (w - u) / 6.0 * (gu + 4.0 * mid + gw)
        };
        return one(ia, a, c, ga[ia], gc[ia]) + one(ib, c, b, gc[ib], gb[ib]);
    }
    refine(g, a, m, ga, &gm, depth - 1) + refine(g, m, b, &gm, gb, depth - 1)
}

pub fn integrated_risk(fit: &FittedEstimator, spec: &ModelSpec, z: &[f64], k: usize) -> Result<f64> {
    integrated_risk_with(fit, spec, z, k, DEFAULT_PANELS)
}

/// `max_{x, 1 ≤ j ≤ k} (ĉ_j(x) - c_j(x))²`.
pub fn coefficient_sup_error(fit: &FittedEstimator, spec: &ModelSpec, z: &[f64], k: usize) -> Result<f64> {
    let truth = true_coefficients(spec, z, k)?;
    if fit.n_states() != spec.n_states() {
        return Err(Error::InvalidArgument("fit and model disagree on the state count".into()));
    }
    let mut sup: f64 = 0.0;
    for j in 1..=k {
        for x in 0..spec.n_states() {
            sup = sup.max((fit.coeffs.get(j, x) - truth.get(j, x)).powi(2));
        }
    }
    Ok(sup)
}

/// `λ̂ / λ_z`.
pub fn lambda_ratio(fit: &FittedEstimator, spec: &ModelSpec, z: &[f64]) -> f64 {
    fit.lambda_hat / spec.rate_at(z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskRow {
    pub model: String,
    pub n: usize,
    pub z: f64,
    pub replicate: usize,
    pub seed: u64,
    pub h_selected: f64,
    pub lambda_hat: f64,
    pub lambda_ratio: f64,
    pub coeff_sup_err: f64,
    pub i_risk: f64,
    pub a_n_correct: bool,
    pub degenerate: bool,
    /// `max_x Σ_{j=0}^{k} ĉ_j(x)`.
    pub max_coeff_mass: f64,
    pub min_cure_rate: f64,
    pub max_cure_rate: f64,
    /// `None` when the replicate succeeded.
    pub error: Option<String>,
}

impl RiskRow {
    fn failed(model: &str, n: usize, z: f64, replicate: usize, seed: u64, message: String) -> Self {
        RiskRow {
            model: model.to_string(),
            n,
            z,
            replicate,
            seed,
            h_selected: f64::NAN,
            lambda_hat: f64::NAN,
            lambda_ratio: f64::NAN,
            coeff_sup_err: f64::NAN,
            i_risk: f64::NAN,
            a_n_correct: false,
            degenerate: true,
            max_coeff_mass: f64::NAN,
            min_cure_rate: f64::NAN,
            max_cure_rate: f64::NAN,
            error: Some(message),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskReport {
    pub rows: Vec<RiskRow>,
}

/// Five-number boxplot summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub lo_whisker: f64,
    pub hi_whisker: f64,
}

impl BoxStats {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }

    /// `None` for an empty sample. NaNs are ignored.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        };
        let (q1, median, q3) = (q(0.25), q(0.5), q(0.75));
        let fence = 1.5 * (q3 - q1);
        let lo_whisker = v.iter().copied().find(|&x| x >= q1 - fence).unwrap_or(q1);
        let hi_whisker = v.iter().rev().copied().find(|&x| x <= q3 + fence).unwrap_or(q3);
        Some(BoxStats {
            q1,
            median,
            q3,
            lo_whisker,
            hi_whisker,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    IntegratedRisk,
    CoeffSupErr,
    LambdaRatio,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::IntegratedRisk, Metric::CoeffSupErr, Metric::LambdaRatio];

    pub fn name(self) -> &'static str {
        match self {
            Metric::IntegratedRisk => "i_risk",
            Metric::CoeffSupErr => "coeff_sup_err",
            Metric::LambdaRatio => "lambda_ratio",
        }
    }

    fn of(self, row: &RiskRow) -> f64 {
        match self {
            Metric::IntegratedRisk => row.i_risk,
            Metric::CoeffSupErr => row.coeff_sup_err,
            Metric::LambdaRatio => row.lambda_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxplotRow {
    pub metric: Metric,
    pub n: usize,
    pub z: f64,
    pub stats: BoxStats,
}

fn csv_float(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

impl RiskReport {
    /// Rows at one `(n, z)` cell, in replicate order.
    pub fn cell(&self, n: usize, z: f64) -> impl Iterator<Item = &RiskRow> {
        self.rows.iter().filter(move |r| r.n == n && r.z == z)
    }

    pub fn stats(&self, metric: Metric, n: usize, z: f64) -> Option<BoxStats> {
        let values: Vec<f64> = self.cell(n, z).filter(|r| r.is_ok()).map(|r| metric.of(r)).collect();
        BoxStats::from_values(&values)
    }

    /// Boxplot rows by metric, then `(n, z)` in report order.
    pub fn boxplots(&self) -> Vec<BoxplotRow> {
        let mut cells: Vec<(usize, f64)> = Vec::new();
        for r in &self.rows {
            if !cells.iter().any(|&(n, z)| n == r.n && z == r.z) {
                cells.push((r.n, r.z));
            }
        }
        Metric::ALL
            .iter()
            .flat_map(|&metric| {
                cells.iter().filter_map(move |&(n, z)| {
                    self.stats(metric, n, z).map(|stats| BoxplotRow { metric, n, z, stats })
                })
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{REPORT_HEADER}").unwrap();
        for r in &self.rows {
            let status = match &r.error {
                None => "ok".to_string(),
                Some(e) => format!("error: {}", e.replace([',', '\n', '"'], " ")),
            };
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.model,
                r.n,
                r.z,
                r.replicate,
                r.seed,
                csv_float(r.h_selected),
                csv_float(r.lambda_hat),
                csv_float(r.lambda_ratio),
                csv_float(r.coeff_sup_err),
                csv_float(r.i_risk),
                u8::from(r.a_n_correct),
                u8::from(r.degenerate),
                csv_float(r.max_coeff_mass),
                csv_float(r.min_cure_rate),
                csv_float(r.max_cure_rate),
                status
            )
            .unwrap();
        }
        out
    }

    pub fn boxplots_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{BOXPLOT_HEADER}").unwrap();
        for b in self.boxplots() {
            let s = b.stats;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                b.metric.name(),
                b.n,
                b.z,
                s.q1,
                s.median,
                s.q3,
                s.lo_whisker,
                s.hi_whisker
            )
            .unwrap();
        }
        out
    }
}

fn evaluate_fit(
    config: &ExperimentConfig,
    spec: &ModelSpec,
    n: usize,
    z: f64,
    replicate: usize,
    seed: u64,
    h: f64,
    fitted: &FittedEstimator,
) -> Result<RiskRow> {
    let zv = [z];
    let n_states = spec.n_states();
    let true_a: std::collections::BTreeSet<usize> = spec.terminal().iter().copied().collect();
    let cures: Vec<f64> = (0..n_states).map(|x| fitted.cure_rate(x)).collect();
    Ok(RiskRow {
        model: spec.name().to_string(),
        n,
        z,
        replicate,
        seed,
        h_selected: h,
        lambda_hat: fitted.lambda_hat,
        lambda_ratio: lambda_ratio(fitted, spec, &zv),
        coeff_sup_err: coefficient_sup_error(fitted, spec, &zv, config.k)?,
        i_risk: integrated_risk_with(fitted, spec, &zv, config.k, config.panels)?,
        a_n_correct: fitted.a_n == true_a,
        degenerate: fitted.is_degenerate(),
        max_coeff_mass: (0..n_states).map(|x| fitted.coeffs.total_mass(x)).fold(0.0, f64::max),
        min_cure_rate: cures.iter().copied().fold(f64::INFINITY, f64::min),
        max_cure_rate: cures.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        error: None,
    })
}

fn run_replicate(config: &ExperimentConfig, spec: &ModelSpec, n: usize, replicate: usize) -> Vec<RiskRow> {
    let seed = replicate_seed(config.master_seed, n, replicate);
    let name = spec.name();
    let fail_all = |e: Error| {
        config
            .z_grid
            .iter()
            .map(|&z| RiskRow::failed(name, n, z, replicate, seed, e.to_string()))
            .collect::<Vec<_>>()
    };
    let data = match simulate_dataset(spec, n, seed) {
        Ok(d) => d,
        Err(e) => return fail_all(e),
    };
    let grid = match &config.bandwidth.grid {
        Some(g) => BandwidthGrid::new(g.clone()).expect("grid validated with the config"),
        None => BandwidthGrid::default_for(n),
    };
    let select = |target: CpeTarget| -> Result<f64> {
        match config.bandwidth.fixed {
            Some(h) => Ok(h),
            None => Ok(select_bandwidth_with(&data, &grid, config.bandwidth.folds, target)?.h),
        }
    };
    let shared_h = if config.bandwidth.per_z { None } else { Some(select(CpeTarget::AtRecord)) };
    config
        .z_grid
        .iter()
        .map(|&z| {
            let outcome = (|| {
                let h = match &shared_h {
                    Some(Ok(h)) => *h,
                    Some(Err(e)) => return Err(Error::InsufficientData(e.to_string())),
                    None => select(CpeTarget::AtPoint(vec![z]))?,
                };
                let kcfg = KernelConfig::new(h, config.rate_cap)?;
                let fitted = fit(&data, &[z], &kcfg, spec.n_states(), config.k)?;
                evaluate_fit(config, spec, n, z, replicate, seed, h, &fitted)
            })();
            outcome.unwrap_or_else(|e| RiskRow::failed(name, n, z, replicate, seed, e.to_string()))
        })
        .collect()
}

/// Runs every `(n, replicate)` pair in parallel; rows come back sorted by
/// `(n, z, replicate)` in config order, independent of scheduling.
pub fn run_experiment_with(config: &ExperimentConfig, spec: &ModelSpec) -> Result<RiskReport> {
    config.validate()?;
    if spec.covariate_dim() != 1 {
        return Err(Error::Config("the risk study supports scalar covariates only".into()));
    }
    if let Some(z) = config.z_grid.iter().find(|z| !spec.covariate().contains(&[**z])) {
        return Err(Error::Config(format!("query point {z} outside the covariate domain")));
    }
    let jobs: Vec<(usize, usize, usize)> = config
        .sample_sizes
        .iter()
        .enumerate()
        .flat_map(|(ni, &n)| (0..config.replicates).map(move |rep| (ni, n, rep)))
        .collect();
    let mut keyed: Vec<((usize, usize, usize), RiskRow)> = jobs
        .par_iter()
        .flat_map_iter(|&(ni, n, rep)| {
            run_replicate(config, spec, n, rep)
                .into_iter()
                .enumerate()
                .map(move |(zi, row)| ((ni, zi, rep), row))
        })
        .collect();
    keyed.sort_by_key(|(key, _)| *key);
    Ok(RiskReport {
        rows: keyed.into_iter().map(|(_, r)| r).collect(),
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RiskReport> {
    let spec = ModelSpec::load(&config.model)?;
    run_experiment_with(config, &spec)
}
