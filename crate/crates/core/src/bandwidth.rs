//! Bandwidth selection by leave-one-out conditional predictive error (CPE)
//! on the mean holding time `U = E_M / M`, averaged over ten sub-samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::simulate::Dataset;

/// Records removed per sub-sample under [`FoldScheme::Literal`].
pub const FOLD_BLOCK: usize = 10;
/// Number of sub-samples.
pub const FOLDS: usize = 10;
/// Candidates in the default grid.
pub const DEFAULT_GRID_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthGrid {
    candidates: Vec<f64>,
}

impl BandwidthGrid {
    pub fn new(candidates: Vec<f64>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::InvalidArgument("bandwidth grid is empty".into()));
        }
        if candidates.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
            return Err(Error::InvalidArgument("bandwidths must be positive and finite".into()));
        }
        if candidates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("bandwidth grid must be strictly increasing".into()));
        }
        Ok(BandwidthGrid { candidates })
    }

    /// Twenty log-spaced values in `[n^{-1/3} / 4, 1]`.
    pub fn default_for(n: usize) -> Self {
        let lo = (n.max(1) as f64).powf(-1.0 / 3.0) / 4.0;
        let (a, b) = (lo.ln(), 0.0f64);
        let candidates = (0..DEFAULT_GRID_LEN)
            .map(|i| (a + (b - a) * i as f64 / (DEFAULT_GRID_LEN - 1) as f64).exp())
            .collect();
        BandwidthGrid { candidates }
    }

    pub fn candidates(&self) -> &[f64] {
        &self.candidates
    }

    pub fn min(&self) -> f64 {
        self.candidates[0]
    }

    pub fn max(&self) -> f64 {
        *self.candidates.last().unwrap()
    }
}

/// How the ten sub-samples are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FoldScheme {
    /// Sub-sample `ℓ` drops records `10(ℓ-1)+1 ..= 10ℓ` (1-based), whatever `n` is.
    #[default]
    Literal,
    /// Sub-sample `ℓ` drops the `ℓ`-th of ten contiguous blocks of size `⌈n/10⌉`.
    Proportional,
}

impl FoldScheme {
    /// 0-based record range removed from sub-sample `fold` (0-based).
    pub fn excluded_range(self, fold: usize, n: usize) -> std::ops::Range<usize> {
        let block = match self {
            FoldScheme::Literal => FOLD_BLOCK,
            FoldScheme::Proportional => n.div_ceil(FOLDS),
        };
        let start = (fold * block).min(n);
        start..((fold + 1) * block).min(n)
    }
}

/// Where the leave-one-out regression is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub enum CpeTarget {
    /// At each held-out record's own covariate `Z_j` (cross-validation).
    AtRecord,
    /// At a fixed query covariate `z` for every held-out record.
    AtPoint(Vec<f64>),
}

/// Usable (`M ≥ 1`) records reduced to `(Z, U)` pairs.
#[derive(Debug, Clone)]
struct Sample {
    z: Vec<Vec<f64>>,
    u: Vec<f64>,
}

impl Sample {
    fn from_dataset(dataset: &Dataset) -> Result<Self> {
        let (z, u): (Vec<_>, Vec<_>) = dataset
            .records
            .iter()
            .filter_map(|r| r.mean_holding_time().map(|u| (r.z.clone(), u)))
            .unzip();
        if u.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "CPE needs at least 2 records with M >= 1, found {}",
                u.len()
            )));
        }
        Ok(Sample { z, u })
    }

    fn global_mean(&self) -> f64 {
        self.u.iter().sum::<f64>() / self.u.len() as f64
    }
}

/// Compensated running sum (Neumaier).
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    hi: f64,
    lo: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.hi + v;
        if self.hi.abs() >= v.abs() {
            self.lo += (self.hi - t) + v;
        } else {
            self.lo += (v - t) + self.hi;
        }
        self.hi = t;
    }

    fn minus(self, other: CompensatedSum) -> f64 {
        (self.hi - other.hi) + (self.lo - other.lo)
    }
}

/// Sorted scalar sample with compensated prefix sums of the moments needed
/// to evaluate windowed modified-Epanechnikov sums in O(log n).
struct ScalarIndex {
    z: Vec<f64>,
    centre: f64,
    // prefix sums of s, s², u, u·s, u·s² with s = z - centre
    s1: Vec<CompensatedSum>,
    s2: Vec<CompensatedSum>,
    u0: Vec<CompensatedSum>,
    u1: Vec<CompensatedSum>,
    u2: Vec<CompensatedSum>,
}

impl ScalarIndex {
    fn new(sample: &Sample) -> Self {
        let mut pairs: Vec<(f64, f64)> = sample.z.iter().map(|z| z[0]).zip(sample.u.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let centre = pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64;
        let n = pairs.len();
        let mut idx = ScalarIndex {
            z: Vec::with_capacity(n),
            centre,
            s1: Vec::with_capacity(n + 1),
            s2: Vec::with_capacity(n + 1),
            u0: Vec::with_capacity(n + 1),
            u1: Vec::with_capacity(n + 1),
            u2: Vec::with_capacity(n + 1),
        };
        let mut acc = [CompensatedSum::default(); 5];
        let push = |idx: &mut ScalarIndex, acc: &[CompensatedSum; 5]| {
            idx.s1.push(acc[0]);
            idx.s2.push(acc[1]);
            idx.u0.push(acc[2]);
            idx.u1.push(acc[3]);
            idx.u2.push(acc[4]);
        };
        push(&mut idx, &acc);
        for (z, u) in pairs {
            let s = z - centre;
            acc[0].add(s);
            acc[1].add(s * s);
            acc[2].add(u);
            acc[3].add(u * s);
            acc[4].add(u * s * s);
            push(&mut idx, &acc);
            idx.z.push(z);
        }
        idx
    }

    /// Index range of points with `|(z - Z_i)/h| ≤ 1`, using the same
    /// arithmetic as the kernel's support test.
    fn window(&self, z: f64, h: f64) -> (usize, usize) {
        let lo = self.z.partition_point(|&zi| (z - zi) / h > 1.0);
        let hi = self.z.partition_point(|&zi| (z - zi) / h >= -1.0);
        (lo, hi.max(lo))
    }

    /// `(Σ K((z - Z_i)/h), Σ K((z - Z_i)/h) U_i, count)` over the window.
    fn kernel_sums(&self, z: f64, h: f64) -> (f64, f64, usize) {
        let (lo, hi) = self.window(z, h);
        let cnt = (hi - lo) as f64;
        let d = z - self.centre;
        let s1 = self.s1[hi].minus(self.s1[lo]);
        let s2 = self.s2[hi].minus(self.s2[lo]);
        let u0 = self.u0[hi].minus(self.u0[lo]);
        let u1 = self.u1[hi].minus(self.u1[lo]);
        let u2 = self.u2[hi].minus(self.u2[lo]);
        let h2 = h * h;
        // Σ (d - s_i)² and Σ u_i (d - s_i)²
        let sq = cnt * d * d - 2.0 * d * s1 + s2;
        let usq = u0 * d * d - 2.0 * d * u1 + u2;
        let w = 0.5 * (4.0 / 3.0 * cnt - sq / h2);
        let wu = 0.5 * (4.0 / 3.0 * u0 - usq / h2);
        (w, wu, hi - lo)
    }
}

fn cpe_scalar(sample: &Sample, index: &ScalarIndex, h: f64) -> f64 {
    let k0 = Kernel::ModifiedEpanechnikov.eval_sq(0.0, 1);
    let fallback = sample.global_mean();
    sample
        .z
        .iter()
        .zip(&sample.u)
        .map(|(z, &u)| {
            let (w, wu, cnt) = index.kernel_sums(z[0], h);
            let pred = if cnt <= 1 { fallback } else { (wu - k0 * u) / (w - k0) };
            (u - pred).powi(2)
        })
        .sum()
}

fn cpe_general(sample: &Sample, h: f64, target: &CpeTarget) -> f64 {
    let kernel = Kernel::ModifiedEpanechnikov;
    let fallback = sample.global_mean();
    let n = sample.u.len();
    match target {
        CpeTarget::AtRecord => (0..n)
            .map(|j| {
                let (mut w, mut wu) = (0.0, 0.0);
                for i in (0..n).filter(|&i| i != j) {
                    let k = kernel.eval_scaled(&sample.z[j], &sample.z[i], h);
                    w += k;
                    wu += k * sample.u[i];
                }
                let pred = if w > 0.0 { wu / w } else { fallback };
                (sample.u[j] - pred).powi(2)
            })
            .sum(),
        CpeTarget::AtPoint(z) => {
            let k: Vec<f64> = sample.z.iter().map(|zi| kernel.eval_scaled(z, zi, h)).collect();
            let w: f64 = k.iter().sum();
            let wu: f64 = k.iter().zip(&sample.u).map(|(k, u)| k * u).sum();
            let inside = k.iter().filter(|&&v| v > 0.0).count();
            (0..n)
                .map(|j| {
                    let others = inside - usize::from(k[j] > 0.0);
                    let pred = if others == 0 {
                        fallback
                    } else {
                        (wu - k[j] * sample.u[j]) / (w - k[j])
                    };
                    (sample.u[j] - pred).powi(2)
                })
                .sum()
        }
    }
}

/// Evaluates CPE(h) over a fixed sample for any number of bandwidths.
pub struct CpeEvaluator {
    sample: Sample,
    index: Option<ScalarIndex>,
    target: CpeTarget,
}

impl CpeEvaluator {
    pub fn new(dataset: &Dataset, target: CpeTarget) -> Result<Self> {
        let sample = Sample::from_dataset(dataset)?;
        let index = (sample.z[0].len() == 1 && target == CpeTarget::AtRecord).then(|| ScalarIndex::new(&sample));
        Ok(CpeEvaluator { sample, index, target })
    }

    pub fn eval(&self, h: f64) -> f64 {
        match &self.index {
            Some(index) => cpe_scalar(&self.sample, index, h),
            None => cpe_general(&self.sample, h, &self.target),
        }
    }

    /// Grid minimiser; ties go to the smaller bandwidth.
    pub fn argmin(&self, grid: &BandwidthGrid) -> f64 {
        let mut best = (grid.min(), f64::INFINITY);
        for &h in grid.candidates() {
            let v = self.eval(h);
            if v < best.1 {
                best = (h, v);
            }
        }
        best.0
    }
}

/// `CPE(h) = Σ_j (U_j - m̂_{h,-j}(Z_j))²` over records with `M ≥ 1`.
pub fn cpe(dataset: &Dataset, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {h}")));
    }
    Ok(CpeEvaluator::new(dataset, CpeTarget::AtRecord)?.eval(h))
}

/// CPE with the leave-one-out regression evaluated at a fixed `z`.
pub fn cpe_at(dataset: &Dataset, z: &[f64], h: f64) -> Result<f64> {
    Ok(CpeEvaluator::new(dataset, CpeTarget::AtPoint(z.to_vec()))?.eval(h))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthSelection {
    /// Minimiser on each of the ten sub-samples.
    pub fold_minimizers: Vec<f64>,
    /// Their average.
    pub h: f64,
}

pub fn select_bandwidth(dataset: &Dataset, grid: &BandwidthGrid, scheme: FoldScheme) -> Result<BandwidthSelection> {
    select_bandwidth_with(dataset, grid, scheme, CpeTarget::AtRecord)
}

pub fn select_bandwidth_with(
    dataset: &Dataset,
    grid: &BandwidthGrid,
    scheme: FoldScheme,
    target: CpeTarget,
) -> Result<BandwidthSelection> {
    let n = dataset.len();
    if n < 2 * FOLD_BLOCK {
        return Err(Error::InsufficientData(format!(
            "bandwidth selection needs at least {} records, found {n}",
            2 * FOLD_BLOCK
        )));
    }
    let fold_minimizers = (0..FOLDS)
        .map(|fold| {
            let excluded = scheme.excluded_range(fold, n);
            let sub = dataset.without(|i| excluded.contains(&i));
            Ok(CpeEvaluator::new(&sub, target.clone())?.argmin(grid))
        })
        .collect::<Result<Vec<f64>>>()?;
    // the rounded mean can drift outside [min, max] of identical inputs
    let lo = fold_minimizers.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = fold_minimizers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let h = (fold_minimizers.iter().sum::<f64>() / FOLDS as f64).clamp(lo, hi);
    Ok(BandwidthSelection { fold_minimizers, h })
}
