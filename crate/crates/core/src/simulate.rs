//! Censored first-hitting-time trajectories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};
use crate::model::{LocalModel, ModelSpec};

/// One censored trajectory `(E_M, δ, Y_0..Y_M, Z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    pub z: Vec<f64>,
    /// Jump-chain states `Y_0..Y_M` (0-based).
    pub states: Vec<usize>,
    /// Calendar time `E_M` of the last observed jump.
    pub hit_time: f64,
    /// Whether the last state is terminal.
    pub delta: bool,
    /// Drawn censoring step `L`; only known for simulated records.
    pub limit_draw: Option<u64>,
}

impl ObservationRecord {
    /// Observed jump count `M = L ∧ S`.
    pub fn m(&self) -> usize {
        self.states.len() - 1
    }

    pub fn last_state(&self) -> usize {
        *self.states.last().expect("record has at least Y_0")
    }

    /// Mean holding time `E_M / M`, or `None` when no jump was observed.
    pub fn mean_holding_time(&self) -> Option<f64> {
        match self.m() {
            0 => None,
            m => Some(self.hit_time / m as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<ObservationRecord>,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn new(records: Vec<ObservationRecord>) -> Result<Self> {
        if let Some(first) = records.first() {
            let p = first.z.len();
            if let Some(i) = records.iter().position(|r| r.z.len() != p) {
                return Err(Error::InvalidArgument(format!(
                    "record {} has covariate dimension {} (expected {p})",
                    i + 1,
                    records[i].z.len()
                )));
            }
            if let Some(i) = records.iter().position(|r| r.states.is_empty()) {
                return Err(Error::InvalidArgument(format!("record {} has no states", i + 1)));
            }
        }
        Ok(Dataset { records, seed: None })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn covariate_dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.z.len())
    }

    /// Largest state index seen plus one.
    pub fn observed_state_count(&self) -> usize {
        self.records
            .iter()
            .flat_map(|r| r.states.iter())
            .max()
            .map_or(0, |m| m + 1)
    }

    /// Copy of the dataset without the records at the given positions.
    pub fn without(&self, excluded: impl Fn(usize) -> bool) -> Dataset {
        Dataset {
            records: self
                .records
                .iter()
                .enumerate()
                .filter(|(i, _)| !excluded(*i))
                .map(|(_, r)| r.clone())
                .collect(),
            seed: self.seed,
        }
    }
}

fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * weights.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

impl LocalModel {
    /// Runs the jump chain from `start` for at most `limit` jumps, stopping
    /// at the first terminal state.
    pub fn walk<R: Rng + ?Sized>(&self, start: usize, limit: u64, rng: &mut R) -> ObservationRecord {
        let holding = Exp::new(self.rate).expect("rate validated positive");
        let mut states = vec![start];
        let mut time = 0.0;
        let mut current = start;
        let mut jumps = 0u64;
        while !self.terminal[current] && jumps < limit {
            time += holding.sample(rng);
            current = sample_index(self.transition.row(current), rng);
            states.push(current);
            jumps += 1;
        }
        ObservationRecord {
            z: self.z.clone(),
            delta: self.terminal[current],
            states,
            hit_time: time,
            limit_draw: Some(limit),
        }
    }

    /// Number of jumps until the jump chain enters the terminal set, capped
    /// at `cap` (returns `None` if the cap is reached first).
    pub fn hitting_step<R: Rng + ?Sized>(&self, start: usize, cap: usize, rng: &mut R) -> Option<usize> {
        let mut current = start;
        for step in 0..=cap {
            if self.terminal[current] {
                return Some(step);
            }
            if step == cap {
                break;
            }
            current = sample_index(self.transition.row(current), rng);
        }
        None
    }
}

/// Draws `L`, then `Y_0` (unless forced), then walks the chain at covariate `z`.
pub fn simulate_trajectory<R: Rng + ?Sized>(
    spec: &ModelSpec,
    z: &[f64],
    start: Option<usize>,
    rng: &mut R,
) -> ObservationRecord {
    let local = spec.at(z);
    simulate_local(spec, &local, start, rng)
}

fn simulate_local<R: Rng + ?Sized>(
    spec: &ModelSpec,
    local: &LocalModel,
    start: Option<usize>,
    rng: &mut R,
) -> ObservationRecord {
    let limit = spec.limit().sample(rng);
    let y0 = match start {
        Some(x) => x,
        None => sample_index(&spec.initial_weights(), rng),
    };
    local.walk(y0, limit, rng)
}

/// Many trajectories at one covariate value, reusing the evaluated model.
pub fn simulate_at<R: Rng + ?Sized>(
    spec: &ModelSpec,
    z: &[f64],
    count: usize,
    start: Option<usize>,
    rng: &mut R,
) -> Vec<ObservationRecord> {
    let local = spec.at(z);
    (0..count).map(|_| simulate_local(spec, &local, start, rng)).collect()
}

/// `n` independent records, each with its own covariate draw.
pub fn simulate_dataset_with<R: Rng + ?Sized>(spec: &ModelSpec, n: usize, rng: &mut R) -> Dataset {
    let records = (0..n)
        .map(|_| {
            let z = spec.covariate().sample(rng);
            simulate_trajectory(spec, &z, None, rng)
        })
        .collect();
    Dataset { records, seed: None }
}

/// Deterministic in `seed`.
pub fn simulate_dataset(spec: &ModelSpec, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = simulate_dataset_with(spec, n, &mut rng);
    data.seed = Some(seed);
    Ok(data)
}
