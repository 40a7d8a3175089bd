//! Covariate-indexed Markov model specifications.
//!
//! A [`ModelSpec`] describes the whole generative process: a finite state
//! space with a terminal subset, a covariate law on `[0,1]^p`, a shifted
//! Poisson law for the censoring step, a holding-time rate `z -> λ_z` shared
//! by every state, and a row-stochastic jump matrix `z -> P^(z)`.
//!
//! States are 0-based in the API. The TOML model format uses 1-based labels.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::{Beta, Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;

/// Row-sum tolerance used by [`validate_model`].
pub const ROW_SUM_TOL: f64 = 1e-12;

const MODEL_A: &str = include_str!("../models/model-a.toml");
const MODEL_B: &str = include_str!("../models/model-b.toml");

/// Names of the models shipped with the crate.
pub const BUILTIN_MODELS: [&str; 2] = ["model-a", "model-b"];

/// Dense square matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    n: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    pub fn zeros(n: usize) -> Self {
        TransitionMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "row {} has {} entries, expected {n}",
                    i + 1,
                    row.len()
                )));
            }
            m.data[i * n..(i + 1) * n].copy_from_slice(row);
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.n..(i + 1) * self.n]
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &TransitionMatrix) -> f64 {
        assert_eq!(self.n, other.n, "matrix dimensions differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Marginal law of each covariate component; components are i.i.d. on `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "lowercase")]
pub enum CovariateKind {
    Uniform,
    Beta { a: f64, b: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovariateLaw {
    pub dim: usize,
    pub kind: CovariateKind,
}

impl CovariateLaw {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self.kind {
            CovariateKind::Uniform => (0..self.dim).map(|_| rng.random::<f64>()).collect(),
            CovariateKind::Beta { a, b } => {
                let beta = Beta::new(a, b).expect("beta parameters validated at construction");
                (0..self.dim).map(|_| beta.sample(rng)).collect()
            }
        }
    }

    /// Whether `z` lies in the covariate domain `[0,1]^p`.
    pub fn contains(&self, z: &[f64]) -> bool {
        z.len() == self.dim && z.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// `L = base + Poisson(poisson_mean)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitLaw {
    pub base: u64,
    pub poisson_mean: f64,
}

impl LimitLaw {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let poisson = Poisson::new(self.poisson_mean).expect("poisson mean validated at construction");
        let draw: f64 = poisson.sample(rng);
        self.base + draw as u64
    }
}

/// Law of the initial state `Y_0`.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    /// Uniform over the non-terminal states (over all states if every state is terminal).
    UniformNonTerminal,
    /// Unnormalised nonnegative weights, one per state.
    Weights(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    name: String,
    n_states: usize,
    terminal: Vec<usize>,
    covariate: CovariateLaw,
    limit: LimitLaw,
    initial: InitialLaw,
    rate: Expr,
    transition: Vec<Vec<Expr>>,
}

/// Parameters for [`ModelSpec::new`].
pub struct ModelParts {
    pub name: String,
    pub terminal: Vec<usize>,
    pub covariate: CovariateLaw,
    pub limit: LimitLaw,
    pub initial: InitialLaw,
    pub rate: Expr,
    pub transition: Vec<Vec<Expr>>,
}

impl ModelSpec {
    /// Builds a spec, checking the structural invariants (square matrix,
    /// nonempty in-range terminal set, sane laws, expression arity).
    pub fn new(parts: ModelParts) -> Result<Self> {
        let ModelParts {
            name,
            mut terminal,
            covariate,
            limit,
            initial,
            rate,
            transition,
        } = parts;
        let n_states = transition.len();
        if n_states == 0 {
            return Err(Error::Config("model needs at least one state".into()));
        }
        if let Some((i, row)) = transition.iter().enumerate().find(|(_, r)| r.len() != n_states) {
            return Err(Error::Config(format!(
                "transition row {} has {} entries, expected {n_states}",
                i + 1,
                row.len()
            )));
        }
        terminal.sort_unstable();
        terminal.dedup();
        if terminal.is_empty() {
            return Err(Error::Config("terminal set must be nonempty".into()));
        }
        if let Some(&x) = terminal.iter().find(|&&x| x >= n_states) {
            return Err(Error::Config(format!(
                "terminal state {} outside 1..={n_states}",
                x + 1
            )));
        }
        if covariate.dim == 0 {
            return Err(Error::Config("covariate dimension must be positive".into()));
        }
        if let CovariateKind::Beta { a, b } = covariate.kind {
            if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
                return Err(Error::Config(format!("invalid beta parameters ({a}, {b})")));
            }
        }
        if !(limit.poisson_mean > 0.0 && limit.poisson_mean.is_finite()) {
            return Err(Error::Config(format!(
                "poisson mean must be positive, got {}",
                limit.poisson_mean
            )));
        }
        if let InitialLaw::Weights(w) = &initial {
            if w.len() != n_states || w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config(
                    "initial weights must be nonnegative, one per state, with positive sum".into(),
                ));
            }
        }
        let max_arity = transition
            .iter()
            .flatten()
            .map(Expr::arity)
            .chain(std::iter::once(rate.arity()))
            .max()
            .unwrap_or(0);
        if max_arity > covariate.dim {
            return Err(Error::Config(format!(
                "expressions reference z{max_arity} but covariate dimension is {}",
                covariate.dim
            )));
        }
        Ok(ModelSpec {
            name,
            n_states,
            terminal,
            covariate,
            limit,
            initial,
            rate,
            transition,
        })
    }

    /// Loads a built-in model by name.
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "model-a" => Self::from_toml_str(MODEL_A),
            "model-b" => Self::from_toml_str(MODEL_B),
            other => Err(Error::Config(format!(
                "unknown built-in model `{other}` (available: {})",
                BUILTIN_MODELS.join(", ")
            ))),
        }
    }

    /// Resolves a built-in name first, then a path to a TOML model file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if BUILTIN_MODELS.contains(&name_or_path) {
            return Self::builtin(name_or_path);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            return Err(Error::Config(format!(
                "`{name_or_path}` is neither a built-in model nor an existing file"
            )));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ModelFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        file.into_spec()
    }

    pub fn to_toml_string(&self) -> String {
        let file = ModelFile {
            name: self.name.clone(),
            n_states: self.n_states,
            terminal: self.terminal.iter().map(|x| x + 1).collect(),
            rate: self.rate.source().to_string(),
            initial: match &self.initial {
                InitialLaw::UniformNonTerminal => None,
                InitialLaw::Weights(w) => Some(w.clone()),
            },
            transition: self
                .transition
                .iter()
                .map(|r| r.iter().map(|e| e.source().to_string()).collect())
                .collect(),
            covariate: CovariateSection {
                kind: self.covariate.kind,
                dim: self.covariate.dim,
            },
            limit: self.limit,
        };
        toml::to_string(&file).expect("model file serialises")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn terminal(&self) -> &[usize] {
        &self.terminal
    }

    pub fn is_terminal(&self, x: usize) -> bool {
        self.terminal.binary_search(&x).is_ok()
    }

    pub fn terminal_mask(&self) -> Vec<bool> {
        (0..self.n_states).map(|x| self.is_terminal(x)).collect()
    }

    pub fn covariate(&self) -> &CovariateLaw {
        &self.covariate
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariate.dim
    }

    pub fn limit(&self) -> LimitLaw {
        self.limit
    }

    pub fn initial(&self) -> &InitialLaw {
        &self.initial
    }

    /// Returns a copy with a different initial-state law.
    pub fn with_initial(mut self, initial: InitialLaw) -> Result<Self> {
        if let InitialLaw::Weights(w) = &initial {
            if w.len() != self.n_states || w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config("invalid initial weights".into()));
            }
        }
        self.initial = initial;
        Ok(self)
    }

    /// Returns a copy whose transition entry `(row, col)` is replaced.
    pub fn with_transition_entry(mut self, row: usize, col: usize, expr: Expr) -> Result<Self> {
        if row >= self.n_states || col >= self.n_states {
            return Err(Error::InvalidArgument(format!("entry ({row}, {col}) out of range")));
        }
        if expr.arity() > self.covariate.dim {
            return Err(Error::Config("expression arity exceeds covariate dimension".into()));
        }
        self.transition[row][col] = expr;
        Ok(self)
    }

    pub fn rate_at(&self, z: &[f64]) -> f64 {
        self.rate.eval(z)
    }

    pub fn transition_at(&self, z: &[f64]) -> TransitionMatrix {
        let n = self.n_states;
        let mut m = TransitionMatrix::zeros(n);
        for (i, row) in self.transition.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                m.set(i, j, e.eval(z));
            }
        }
        m
    }

    /// Initial-state weights, normalised to sum to one.
    pub fn initial_weights(&self) -> Vec<f64> {
        let raw: Vec<f64> = match &self.initial {
            InitialLaw::Weights(w) => w.clone(),
            InitialLaw::UniformNonTerminal => {
                if self.terminal.len() == self.n_states {
                    vec![1.0; self.n_states]
                } else {
                    (0..self.n_states)
                        .map(|x| if self.is_terminal(x) { 0.0 } else { 1.0 })
                        .collect()
                }
            }
        };
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }

    /// Evaluates the model at a fixed covariate.
    pub fn at(&self, z: &[f64]) -> LocalModel {
        LocalModel {
            z: z.to_vec(),
            rate: self.rate_at(z),
            transition: self.transition_at(z),
            terminal: self.terminal_mask(),
        }
    }

    /// The default validation grid: 101 equispaced points per axis for
    /// `p = 1`, and a coarser product grid in higher dimensions.
    pub fn default_grid(&self) -> Vec<Vec<f64>> {
        let p = self.covariate.dim;
        let per_axis = ((101f64).powf(1.0 / p as f64).floor() as usize).max(3);
        let axis: Vec<f64> = (0..per_axis).map(|i| i as f64 / (per_axis - 1) as f64).collect();
        let mut grid: Vec<Vec<f64>> = vec![Vec::new()];
        for _ in 0..p {
            grid = grid
                .into_iter()
                .flat_map(|prefix| {
                    axis.iter().map(move |&v| {
                        let mut next = prefix.clone();
                        next.push(v);
                        next
                    })
                })
                .collect();
        }
        grid
    }
}

/// A model evaluated at one covariate value.
#[derive(Debug, Clone)]
pub struct LocalModel {
    pub z: Vec<f64>,
    pub rate: f64,
    pub transition: TransitionMatrix,
    pub terminal: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    RowSum { row: usize, sum: f64 },
    EntryRange { row: usize, col: usize, value: f64 },
    NonPositiveRate { value: f64 },
}

/// One failed invariant at one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub z: Vec<f64>,
    pub kind: ViolationKind,
}

impl Violation {
    /// Size of the defect: |row sum - 1|, distance of an entry from `[0,1]`,
    /// or how far the rate is from being positive.
    pub fn magnitude(&self) -> f64 {
        match self.kind {
            ViolationKind::RowSum { sum, .. } => (sum - 1.0).abs(),
            ViolationKind::EntryRange { value, .. } => {
                if value.is_nan() {
                    f64::INFINITY
                } else if value < 0.0 {
                    -value
                } else {
                    value - 1.0
                }
            }
            ViolationKind::NonPositiveRate { value } => {
                if value.is_nan() {
                    f64::INFINITY
                } else {
                    -value
                }
            }
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "z={:?}: ", self.z)?;
        match self.kind {
            ViolationKind::RowSum { row, sum } => {
                write!(f, "row {} sums to {sum} (defect {:e})", row + 1, self.magnitude())
            }
            ViolationKind::EntryRange { row, col, value } => {
                write!(f, "entry ({}, {}) = {value} outside [0, 1]", row + 1, col + 1)
            }
            ViolationKind::NonPositiveRate { value } => write!(f, "rate {value} is not positive"),
        }
    }
}

/// Checks row-stochasticity, entry ranges and rate positivity at every grid
/// point. Returns an empty list iff all invariants hold.
pub fn validate_model(spec: &ModelSpec, grid: &[Vec<f64>]) -> Result<Vec<Violation>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("validation grid is empty".into()));
    }
    let mut out = Vec::new();
    for z in grid {
        if !spec.covariate.contains(z) {
            return Err(Error::InvalidArgument(format!(
                "grid point {z:?} outside the covariate domain [0,1]^{}",
                spec.covariate.dim
            )));
        }
        let rate = spec.rate_at(z);
        if !(rate > 0.0 && rate.is_finite()) {
            out.push(Violation {
                z: z.clone(),
                kind: ViolationKind::NonPositiveRate { value: rate },
            });
        }
        let p = spec.transition_at(z);
        for row in 0..p.n() {
            let mut sum = 0.0;
            for (col, &v) in p.row(row).iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    out.push(Violation {
                        z: z.clone(),
                        kind: ViolationKind::EntryRange { row, col, value: v },
                    });
                }
                sum += v;
            }
            if !((sum - 1.0).abs() <= ROW_SUM_TOL) {
                out.push(Violation {
                    z: z.clone(),
                    kind: ViolationKind::RowSum { row, sum },
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct CovariateSection {
    #[serde(flatten)]
    kind: CovariateKind,
    #[serde(default = "one")]
    dim: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    name: String,
    n_states: usize,
    terminal: Vec<usize>,
    rate: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    initial: Option<Vec<f64>>,
    transition: Vec<Vec<String>>,
    covariate: CovariateSection,
    limit: LimitLaw,
}

impl ModelFile {
    fn into_spec(self) -> Result<ModelSpec> {
        if self.transition.len() != self.n_states {
            return Err(Error::Config(format!(
                "n_states = {} but the transition matrix has {} rows",
                self.n_states,
                self.transition.len()
            )));
        }
        if let Some(&bad) = self.terminal.iter().find(|&&x| x == 0 || x > self.n_states) {
            return Err(Error::Config(format!(
                "terminal label {bad} outside 1..={}",
                self.n_states
            )));
        }
        let parse = |s: &str| Expr::parse(s).map_err(|e| Error::Config(e.to_string()));
        let rate = parse(&self.rate)?;
        let transition = self
            .transition
            .iter()
            .map(|row| row.iter().map(|s| parse(s)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        ModelSpec::new(ModelParts {
            name: self.name,
            terminal: self.terminal.iter().map(|x| x - 1).collect(),
            covariate: CovariateLaw {
                dim: self.covariate.dim,
                kind: self.covariate.kind,
            },
            limit: self.limit,
            initial: match self.initial {
                Some(w) => InitialLaw::Weights(w),
                None => InitialLaw::UniformNonTerminal,
            },
            rate,
            transition,
        })
    }
}
