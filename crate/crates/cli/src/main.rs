use std::fmt::Write as _;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hitcure::bandwidth::{select_bandwidth, BandwidthGrid, FoldScheme};
use hitcure::dataset_io::{read_dataset, write_dataset};
use hitcure::erlang::erlang_mixture_density;
use hitcure::oracle::true_coefficients;
use hitcure::risk::{run_experiment_with, ExperimentConfig, BOXPLOT_CONVENTION};
use hitcure::simulate::simulate_dataset;
use hitcure::{fit, Dataset, KernelConfig, ModelSpec, MAX_K};

const THREADS_ENV: &str = "HITCURE_THREADS";
const MANIFEST_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "hitcure", version, about = "Simulate, estimate and benchmark covariate-indexed hitting-time models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a censored dataset from a model.
    Simulate(SimulateArgs),
    /// Fit the kernel estimators at query covariates.
    Estimate(EstimateArgs),
    /// Exact coefficients and densities of a known model.
    Oracle(OracleArgs),
    /// CPE bandwidth selection over ten sub-samples.
    Bandwidth(BandwidthArgs),
    /// Replicated risk study from a config file.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in model name (model-a, model-b) or path to a model file.
    #[arg(long)]
    model: String,
    /// Number of records.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset path.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct TimeGrid {
    /// Upper end of the time grid for density samples.
    #[arg(long, default_value_t = 10.0)]
    t_max: f64,
    /// Number of equally spaced time points, including 0 and t_max.
    #[arg(long, default_value_t = 201)]
    t_points: usize,
}

impl TimeGrid {
    fn points(&self) -> Result<Vec<f64>> {
        if !(self.t_max > 0.0 && self.t_max.is_finite()) || self.t_points < 2 {
            bail!("time grid needs t_max > 0 and at least 2 points");
        }
        let step = self.t_max / (self.t_points - 1) as f64;
        Ok((0..self.t_points).map(|i| i as f64 * step).collect())
    }
}

#[derive(Args)]
struct EstimateArgs {
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Model whose state count to use; defaults to the largest observed label.
    #[arg(long, conflicts_with = "states")]
    model: Option<String>,
    /// Number of states.
    #[arg(long)]
    states: Option<usize>,
    /// Query covariates. With scalar covariates every number is a query
    /// point; otherwise each occurrence is one comma-separated point.
    #[arg(long, required = true, num_args = 1)]
    z: Vec<String>,
    #[arg(long, default_value_t = MAX_K)]
    k: usize,
    /// Fixed bandwidth; selected by CPE when omitted.
    #[arg(long)]
    h: Option<f64>,
    #[arg(long, default_value_t = hitcure::kernel::DEFAULT_RATE_CAP)]
    rate_cap: f64,
    #[command(flatten)]
    time: TimeGrid,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    model: String,
    /// Covariate, comma-separated for vector covariates.
    #[arg(long)]
    z: String,
    #[arg(long, default_value_t = MAX_K)]
    k: usize,
    #[command(flatten)]
    time: TimeGrid,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Folds {
    Literal,
    Proportional,
}

impl From<Folds> for FoldScheme {
    fn from(f: Folds) -> Self {
        match f {
            Folds::Literal => FoldScheme::Literal,
            Folds::Proportional => FoldScheme::Proportional,
        }
    }
}

#[derive(Args)]
struct BandwidthArgs {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated candidate bandwidths; log-spaced default otherwise.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, value_enum, default_value_t = Folds::Literal)]
    folds: Folds,
    /// Also write the CSV here.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Serialize)]
struct RunManifest {
    manifest_version: u32,
    tool_version: &'static str,
    command: Vec<String>,
    subcommand: &'static str,
    config_path: Option<String>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    seed: Option<u64>,
    threads: usize,
    duration_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    resolved_config: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    boxplot_convention: Option<&'static str>,
    warnings: Vec<String>,
}

struct Run {
    subcommand: &'static str,
    started: Instant,
    config_path: Option<String>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    seed: Option<u64>,
    resolved_config: Option<String>,
    boxplot_convention: Option<&'static str>,
    warnings: Vec<String>,
}

impl Run {
    fn new(subcommand: &'static str) -> Self {
        Run {
            subcommand,
            started: Instant::now(),
            config_path: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            resolved_config: None,
            boxplot_convention: None,
            warnings: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    fn write(&mut self, path: &Path, contents: &str) -> Result<()> {
        fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(path.display().to_string());
        Ok(())
    }

    fn warn(&mut self, message: String) {
        eprintln!("warning: {message}");
        self.warnings.push(message);
    }

    fn finish(self, manifest_path: &Path) -> Result<()> {
        let manifest = RunManifest {
            manifest_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION"),
            command: std::env::args().collect(),
            subcommand: self.subcommand,
            config_path: self.config_path,
            inputs: self.inputs,
            outputs: self.outputs,
            seed: self.seed,
            threads: rayon::current_num_threads(),
            duration_seconds: self.started.elapsed().as_secs_f64(),
            resolved_config: self.resolved_config,
            boxplot_convention: self.boxplot_convention,
            warnings: self.warnings,
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(manifest_path, json + "\n").with_context(|| format!("writing {}", manifest_path.display()))
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn parse_numbers(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<f64>().with_context(|| format!("`{s}` is not a number"))
        })
        .collect()
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_dataset(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

fn labels(states: impl IntoIterator<Item = usize>) -> String {
    states.into_iter().map(|x| (x + 1).to_string()).collect::<Vec<_>>().join(",")
}

fn fmt_point(z: &[f64]) -> String {
    z.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let mut run = Run::new("simulate");
    let spec = ModelSpec::load(&args.model)?;
    run.seed = Some(args.seed);
    run.config_path = Some(args.model.clone());
    let data = simulate_dataset(&spec, args.n, args.seed)?;
    let mut buf = Vec::new();
    write_dataset(&data, &mut buf)?;
    run.write(&args.output, std::str::from_utf8(&buf)?)?;
    run.finish(&sidecar(&args.output))
}

fn query_points(raw: &[String], dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut points = Vec::new();
    for item in raw {
        let nums = parse_numbers(item)?;
        if dim == 1 {
            points.extend(nums.into_iter().map(|v| vec![v]));
        } else if nums.len() == dim {
            points.push(nums);
        } else {
            bail!("query point `{item}` has {} coordinates, expected {dim}", nums.len());
        }
    }
    Ok(points)
}

fn cmd_estimate(args: EstimateArgs) -> Result<()> {
    let mut run = Run::new("estimate");
    run.input(&args.data);
    let data = load_dataset(&args.data)?;
    let n_states = match (&args.model, args.states) {
        (Some(m), _) => {
            run.config_path = Some(m.clone());
            ModelSpec::load(m)?.n_states()
        }
        (None, Some(s)) => s,
        (None, None) => data.observed_state_count(),
    };
    let dim = data.covariate_dim().unwrap_or(1);
    let points = query_points(&args.z, dim)?;
    let times = args.time.points()?;
    let h = match args.h {
        Some(h) => h,
        None => {
            let sel = select_bandwidth(&data, &BandwidthGrid::default_for(data.len()), FoldScheme::Literal)
                .context("automatic bandwidth selection failed; pass --h")?;
            sel.h
        }
    };
    let cfg = KernelConfig::new(h, args.rate_cap)?;
    ensure_dir(&args.out_dir)?;

    let mut estimates = String::from("z,h,lambda_hat,rate_degenerate,weights_empty,a_n,state,coeff_mass,cure_rate\n");
    let mut curves = String::from("z,state,t,density,survival\n");
    for z in &points {
        let f = fit(&data, z, &cfg, n_states, args.k)?;
        if f.is_degenerate() {
            run.warn(format!(
                "degenerate fit at z={} (rate_degenerate={}, weights_empty={})",
                fmt_point(z),
                f.rate_degenerate,
                f.weights_empty
            ));
        }
        let zs = fmt_point(z);
        let a_n = labels(f.a_n.iter().copied());
        for x in 0..n_states {
            writeln!(
                estimates,
                "{zs},{h},{},{},{},\"{a_n}\",{},{},{}",
                f.lambda_hat,
                f.rate_degenerate,
                f.weights_empty,
                x + 1,
                f.coeffs.hitting_mass(x),
                f.cure_rate(x)
            )?;
            for &t in &times {
                writeln!(curves, "{zs},{},{t},{},{}", x + 1, f.density(x, t), f.survival(x, t))?;
            }
        }
    }
    run.write(&args.out_dir.join("estimates.csv"), &estimates)?;
    run.write(&args.out_dir.join("curves.csv"), &curves)?;
    run.finish(&args.out_dir.join("manifest.json"))
}

fn cmd_oracle(args: OracleArgs) -> Result<()> {
    let mut run = Run::new("oracle");
    run.config_path = Some(args.model.clone());
    let spec = ModelSpec::load(&args.model)?;
    let z = parse_numbers(&args.z)?;
    if z.len() != spec.covariate_dim() {
        bail!("model covariate has dimension {}, got {} coordinates", spec.covariate_dim(), z.len());
    }
    let times = args.time.points()?;
    let table = true_coefficients(&spec, &z, args.k)?;
    let lambda = spec.rate_at(&z);
    ensure_dir(&args.out_dir)?;

    let mut coeffs = String::from("j,state,value\n");
    for j in 0..=table.k {
        for x in 0..spec.n_states() {
            writeln!(coeffs, "{j},{},{}", x + 1, table.get(j, x))?;
        }
    }
    let mut density = String::from("t,state,value\n");
    for x in 0..spec.n_states() {
        let w = table.mixture_weights(x);
        for &t in &times {
            writeln!(density, "{t},{},{}", x + 1, erlang_mixture_density(&w, lambda, t))?;
        }
    }
    run.write(&args.out_dir.join("coefficients.csv"), &coeffs)?;
    run.write(&args.out_dir.join("density.csv"), &density)?;
    run.finish(&args.out_dir.join("manifest.json"))
}

fn cmd_bandwidth(args: BandwidthArgs) -> Result<()> {
    let mut run = Run::new("bandwidth");
    run.input(&args.data);
    let data = load_dataset(&args.data)?;
    let grid = match &args.grid {
        Some(g) => BandwidthGrid::new(parse_numbers(g)?)?,
        None => BandwidthGrid::default_for(data.len()),
    };
    let sel = select_bandwidth(&data, &grid, args.folds.into())?;
    let mut csv = String::from("fold,h\n");
    for (i, h) in sel.fold_minimizers.iter().enumerate() {
        writeln!(csv, "{},{h}", i + 1)?;
    }
    writeln!(csv, "mean,{}", sel.h)?;
    print!("{csv}");
    if let Some(out) = &args.output {
        run.write(out, &csv)?;
        run.finish(&sidecar(out))?;
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let mut run = Run::new("bench");
    run.input(&args.config);
    run.config_path = Some(args.config.display().to_string());
    let text = fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut config = ExperimentConfig::from_toml_str(&text)?;
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    // a relative model path is resolved against the config file
    if !hitcure::model::BUILTIN_MODELS.contains(&config.model.as_str()) {
        let p = Path::new(&config.model);
        if p.is_relative() {
            if let Some(parent) = args.config.parent() {
                let joined = parent.join(p);
                if joined.exists() {
                    config.model = joined.display().to_string();
                }
            }
        }
    }
    let spec = ModelSpec::load(&config.model)?;
    run.seed = Some(config.master_seed);
    run.resolved_config = Some(config.to_toml_string());
    run.boxplot_convention = Some(BOXPLOT_CONVENTION);
    let report = run_experiment_with(&config, &spec)?;

    let failed = report.rows.iter().filter(|r| !r.is_ok()).count();
    let degenerate = report.rows.iter().filter(|r| r.is_ok() && r.degenerate).count();
    if failed > 0 {
        run.warn(format!("{failed} of {} rows could not be fitted", report.rows.len()));
    }
    if degenerate > 0 {
        run.warn(format!("{degenerate} of {} rows are degenerate fits", report.rows.len()));
    }
    ensure_dir(&args.out_dir)?;
    run.write(&args.out_dir.join("report.csv"), &report.to_csv())?;
    run.write(&args.out_dir.join("boxplots.csv"), &report.boxplots_csv())?;
    run.finish(&args.out_dir.join("manifest.json"))
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_threads()?;
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Bandwidth(a) => cmd_bandwidth(a),
        Command::Bench(a) => cmd_bench(a),
    }
}
