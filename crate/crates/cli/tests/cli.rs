use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hitcure::oracle::true_coefficients;
use hitcure::ModelSpec;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hitcure"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "hitcure {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| split_csv(l))
        .collect()
}

/// Splits on commas outside double quotes.
fn split_csv(line: &str) -> Vec<String> {
    let mut fields = vec![String::new()];
    let mut quoted = false;
    for c in line.chars() {
        match c {
            '"' => quoted = !quoted,
            ',' if !quoted => fields.push(String::new()),
            _ => fields.last_mut().unwrap().push(c),
        }
    }
    fields
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn simulate(dir: &Path, model: &str, n: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("{model}-{n}-{seed}.txt"));
    run(&[
        "simulate",
        "--model",
        model,
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "-o",
        p(&out),
    ]);
    out
}

#[test]
fn simulate_is_deterministic_and_documented() {
    let dir = TempDir::new().unwrap();
    let a = simulate(dir.path(), "model-a", 100, 7);
    let first = fs::read(&a).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    assert!(text.starts_with("# hitcure-dataset v1 covariate_dim=1 seed=7"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 100);
    let m = manifest(&dir.path().join("model-a-100-7.txt.manifest.json"));
    assert_eq!(m["seed"], 7);
    assert_eq!(m["subcommand"], "simulate");
    fs::remove_file(&a).unwrap();
    simulate(dir.path(), "model-a", 100, 7);
    assert_eq!(fs::read(&a).unwrap(), first);
}

/// `P(censored) = E[1 - Σ_{j ≤ L} c_j(Y_0, Z)]` with `L = 6 + Poisson(1)`,
/// `Y_0` uniform on states 1..5 and `Z ~ Beta(1.4, 2.7)`, by quadrature.
fn model_b_censoring_probability() -> f64 {
    let b = ModelSpec::builtin("model-b").unwrap();
    let poisson: Vec<f64> = {
        let mut w = vec![(-1.0f64).exp()];
        for i in 1..40 {
            let prev = w[i - 1];
            w.push(prev / i as f64);
        }
        w
    };
    let panels = 4000;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=panels {
        let z = i as f64 / panels as f64;
        let weight = if i == 0 || i == panels {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let dens = z.powf(0.4) * (1.0 - z).powf(1.7);
        let table = true_coefficients(&b, &[z], 6 + 39).unwrap();
        let mut censored = 0.0;
        for x in 0..5 {
            for (extra, pw) in poisson.iter().enumerate() {
                let hit: f64 = (1..=6 + extra).map(|j| table.get(j, x)).sum();
                censored += pw * (1.0 - hit) / 5.0;
            }
        }
        num += weight * dens * censored;
        den += weight * dens;
    }
    num / den
}

#[test]
fn simulated_censoring_matches_expectation() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), "model-b", 800, 3);
    let text = fs::read_to_string(data).unwrap();
    let records: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    let censored = records.iter().filter(|l| l.split(';').nth(1).unwrap().trim() == "0").count();
    let freq = censored as f64 / records.len() as f64;
    let expected = model_b_censoring_probability();
    let band = 3.0 * (expected * (1.0 - expected) / 800.0).sqrt();
    assert!((freq - expected).abs() <= band, "frequency {freq}, expected {expected} ± {band}");
}

#[test]
fn oracle_tables_have_the_documented_shape() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("oracle");
    run(&["oracle", "--model", "model-a", "--z", "0.5", "--k", "130", "--out-dir", p(&out)]);
    let coeffs = fs::read_to_string(out.join("coefficients.csv")).unwrap();
    assert_eq!(coeffs.lines().next(), Some("j,state,value"));
    assert_eq!(coeffs.lines().count() - 1, 131 * 6);
    let density = fs::read_to_string(out.join("density.csv")).unwrap();
    assert_eq!(density.lines().next(), Some("t,state,value"));
    assert_eq!(density.lines().count() - 1, 201 * 6);
    let m = manifest(&out.join("manifest.json"));
    assert_eq!(m["outputs"].as_array().unwrap().len(), 2);
    // row 4 puts 0.2 on a terminal state
    let rows = csv_rows(&out.join("coefficients.csv"));
    let c14 = rows.iter().find(|r| r[0] == "1" && r[1] == "4").unwrap();
    assert_eq!(c14[2].parse::<f64>().unwrap(), 0.2);
}

#[test]
fn bandwidth_reports_ten_folds_and_their_mean() {
    let dir = TempDir::new().unwrap();
    let data = simulate(dir.path(), "model-a", 200, 7);
    let out = dir.path().join("h.csv");
    let res = run(&["bandwidth", "--data", p(&data), "-o", p(&out)]);
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert_eq!(stdout, fs::read_to_string(&out).unwrap());
    let rows = csv_rows(&out);
    assert_eq!(rows.len(), 11);
    let folds: Vec<f64> = rows[..10].iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(rows[10][0], "mean");
    let mean: f64 = rows[10][1].parse().unwrap();
    assert!((mean - folds.iter().sum::<f64>() / 10.0).abs() < 1e-15);
    assert!(dir.path().join("h.csv.manifest.json").exists());
}

#[test]
fn degenerate_single_record_fit_is_a_warning() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("one.txt");
    fs::write(&data, "# hitcure-dataset v1 covariate_dim=1 seed=none\n0.5 ; 0 ; 0 ; 1\n").unwrap();
    let out = dir.path().join("est");
    let res = run(&[
        "estimate", "--data", p(&data), "--states", "3", "--z", "0.5", "--h", "0.2", "--out-dir", p(&out),
    ]);
    assert!(String::from_utf8_lossy(&res.stderr).contains("degenerate"));
    let rows = csv_rows(&out.join("estimates.csv"));
    assert_eq!(rows.len(), 3);
    // z,h,lambda_hat,rate_degenerate,weights_empty,a_n,state,coeff_mass,cure_rate
    assert_eq!(rows[0][3], "true");
    assert_eq!(rows[0][2].parse::<f64>().unwrap(), 5.0);
    assert_eq!(rows[0][5], "");
    let m = manifest(&out.join("manifest.json"));
    assert!(!m["warnings"].as_array().unwrap().is_empty());
}

#[test]
fn malformed_dataset_names_the_line() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("bad.txt");
    fs::write(
        &data,
        "# hitcure-dataset v1 covariate_dim=1 seed=none\n0.5 ; 1 ; 1.0 ; 1,2\n0.5 ; maybe ; 1.0 ; 1,2\n",
    )
    .unwrap();
    let out = bin()
        .args(["estimate", "--data", p(&data), "--z", "0.5", "--h", "0.2", "--out-dir", p(&dir.path().join("o"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&out.stderr));
}

const PLUG_IN_MODEL: &str = r#"
name = "plug-in"
n_states = 4
terminal = [3, 4]
rate = "2"
transition = [
  ["0.25", "0.25", "0.5", "0"],
  ["0.5", "0", "0", "0.5"],
  ["0", "0", "1", "0"],
  ["0", "0", "0", "1"],
]
[covariate]
law = "uniform"
dim = 1
[limit]
base = 3
poisson_mean = 1.0
"#;

/// Transition counts in exact proportion to the model rows and holding
/// times equal to `1/λ`, so every kernel estimate equals its target.
const PLUG_IN_DATA: &str = "# hitcure-dataset v1 covariate_dim=1 seed=none
0.5 ; 1 ; 0.5 ; 1,3
0.5 ; 1 ; 0.5 ; 1,3
0.5 ; 1 ; 1.5 ; 1,1,2,4
0.5 ; 0 ; 0.5 ; 2,1
";

#[test]
fn plug_in_dataset_reproduces_the_oracle() {
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("plug-in.toml");
    let data = dir.path().join("plug-in.txt");
    fs::write(&model, PLUG_IN_MODEL).unwrap();
    fs::write(&data, PLUG_IN_DATA).unwrap();
    let oracle = dir.path().join("oracle");
    let est = dir.path().join("est");
    run(&["oracle", "--model", p(&model), "--z", "0.5", "--out-dir", p(&oracle)]);
    run(&[
        "estimate", "--data", p(&data), "--model", p(&model), "--z", "0.5", "--h", "0.3", "--out-dir", p(&est),
    ]);

    let estimates = csv_rows(&est.join("estimates.csv"));
    assert_eq!(estimates[0][2], "2");
    assert_eq!(estimates[0][5], "3,4");
    let coeffs = csv_rows(&oracle.join("coefficients.csv"));
    for row in &estimates {
        let state = &row[6];
        let mass: f64 = coeffs
            .iter()
            .filter(|c| &c[1] == state && c[0] != "0")
            .map(|c| c[2].parse::<f64>().unwrap())
            .sum();
        let est_mass: f64 = row[7].parse().unwrap();
        assert!((mass - est_mass).abs() < 1e-14, "state {state}: {mass} vs {est_mass}");
    }

    let truth = csv_rows(&oracle.join("density.csv"));
    let curves = csv_rows(&est.join("curves.csv"));
    assert_eq!(truth.len(), curves.len());
    for c in &curves {
        // z,state,t,density,survival against t,state,value
        let t = truth.iter().find(|r| r[0] == c[2] && r[1] == c[1]).unwrap();
        let (a, b): (f64, f64) = (c[3].parse().unwrap(), t[2].parse().unwrap());
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300), "t={} state={}: {a} vs {b}", c[2], c[1]);
    }
}

#[test]
fn terminal_set_is_recovered_across_seeds() {
    let dir = TempDir::new().unwrap();
    let mut hits = 0;
    for seed in 0..10 {
        let data = simulate(dir.path(), "model-a", 800, seed);
        let out = dir.path().join(format!("est{seed}"));
        run(&[
            "estimate", "--data", p(&data), "--model", "model-a", "--z", "0.5", "--t-points", "3", "--out-dir", p(&out),
        ]);
        let rows = csv_rows(&out.join("estimates.csv"));
        if rows.iter().all(|r| r[5] == "5,6") {
            hits += 1;
        }
    }
    assert!(hits >= 9, "A_n = {{5,6}} in {hits} of 10 datasets");
}

fn bench(config: &Path, out: &Path, threads: &str) {
    let res = bin()
        .env("HITCURE_THREADS", threads)
        .args(["bench", "--config", p(config), "--out-dir", p(out)])
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn bench_is_reproducible_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("small.toml");
    fs::write(
        &config,
        "model = \"model-a\"\nsample_sizes = [100, 200]\nreplicates = 4\nz_grid = [0.3, 0.6]\nk = 40\nmaster_seed = 5\npanels = 2048\n",
    )
    .unwrap();
    let (one, many) = (dir.path().join("one"), dir.path().join("many"));
    bench(&config, &one, "1");
    bench(&config, &many, "3");
    let report = fs::read(one.join("report.csv")).unwrap();
    assert_eq!(report, fs::read(many.join("report.csv")).unwrap());
    assert_eq!(
        fs::read(one.join("boxplots.csv")).unwrap(),
        fs::read(many.join("boxplots.csv")).unwrap()
    );
    assert_eq!(csv_rows(&one.join("report.csv")).len(), 2 * 2 * 4);
    let boxplots = fs::read_to_string(one.join("boxplots.csv")).unwrap();
    assert_eq!(boxplots.lines().next(), Some("metric,n,z,q1,median,q3,lo_whisker,hi_whisker"));
    let m = manifest(&one.join("manifest.json"));
    assert_eq!(m["seed"], 5);
    assert_eq!(m["threads"], 1);
    assert!(m["boxplot_convention"].as_str().unwrap().contains("Tukey"));
    assert!(m["resolved_config"].as_str().unwrap().contains("master_seed = 5"));
}

#[test]
fn full_protocol_config_gives_800_rows() {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/model-a.toml");
    let dir = TempDir::new().unwrap();
    bench(&config, dir.path(), "4");
    assert_eq!(csv_rows(&dir.path().join("report.csv")).len(), 800);
    // 3 metrics x 4 sizes x 4 query points
    assert_eq!(csv_rows(&dir.path().join("boxplots.csv")).len(), 48);
}
