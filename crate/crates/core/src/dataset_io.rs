//! Line-delimited dataset files.
//!
//! ```text
//! # hitcure-dataset v1 covariate_dim=1 seed=7
//! 0.4172 ; 1 ; 3.0518 ; 2,3,1,4,5
//! 0.9031 ; 0 ; 4.113 ; 1,2,3,3,1,4,1
//! ```
//!
//! Fields are `z_1,...,z_p ; delta ; hit_time ; y_0,...,y_m` with 1-based
//! state labels and `delta` written as `0`/`1`. Floats use the shortest
//! representation that round-trips exactly.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::simulate::{Dataset, ObservationRecord};

pub const DATASET_MAGIC: &str = "hitcure-dataset";
pub const DATASET_VERSION: u32 = 1;

pub fn format_dataset(data: &Dataset) -> String {
    let mut out = String::new();
    let p = data.covariate_dim().unwrap_or(1);
    let seed = data.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
    writeln!(out, "# {DATASET_MAGIC} v{DATASET_VERSION} covariate_dim={p} seed={seed}").unwrap();
    for r in &data.records {
        let z: Vec<String> = r.z.iter().map(|v| v.to_string()).collect();
        let ys: Vec<String> = r.states.iter().map(|y| (y + 1).to_string()).collect();
        writeln!(
            out,
            "{} ; {} ; {} ; {}",
            z.join(","),
            u8::from(r.delta),
            r.hit_time,
            ys.join(",")
        )
        .unwrap();
    }
    out
}

pub fn write_dataset<W: Write>(data: &Dataset, mut w: W) -> Result<()> {
    w.write_all(format_dataset(data).as_bytes())?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate();
    let (dim, seed) = match lines.next() {
        Some((_, line)) => parse_header(&line?)?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty file, expected header".into(),
            })
        }
    };
    let mut records = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        records.push(parse_record(trimmed, dim).map_err(|message| Error::Parse { line: lineno, message })?);
    }
    let mut data = Dataset::new(records)?;
    data.seed = seed;
    Ok(data)
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    read_dataset(text.as_bytes())
}

fn parse_header(line: &str) -> Result<(usize, Option<u64>)> {
    let err = |message: String| Error::Parse { line: 1, message };
    let mut parts = line
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| err("missing `#` header line".into()))?
        .split_whitespace();
    if parts.next() != Some(DATASET_MAGIC) {
        return Err(err(format!("header must start with `# {DATASET_MAGIC}`")));
    }
    let version = parts.next().unwrap_or("");
    if version != format!("v{DATASET_VERSION}") {
        return Err(err(format!("unsupported dataset version `{version}`")));
    }
    let mut dim = None;
    let mut seed = None;
    for kv in parts {
        match kv.split_once('=') {
            Some(("covariate_dim", v)) => {
                dim = Some(v.parse::<usize>().map_err(|_| err(format!("bad covariate_dim `{v}`")))?)
            }
            Some(("seed", "none")) => seed = None,
            Some(("seed", v)) => seed = Some(v.parse::<u64>().map_err(|_| err(format!("bad seed `{v}`")))?),
            _ => return Err(err(format!("unrecognised header field `{kv}`"))),
        }
    }
    match dim {
        Some(d) if d > 0 => Ok((d, seed)),
        _ => Err(err("header lacks a positive covariate_dim".into())),
    }
}

fn parse_record(line: &str, dim: usize) -> std::result::Result<ObservationRecord, String> {
    let fields: Vec<&str> = line.split(';').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 `;`-separated fields, found {}", fields.len()));
    }
    let z = fields[0]
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| format!("bad covariate `{s}`")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if z.len() != dim {
        return Err(format!("expected {dim} covariate values, found {}", z.len()));
    }
    let delta = match fields[1] {
        "1" => true,
        "0" => false,
        other => return Err(format!("delta must be 0 or 1, found `{other}`")),
    };
    let hit_time = fields[2]
        .parse::<f64>()
        .map_err(|_| format!("bad hit time `{}`", fields[2]))?;
    if !(hit_time >= 0.0) || !hit_time.is_finite() {
        return Err(format!("hit time must be finite and nonnegative, found {hit_time}"));
    }
    let states = fields[3]
        .split(',')
        .map(|s| match s.trim().parse::<usize>() {
            Ok(y) if y >= 1 => Ok(y - 1),
            _ => Err(format!("bad state label `{s}` (labels start at 1)")),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(ObservationRecord {
        z,
        states,
        hit_time,
        delta,
        limit_draw: None,
    })
}
