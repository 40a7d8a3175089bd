//! Test-local reference implementations, written independently of the
//! library internals.

#![allow(dead_code)]

use hitcure::model::TransitionMatrix;
use rand::Rng;

/// Inverse-CDF draw from a probability row.
pub fn draw<R: Rng>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap()
}

/// Jump-chain walk from `start`; `Some(steps)` on entering `terminal`
/// within `cap` jumps. Stops early in a state whose self-loop has mass one.
pub fn hit_step<R: Rng>(p: &TransitionMatrix, terminal: &[bool], start: usize, cap: usize, rng: &mut R) -> Option<usize> {
    let mut x = start;
    for step in 0..=cap {
        if terminal[x] {
            return Some(step);
        }
        if step == cap || p.get(x, x) == 1.0 {
            return None;
        }
        x = draw(p.row(x), rng);
    }
    None
}

/// `Σ_{j=1}^{k} c_j(x)` by propagating the distribution of the chain killed on
/// entering the terminal set.
pub fn hitting_mass(p: &TransitionMatrix, terminal: &[bool], x: usize, k: usize) -> f64 {
    let n = p.n();
    let mut alive = vec![0.0; n];
    alive[x] = 1.0;
    if terminal[x] {
        return 0.0;
    }
    let mut absorbed = 0.0;
    for _ in 0..k {
        let mut next = vec![0.0; n];
        for (a, &mass) in alive.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for b in 0..n {
                next[b] += mass * p.get(a, b);
            }
        }
        for b in 0..n {
            if terminal[b] {
                absorbed += next[b];
                next[b] = 0.0;
            }
        }
        alive = next;
    }
    absorbed
}

/// Erlang(j, λ) density through the log-Gamma function.
pub fn erlang_log_gamma(j: usize, lambda: f64, t: f64) -> f64 {
    let jf = j as f64;
    (jf * lambda.ln() + (jf - 1.0) * t.ln() - lambda * t - statrs::function::gamma::ln_gamma(jf)).exp()
}

pub fn three_sigma(p: f64, n: u64) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}
