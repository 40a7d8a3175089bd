//! Weighted Erlang mixtures and the composite Simpson rule.

/// Erlang(j, λ) densities at `t` for `j = 1..=k`, via
/// `term_{j+1} = term_j · λt / j` starting from `term_1 = λ e^{-λt}`.
pub fn erlang_terms(lambda: f64, t: f64, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(k);
    let lt = lambda * t;
    let mut term = lambda * (-lt).exp();
    for j in 1..=k {
        out.push(term);
        term *= lt / j as f64;
    }
    out
}

/// `Σ_{j=1}^{k} c_j · Erlang(j, λ)(t)` where `coeffs[j - 1] = c_j`.
pub fn erlang_mixture_density(coeffs: &[f64], lambda: f64, t: f64) -> f64 {
    let lt = lambda * t;
    let mut term = lambda * (-lt).exp();
    let mut acc = 0.0;
    for (j, c) in coeffs.iter().enumerate() {
        acc += c * term;
        term *= lt / (j + 1) as f64;
    }
    acc
}

/// `P(T > t)` for the sub-distribution `Σ_j c_j Erlang(j, λ)`:
/// `1 - Σ_j c_j P(Poisson(λt) ≥ j)`.
pub fn erlang_mixture_survival(coeffs: &[f64], lambda: f64, t: f64) -> f64 {
    let lt = lambda * t;
    let mut pmf = (-lt).exp();
    // cdf_below = P(Poisson(λt) < j)
    let mut cdf_below = 0.0;
    let mut mass = 0.0;
    for (i, c) in coeffs.iter().enumerate() {
        cdf_below += pmf;
        pmf *= lt / (i + 1) as f64;
        mass += c * (1.0 - cdf_below).max(0.0);
    }
    1.0 - mass
}

/// Upper integration limit beyond which Erlang(k, λ) keeps less than 1e-12 mass.
pub fn tail_horizon(k: usize, lambda: f64) -> f64 {
    let k = k.max(1) as f64;
    (k + 10.0 * k.sqrt()) / lambda
}

/// Composite Simpson rule with `panels` subintervals (rounded up to even).
pub fn simpson<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, panels: usize) -> f64 {
    let n = panels.max(2).next_multiple_of(2);
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}
