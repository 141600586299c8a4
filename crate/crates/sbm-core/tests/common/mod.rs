//! Test-only oracles, independent of the implementation paths they check:
//! adaptive numerical quadrature for the collapsed marginals and exhaustive
//! enumeration of small allocation problems.

#![allow(dead_code)]

use nalgebra::DMatrix;
use sbm_core::model::{
    log_crp_z, log_prior_d, log_prior_k, ChainState, GroupData, HyperParams, ProblemData,
};

/// Adaptive Simpson integration with interval bisection.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(a: f64, fa: f64, b: f64, fb: f64, fm: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn rec(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(a, fa, m, fm, flm);
        let right = simpson(m, fm, b, fb, frm);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1)
            + rec(f, m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1)
    }
    let m = 0.5 * (a + b);
    let (fa, fb, fm) = (f(a), f(b), f(m));
    let whole = simpson(a, fa, b, fb, fm);
    rec(f, a, fa, b, fb, m, fm, whole, tol, 48)
}

/// Quadrature oracle for the one-dimensional leading-block marginal:
/// integral over (mu, sigma^2) of prod_i N(x_i | mu, s2) * N(mu | 0, s2/k0)
/// * InvGamma(s2 | nu0/2, delta/2), integrated in log-variance coordinates
/// with the inner mu window scaled to the conditional spread at each s2.
pub fn quad_marg_left_1d(xs: &[f64], kappa0: f64, nu0: f64, delta: f64) -> f64 {
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let s_hat = ((delta + sxx) / (nu0 + n)).max(1e-3);
    let log_ig_const = 0.5 * nu0 * (delta / 2.0).ln() - statrs::function::gamma::ln_gamma(nu0 / 2.0);

    // log of the full (mu, s2) integrand, jacobian for t = ln s2 included
    let log_f = |mu: f64, t: f64| -> f64 {
        let s2 = t.exp();
        let mut lg = log_ig_const - (nu0 / 2.0 + 1.0) * t - delta / (2.0 * s2) + t;
        for &x in xs {
            lg += -0.5 * (x - mu) * (x - mu) / s2
                - 0.5 * (2.0 * std::f64::consts::PI * s2).ln();
        }
        lg + (-0.5 * mu * mu * kappa0 / s2
            - 0.5 * (2.0 * std::f64::consts::PI * s2 / kappa0).ln())
    };

    let t0 = s_hat.ln();
    let mu0 = sx / (kappa0 + n);
    let log_peak = log_f(mu0, t0);

    // trim the outer range to where the profiled integrand still matters
    let profile = |t: f64| log_f(sx / (kappa0 + n), t) - log_peak;
    let mut t_lo = t0;
    while profile(t_lo) > -45.0 && t_lo > t0 - 60.0 {
        t_lo -= 0.5;
    }
    let mut t_hi = t0;
    while profile(t_hi) > -45.0 && t_hi < t0 + 120.0 {
        t_hi += 0.5;
    }

    let outer = |t: f64| -> f64 {
        let s2 = t.exp();
        // conditional over mu is exactly Gaussian with this centre and std
        let centre = sx / (kappa0 + n);
        let std = (s2 / (kappa0 + n)).sqrt();
        let w = 12.0 * std;
        adaptive_simpson(&|mu: f64| (log_f(mu, t) - log_peak).exp(), centre - w, centre + w, 5e-12)
    };
    let val = adaptive_simpson(&outer, t_lo, t_hi, 5e-12);
    val.ln() + log_peak
}

/// Quadrature oracle for one trailing column: integral over sigma^2 of
/// prod_i N(x_i | 0, s2) * Inv-chi^2(s2 | lambda0, sigma0^2).
pub fn quad_marg_right_col(xs: &[f64], lambda0: f64, sigma0_sq: f64) -> f64 {
    let n = xs.len() as f64;
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let s_hat = ((lambda0 * sigma0_sq + sxx) / (lambda0 + n)).max(1e-3);
    let a = lambda0 * sigma0_sq / 2.0;
    let log_const = 0.5 * lambda0 * a.ln() - statrs::function::gamma::ln_gamma(lambda0 / 2.0);
    let log_f = |t: f64| -> f64 {
        let s2 = t.exp();
        let mut lg = log_const - (lambda0 / 2.0 + 1.0) * s2.ln() - a / s2 + t;
        for &x in xs {
            lg += -0.5 * x * x / s2 - 0.5 * (2.0 * std::f64::consts::PI * s2).ln();
        }
        lg
    };
    let t0 = s_hat.ln();
    let log_peak = log_f(t0);
    let mut t_lo = t0;
    while log_f(t_lo) - log_peak > -45.0 && t_lo > t0 - 60.0 {
        t_lo -= 0.5;
    }
    let mut t_hi = t0;
    while log_f(t_hi) - log_peak > -45.0 && t_hi < t0 + 120.0 {
        t_hi += 0.5;
    }
    adaptive_simpson(&|t: f64| (log_f(t) - log_peak).exp(), t_lo, t_hi, 5e-12).ln() + log_peak
}

/// Exhaustively enumerate the collapsed posterior of a small problem over
/// labelled allocation vectors, K = 1..k_max and the supported d values,
/// and return the (K_empty, d) probability table.
pub fn enumerate_posterior(
    x: &DMatrix<f64>,
    hp: &HyperParams,
    k_max: usize,
) -> std::collections::BTreeMap<(usize, usize), f64> {
    let n = x.nrows();
    let data = ProblemData {
        groups: vec![GroupData { xs: vec![x.clone()] }],
    };
    let mut weights: Vec<((usize, usize), f64)> = Vec::new();
    for k in 1..=k_max {
        let count = (k as u64).pow(n as u32);
        for code in 0..count {
            let mut z = vec![0u32; n];
            let mut c = code;
            for zi in z.iter_mut() {
                *zi = (c % k as u64) as u32;
                c /= k as u64;
            }
            let state = ChainState::from_allocations(
                &data,
                hp,
                1,
                &[(z.clone(), k, vec![0u32; k], 1)],
            )
            .unwrap();
            let kempty = state.groups[0].kempty();
            let counts = state.groups[0].counts();
            let base = log_crp_z(&counts, k, hp.alpha) + log_prior_k(k, hp);
            for d in 1..=hp.m_cap {
                let pd = log_prior_d(d, kempty, hp);
                if pd == f64::NEG_INFINITY {
                    continue;
                }
                let mut lw = base + pd;
                for st in &state.groups[0].blocks[0].stats {
                    lw += sbm_core::model::log_marg_left(st, d, hp).unwrap();
                    lw += sbm_core::model::log_marg_right(st, d, hp);
                }
                weights.push(((kempty, d), lw));
            }
        }
    }
    let max = weights
        .iter()
        .map(|&(_, w)| w)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut table = std::collections::BTreeMap::new();
    let mut total = 0.0;
    for ((ke, d), w) in weights {
        let p = (w - max).exp();
        *table.entry((ke, d)).or_insert(0.0) += p;
        total += p;
    }
    for v in table.values_mut() {
        *v /= total;
    }
    table
}

/// Total-variation distance between two tables over the same key space.
pub fn tv_distance<K: Ord + Clone>(
    a: &std::collections::BTreeMap<K, f64>,
    b: &std::collections::BTreeMap<K, f64>,
) -> f64 {
    let mut keys: Vec<K> = a.keys().cloned().collect();
    for k in b.keys() {
        if !a.contains_key(k) {
            keys.push(k.clone());
        }
    }
    let mut acc = 0.0;
    for k in keys {
        let pa = a.get(&k).copied().unwrap_or(0.0);
        let pb = b.get(&k).copied().unwrap_or(0.0);
        acc += (pa - pb).abs();
    }
    acc / 2.0
}

/// Fixed small embedding with two loose groups, O(1) scale.
pub fn toy_matrix(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
    use rand::Rng;
    let mut rng = sbm_core::util::stream_rng(seed, 99);
    DMatrix::from_fn(n, m, |i, j| {
        let centre = if i % 2 == 0 { 0.6 } else { -0.4 };
        let base = if j == 0 { centre } else { 0.0 };
        base + 0.35 * (rng.random::<f64>() - 0.5)
    })
}
