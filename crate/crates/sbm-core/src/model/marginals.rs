//! Closed-form collapsed marginal likelihoods and predictive densities.
//!
//! The leading `d` columns of each cluster follow a Gaussian with a
//! normal-inverse-Wishart prior NIW(0, kappa0, nu0 + d - 1, Delta_d); the
//! trailing columns are independent zero-mean Gaussians with scaled
//! inverse-chi-squared priors per column. Everything here works in log
//! space on the running statistics, never on data rows.

use nalgebra::{Cholesky, DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::stats::{ClusterStats, RightStats};

const LN_PI: f64 = 1.1447298858494001741; // ln(pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DPrior {
    /// d | z ~ Uniform{1..K_empty}; enforces d <= K_empty.
    ConstrainedUniform,
    /// d ~ Geometric(delta), independent of K and z.
    UnconstrainedGeometric,
}

/// Fixed prior constants and mode flags for the collapsed model.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct HyperParams {
    pub kappa0: f64,
    pub nu0: f64,
    pub lambda0: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Geometric parameter of the prior on K.
    pub omega: f64,
    /// Geometric parameter of the prior on d (unconstrained mode).
    pub delta_geom: f64,
    /// Decay of the dimension-change proposal q(d*|d) ~ xi^|d*-d|.
    pub xi: f64,
    /// Half-width of the dimension-change proposal window.
    pub l_max: usize,
    /// Diagonal of Delta; the first d entries form Delta_d.
    pub delta_diag: Vec<f64>,
    /// Per-column prior scales of the trailing-block variances.
    pub sigma0_sq: Vec<f64>,
    pub d_prior: DPrior,
    pub second_level: bool,
    /// Upper bound on d (and on the cached outer-product block).
    pub m_cap: usize,
    /// Optional truncation of the support of K, used by enumeration tests.
    pub k_max: Option<usize>,
}

impl HyperParams {
    /// The usual uninformative defaults for an m-column embedding.
    pub fn uninformative(m: usize) -> Self {
        HyperParams {
            kappa0: 1.0,
            nu0: 1.0,
            lambda0: 1.0,
            alpha: 1.0,
            beta: 1.0,
            omega: 0.1,
            delta_geom: 0.1,
            xi: 0.8,
            l_max: 5,
            delta_diag: vec![1.0; m],
            sigma0_sq: vec![1.0; m],
            d_prior: DPrior::ConstrainedUniform,
            second_level: false,
            m_cap: m.min(30),
            k_max: None,
        }
    }

    pub fn m(&self) -> usize {
        self.sigma0_sq.len()
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            (self.kappa0, "kappa0"),
            (self.nu0, "nu0"),
            (self.lambda0, "lambda0"),
            (self.alpha, "alpha"),
            (self.beta, "beta"),
        ];
        for (v, name) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (v, name) in [
            (self.omega, "omega"),
            (self.delta_geom, "delta"),
            (self.xi, "xi"),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Invalid(format!("{name} must lie in (0,1), got {v}")));
            }
        }
        if self.l_max == 0 {
            return Err(Error::Invalid("l_max must be >= 1".into()));
        }
        if self.delta_diag.len() != self.sigma0_sq.len() {
            return Err(Error::Invalid(format!(
                "delta_diag has length {} but sigma0_sq has length {}",
                self.delta_diag.len(),
                self.sigma0_sq.len()
            )));
        }
        if self.delta_diag.iter().any(|&v| !(v > 0.0) || !v.is_finite())
            || self.sigma0_sq.iter().any(|&v| !(v > 0.0) || !v.is_finite())
        {
            return Err(Error::Invalid(
                "delta_diag and sigma0_sq entries must be positive".into(),
            ));
        }
        if self.m_cap == 0 || self.m_cap > self.m() {
            return Err(Error::Invalid(format!(
                "m_cap={} out of range 1..={}",
                self.m_cap,
                self.m()
            )));
        }
        if self.k_max == Some(0) {
            return Err(Error::Invalid("k_max must be >= 1".into()));
        }
        Ok(())
    }

    /// Data-driven prior scales from an initial clustering: Delta's diagonal
    /// takes the pooled within-cluster variance of each column, sigma0 the
    /// total variance of each column. Rows from several matrices (directed or
    /// bipartite modes) are stacked.
    pub fn calibrate(&mut self, xs: &[&DMatrix<f64>], zs: &[&[u32]], k: usize) {
        let m = self.m();
        let total: usize = xs.iter().map(|x| x.nrows()).sum();
        assert!(total > 0);
        let mut delta = vec![0.0f64; m];
        let mut sigma = vec![0.0f64; m];
        for j in 0..m {
            let mut mean = 0.0;
            for x in xs {
                for i in 0..x.nrows() {
                    mean += x[(i, j)];
                }
            }
            mean /= total as f64;
            let mut tot = 0.0;
            for x in xs {
                for i in 0..x.nrows() {
                    tot += (x[(i, j)] - mean).powi(2);
                }
            }
            sigma[j] = tot / total as f64;

            // pooled within-cluster sum of squares around cluster means
            let mut csum = vec![0.0f64; k];
            let mut cnt = vec![0usize; k];
            for (x, z) in xs.iter().zip(zs.iter()) {
                for i in 0..x.nrows() {
                    csum[z[i] as usize] += x[(i, j)];
                    cnt[z[i] as usize] += 1;
                }
            }
            let mut within = 0.0;
            for (x, z) in xs.iter().zip(zs.iter()) {
                for i in 0..x.nrows() {
                    let c = z[i] as usize;
                    let mu = csum[c] / cnt[c] as f64;
                    within += (x[(i, j)] - mu).powi(2);
                }
            }
            delta[j] = within / total as f64;
        }
        // Guard degenerate columns so the priors stay proper.
        let floor = 1e-12;
        for j in 0..m {
            if !(delta[j] > floor) {
                delta[j] = floor;
            }
            if !(sigma[j] > floor) {
                sigma[j] = floor;
            }
        }
        self.delta_diag = delta;
        self.sigma0_sq = sigma;
    }
}

/// ln |Delta_d| for the diagonal prior scale matrix.
fn ln_det_delta(hp: &HyperParams, d: usize) -> f64 {
    hp.delta_diag[..d].iter().map(|v| v.ln()).sum()
}

/// Posterior scale matrix D^(k) = Delta_d + sum x x^T - kappa_n m m^T,
/// with m = sum x / kappa_n.
fn posterior_scale(stats: &ClusterStats, d: usize, hp: &HyperParams) -> (DVector<f64>, DMatrix<f64>) {
    let kappa_n = hp.kappa0 + stats.n() as f64;
    let mean = DVector::from_fn(d, |j, _| stats.sum_at(j) / kappa_n);
    let mut dmat = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let mut v = stats.outer_at(i, j) - kappa_n * mean[i] * mean[j];
            if i == j {
                v += hp.delta_diag[i];
            }
            dmat[(i, j)] = v;
            dmat[(j, i)] = v;
        }
    }
    (mean, dmat)
}

/// Cholesky with a single jitter retry; near-degenerate clusters can push
/// D^(k) to the edge of positive definiteness.
fn cholesky_with_jitter(mut dmat: DMatrix<f64>, d: usize) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    match Cholesky::new(dmat.clone()) {
        Some(c) => Ok(c),
        None => {
            let jitter = 1e-9 * dmat.trace() / d as f64;
            for i in 0..d {
                dmat[(i, i)] += jitter;
            }
            Cholesky::new(dmat).ok_or_else(|| {
                Error::Numerical("posterior scale matrix not positive definite after jitter".into())
            })
        }
    }
}

fn ln_det_from_chol(chol: &Cholesky<f64, nalgebra::Dyn>) -> f64 {
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for i in 0..l.nrows() {
        acc += l[(i, i)].ln();
    }
    2.0 * acc
}

/// Log marginal likelihood of a cluster's leading-block rows,
/// p(X^(k)_{:d} | d, z). Empty clusters contribute exactly zero.
pub fn log_marg_left(stats: &ClusterStats, d: usize, hp: &HyperParams) -> Result<f64> {
    if stats.is_empty() {
        return Ok(0.0);
    }
    debug_assert!(d <= stats.m_cap());
    let n = stats.n() as f64;
    let kappa_n = hp.kappa0 + n;
    let nu_n = hp.nu0 + n;
    let (_, dmat) = posterior_scale(stats, d, hp);
    let chol = cholesky_with_jitter(dmat, d)?;
    let ln_det_d = ln_det_from_chol(&chol);
    let df = d as f64;
    let mut acc = -0.5 * n * df * LN_PI + 0.5 * df * (hp.kappa0.ln() - kappa_n.ln());
    acc += 0.5 * (hp.nu0 + df - 1.0) * ln_det_delta(hp, d);
    acc -= 0.5 * (nu_n + df - 1.0) * ln_det_d;
    for i in 1..=d {
        acc += ln_gamma((nu_n + df - i as f64) / 2.0) - ln_gamma((hp.nu0 + df - i as f64) / 2.0);
    }
    Ok(acc)
}

/// One column's contribution to the trailing-block marginal likelihood.
#[inline]
pub fn log_marg_right_col(n: usize, ssq_j: f64, j: usize, hp: &HyperParams) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let lam_n = hp.lambda0 + nf;
    let a0 = hp.lambda0 * hp.sigma0_sq[j];
    -0.5 * nf * LN_PI + ln_gamma(lam_n / 2.0) - ln_gamma(hp.lambda0 / 2.0)
        + 0.5 * hp.lambda0 * a0.ln()
        - 0.5 * lam_n * (a0 + ssq_j).ln()
}

/// Log marginal likelihood of the trailing block over columns d..m for a
/// per-cluster or aggregated statistic. Returns 0 when d = m.
pub fn log_marg_right<S: RightStats + ?Sized>(stats: &S, d: usize, hp: &HyperParams) -> f64 {
    log_marg_right_range(stats, d, hp.m(), hp)
}

/// Trailing-block marginal restricted to columns lo..hi; dimension moves use
/// this so that their ratios touch only the columns that actually change.
pub fn log_marg_right_range<S: RightStats + ?Sized>(
    stats: &S,
    lo: usize,
    hi: usize,
    hp: &HyperParams,
) -> f64 {
    let n = stats.count();
    if n == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for j in lo..hi {
        acc += log_marg_right_col(n, stats.ssq_at(j), j, hp);
    }
    acc
}

/// Prepared evaluator of the leading-block predictive density: the
/// multivariate Student t of a cluster (possibly empty, giving the prior
/// predictive). Build once per cluster, score many rows.
pub struct LeftScore {
    d: usize,
    mean: DVector<f64>,
    chol: Cholesky<f64, nalgebra::Dyn>,
    nu: f64,
    inv_f_nu: f64,
    half_nu_d: f64,
    constant: f64,
}

impl LeftScore {
    pub fn build(stats: &ClusterStats, d: usize, hp: &HyperParams) -> Result<LeftScore> {
        debug_assert!(d >= 1);
        let n = stats.n() as f64;
        let kappa = hp.kappa0 + n;
        let nu = hp.nu0 + n;
        let (mean, dmat) = posterior_scale(stats, d, hp);
        let chol = cholesky_with_jitter(dmat, d)?;
        let ln_det_d = ln_det_from_chol(&chol);
        let f = (kappa + 1.0) / (kappa * nu);
        let df = d as f64;
        let constant = ln_gamma((nu + df) / 2.0)
            - ln_gamma(nu / 2.0)
            - 0.5 * df * (nu * std::f64::consts::PI).ln()
            - 0.5 * (df * f.ln() + ln_det_d);
        Ok(LeftScore {
            d,
            mean,
            chol,
            nu,
            inv_f_nu: 1.0 / (f * nu),
            half_nu_d: 0.5 * (nu + df),
            constant,
        })
    }

    /// Log t-density of the first d entries of `x`.
    pub fn logp(&self, x: &[f64]) -> f64 {
        let z = DVector::from_fn(self.d, |j, _| x[j] - self.mean[j]);
        let y = self.chol.l_dirty().solve_lower_triangular(&z).expect("chol solve");
        let qf = y.norm_squared();
        self.constant - self.half_nu_d * (qf * self.inv_f_nu).ln_1p()
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }
}

/// Prepared evaluator of the trailing-block predictive density: a product of
/// univariate Student t terms over columns d..m, location zero.
pub struct RightScore {
    d: usize,
    half_lam1: f64,
    constant: f64,
    inv_a: Vec<f64>,
}

impl RightScore {
    pub fn build<S: RightStats + ?Sized>(stats: &S, d: usize, hp: &HyperParams) -> RightScore {
        let m = hp.m();
        let n = stats.count() as f64;
        let lam = hp.lambda0 + n;
        let lg = ln_gamma((lam + 1.0) / 2.0) - ln_gamma(lam / 2.0);
        let mut constant = 0.0;
        let mut inv_a = Vec::with_capacity(m - d);
        for j in d..m {
            let a = hp.lambda0 * hp.sigma0_sq[j] + stats.ssq_at(j);
            constant += lg - 0.5 * (std::f64::consts::PI * a).ln();
            inv_a.push(1.0 / a);
        }
        RightScore {
            d,
            half_lam1: 0.5 * (lam + 1.0),
            constant,
            inv_a,
        }
    }

    /// Log density of the entries x_{d..m} of a row.
    pub fn logp(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (j, inv_a) in self.inv_a.iter().enumerate() {
            let v = x[self.d + j];
            acc += (v * v * inv_a).ln_1p();
        }
        self.constant - self.half_lam1 * acc
    }
}

/// Leading-block predictive as a one-shot call (Student t of the cluster
/// excluding the scored row).
pub fn log_pred_left(x: &[f64], stats_minus: &ClusterStats, d: usize, hp: &HyperParams) -> Result<f64> {
    Ok(LeftScore::build(stats_minus, d, hp)?.logp(x))
}

/// Trailing-block predictive as a one-shot call.
pub fn log_pred_right<S: RightStats + ?Sized>(x: &[f64], stats_minus: &S, d: usize, hp: &HyperParams) -> f64 {
    RightScore::build(stats_minus, d, hp).logp(x)
}

/// Collapsed allocation prior p(z | K) from cluster counts:
/// Gamma(alpha) prod_k Gamma(n_k + alpha/K) / (Gamma(alpha/K)^K Gamma(n + alpha)).
pub fn log_crp_z(counts: &[usize], k: usize, alpha: f64) -> f64 {
    debug_assert_eq!(counts.len(), k);
    let n: usize = counts.iter().sum();
    let ak = alpha / k as f64;
    let mut acc = ln_gamma(alpha) - ln_gamma(n as f64 + alpha) - k as f64 * ln_gamma(ak);
    for &c in counts {
        acc += ln_gamma(c as f64 + ak);
    }
    acc
}

/// Collapsed second-level allocation prior p(v | H) from counts of
/// communities per second-level cluster.
pub fn log_prior_v(v_counts: &[usize], k: usize, h: usize, beta: f64) -> f64 {
    debug_assert_eq!(v_counts.len(), h);
    debug_assert_eq!(v_counts.iter().sum::<usize>(), k);
    let bh = beta / h as f64;
    let mut acc = ln_gamma(beta) - ln_gamma(k as f64 + beta) - h as f64 * ln_gamma(bh);
    for &c in v_counts {
        acc += ln_gamma(c as f64 + bh);
    }
    acc
}

/// Geometric log pmf on support {1, 2, ...}: (1-p)^{x-1} p.
pub fn log_geometric(x: usize, p: f64) -> f64 {
    debug_assert!(x >= 1);
    (x as f64 - 1.0) * (-p).ln_1p() + p.ln()
}

/// Prior on K (geometric, optionally truncated for enumeration tests; the
/// truncation constant is left out because every use is a ratio).
pub fn log_prior_k(k: usize, hp: &HyperParams) -> f64 {
    if k == 0 {
        return f64::NEG_INFINITY;
    }
    if let Some(kmax) = hp.k_max {
        if k > kmax {
            return f64::NEG_INFINITY;
        }
    }
    log_geometric(k, hp.omega)
}

/// Prior on d given the minimum non-empty community count across allocation
/// groups (constrained mode) or the free geometric (unconstrained mode).
pub fn log_prior_d(d: usize, kempty_min: usize, hp: &HyperParams) -> f64 {
    if d == 0 || d > hp.m_cap {
        return f64::NEG_INFINITY;
    }
    match hp.d_prior {
        DPrior::ConstrainedUniform => {
            if d <= kempty_min {
                -(kempty_min as f64).ln()
            } else {
                f64::NEG_INFINITY
            }
        }
        DPrior::UnconstrainedGeometric => log_geometric(d, hp.delta_geom),
    }
}

/// Prior on H given K: Uniform{1..K}.
pub fn log_prior_h(h: usize, k: usize) -> f64 {
    if h >= 1 && h <= k {
        -(k as f64).ln()
    } else {
        f64::NEG_INFINITY
    }
}
