//! Numeric and RNG helpers shared across the crate.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Compensated (Kahan/Neumaier) accumulator. Long chains push millions of
/// add/remove updates through the running statistics; plain summation drifts.
#[derive(Debug, Clone, Copy, Default)]
pub struct Kahan {
    sum: f64,
    comp: f64,
}

impl Kahan {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }

    pub fn reset(&mut self) {
        self.sum = 0.0;
        self.comp = 0.0;
    }
}

/// log(Σ exp(x_i)) with max subtraction; −∞ entries are skipped.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Draw an index proportionally to exp(logw_i), renormalising in log space.
///
/// Panics if every weight is −∞ or any is NaN: the callers guarantee the
/// full conditionals are never all-zero.
pub fn sample_log_weights<R: Rng + ?Sized>(rng: &mut R, logw: &[f64]) -> usize {
    debug_assert!(logw.iter().all(|w| !w.is_nan()));
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(
        m > f64::NEG_INFINITY,
        "all categorical log-weights are -inf"
    );
    let mut total = 0.0;
    for &w in logw {
        total += (w - m).exp();
    }
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in logw.iter().enumerate() {
        acc += (w - m).exp();
        if u < acc {
            return i;
        }
    }
    logw.len() - 1
}

/// Deterministic per-chain RNG: one seed, one ChaCha stream per consumer.
/// Stream identity, not thread scheduling, fixes the draws.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Accept/reject from a log acceptance ratio.
pub fn mh_accept<R: Rng + ?Sized>(rng: &mut R, log_ratio: f64) -> bool {
    if log_ratio >= 0.0 {
        return true;
    }
    rng.random::<f64>().ln() < log_ratio
}

/// Format a float with 17 significant digits (round-trip exact for f64).
pub fn fmt_g17(x: f64) -> String {
    format!("{x:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_survives_cancellation() {
        let mut k = Kahan::default();
        k.add(1e16);
        k.add(1.0);
        k.add(-1e16);
        assert_eq!(k.value(), 1.0);
    }

    #[test]
    fn logsumexp_matches_direct() {
        let xs = [0.0, (2.0f64).ln(), (3.0f64).ln()];
        assert!((logsumexp(&xs) - (6.0f64).ln()).abs() < 1e-12);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn stream_rngs_are_reproducible_and_distinct() {
        let mut a1 = stream_rng(7, 1);
        let mut a2 = stream_rng(7, 1);
        let mut b = stream_rng(7, 2);
        let x1: u64 = a1.random();
        let x2: u64 = a2.random();
        let y: u64 = b.random();
        assert_eq!(x1, x2);
        assert_ne!(x1, y);
    }
}
