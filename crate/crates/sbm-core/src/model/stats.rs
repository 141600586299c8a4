//! Running per-cluster sufficient statistics.
//!
//! `ClusterStats` caches everything the collapsed marginals need so that the
//! latent dimension can change without rescanning data rows: member count,
//! per-column sums and sums of squares, and the `m_cap x m_cap` outer-product
//! sum of the leading coordinates. All accumulators are compensated.

use crate::util::Kahan;

/// Lower-triangle index for a symmetric matrix stored packed.
#[inline]
fn tri(i: usize, j: usize) -> usize {
    debug_assert!(j <= i);
    i * (i + 1) / 2 + j
}

/// Anything that exposes a member count and per-column sums of squares; the
/// trailing-block marginal is generic over per-cluster and aggregated
/// (second-level) statistics.
pub trait RightStats {
    fn count(&self) -> usize;
    fn ssq_at(&self, j: usize) -> f64;
}

#[derive(Debug, Clone)]
pub struct ClusterStats {
    n: usize,
    m: usize,
    m_cap: usize,
    sum: Vec<Kahan>,   // first m_cap coordinates
    ssq: Vec<Kahan>,   // all m coordinates
    outer: Vec<Kahan>, // packed lower triangle, m_cap x m_cap
}

impl ClusterStats {
    pub fn new(m: usize, m_cap: usize) -> Self {
        let m_cap = m_cap.min(m);
        ClusterStats {
            n: 0,
            m,
            m_cap,
            sum: vec![Kahan::default(); m_cap],
            ssq: vec![Kahan::default(); m],
            outer: vec![Kahan::default(); m_cap * (m_cap + 1) / 2],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn m_cap(&self) -> usize {
        self.m_cap
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn sum_at(&self, j: usize) -> f64 {
        self.sum[j].value()
    }

    pub fn outer_at(&self, i: usize, j: usize) -> f64 {
        let (a, b) = if i >= j { (i, j) } else { (j, i) };
        self.outer[tri(a, b)].value()
    }

    pub fn add_row(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.m);
        self.n += 1;
        for j in 0..self.m_cap {
            self.sum[j].add(x[j]);
        }
        for j in 0..self.m {
            self.ssq[j].add(x[j] * x[j]);
        }
        for i in 0..self.m_cap {
            let xi = x[i];
            let base = tri(i, 0);
            for j in 0..=i {
                self.outer[base + j].add(xi * x[j]);
            }
        }
    }

    pub fn remove_row(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.m);
        assert!(self.n > 0, "removing a row from an empty cluster");
        self.n -= 1;
        for j in 0..self.m_cap {
            self.sum[j].add(-x[j]);
        }
        for j in 0..self.m {
            self.ssq[j].add(-(x[j] * x[j]));
        }
        for i in 0..self.m_cap {
            let xi = x[i];
            let base = tri(i, 0);
            for j in 0..=i {
                self.outer[base + j].add(-(xi * x[j]));
            }
        }
        if self.n == 0 {
            self.reset();
        }
    }

    /// Clear accumulated roundoff once the cluster is empty.
    fn reset(&mut self) {
        for k in self.sum.iter_mut().chain(self.ssq.iter_mut()).chain(self.outer.iter_mut()) {
            k.reset();
        }
    }

    /// Union of two disjoint clusters.
    pub fn merged(a: &ClusterStats, b: &ClusterStats) -> ClusterStats {
        debug_assert_eq!(a.m, b.m);
        debug_assert_eq!(a.m_cap, b.m_cap);
        let mut out = a.clone();
        out.n += b.n;
        for (o, s) in out.sum.iter_mut().zip(b.sum.iter()) {
            o.add(s.value());
        }
        for (o, s) in out.ssq.iter_mut().zip(b.ssq.iter()) {
            o.add(s.value());
        }
        for (o, s) in out.outer.iter_mut().zip(b.outer.iter()) {
            o.add(s.value());
        }
        out
    }
}

impl RightStats for ClusterStats {
    fn count(&self) -> usize {
        self.n
    }
    fn ssq_at(&self, j: usize) -> f64 {
        self.ssq[j].value()
    }
}

/// Aggregated trailing-block statistics for one second-level cluster: the
/// pooled count and per-column sums of squares of every member community.
#[derive(Debug, Clone)]
pub struct VarAgg {
    n: usize,
    ssq: Vec<Kahan>,
}

impl VarAgg {
    pub fn new(m: usize) -> Self {
        VarAgg {
            n: 0,
            ssq: vec![Kahan::default(); m],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn add_row(&mut self, x: &[f64]) {
        self.n += 1;
        for (k, &v) in self.ssq.iter_mut().zip(x.iter()) {
            k.add(v * v);
        }
    }

    pub fn remove_row(&mut self, x: &[f64]) {
        assert!(self.n > 0);
        self.n -= 1;
        for (k, &v) in self.ssq.iter_mut().zip(x.iter()) {
            k.add(-(v * v));
        }
        if self.n == 0 {
            for k in self.ssq.iter_mut() {
                k.reset();
            }
        }
    }

    pub fn add_cluster(&mut self, c: &ClusterStats) {
        self.n += c.count();
        for j in 0..self.ssq.len() {
            self.ssq[j].add(c.ssq_at(j));
        }
    }

    /// Pool another aggregate into this one.
    pub fn absorb(&mut self, other: &VarAgg) {
        self.n += other.n;
        for j in 0..self.ssq.len() {
            self.ssq[j].add(other.ssq_at(j));
        }
    }

    pub fn remove_cluster(&mut self, c: &ClusterStats) {
        assert!(self.n >= c.count());
        self.n -= c.count();
        for j in 0..self.ssq.len() {
            self.ssq[j].add(-c.ssq_at(j));
        }
        if self.n == 0 {
            for k in self.ssq.iter_mut() {
                k.reset();
            }
        }
    }
}

impl RightStats for VarAgg {
    fn count(&self) -> usize {
        self.n
    }
    fn ssq_at(&self, j: usize) -> f64 {
        self.ssq[j].value()
    }
}

/// View of a `RightStats` with one cluster's contribution added on top,
/// evaluated without mutating anything.
pub struct WithCluster<'a, S: RightStats> {
    pub base: &'a S,
    pub extra: &'a ClusterStats,
}

impl<S: RightStats> RightStats for WithCluster<'_, S> {
    fn count(&self) -> usize {
        self.base.count() + self.extra.count()
    }
    fn ssq_at(&self, j: usize) -> f64 {
        self.base.ssq_at(j) + self.extra.ssq_at(j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::stream_rng;
    use rand::Rng;

    #[test]
    fn add_remove_restores_exactly() {
        let mut rng = stream_rng(11, 0);
        let m = 8;
        let mut st = ClusterStats::new(m, 5);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..m).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
            .collect();
        for r in &rows {
            st.add_row(r);
        }
        let snapshot: Vec<f64> = (0..m).map(|j| st.ssq_at(j)).collect();
        // interleaved remove/re-add in random order
        for _ in 0..200 {
            let i = rng.random_range(0..rows.len());
            st.remove_row(&rows[i]);
            st.add_row(&rows[i]);
        }
        assert_eq!(st.n(), 40);
        for j in 0..m {
            assert!((st.ssq_at(j) - snapshot[j]).abs() < 1e-9);
        }
        for r in &rows {
            st.remove_row(r);
        }
        assert_eq!(st.n(), 0);
        for j in 0..m {
            assert_eq!(st.ssq_at(j), 0.0);
            if j < 5 {
                assert_eq!(st.sum_at(j), 0.0);
            }
        }
    }

    #[test]
    fn merged_equals_pooled() {
        let mut a = ClusterStats::new(3, 3);
        let mut b = ClusterStats::new(3, 3);
        let mut pooled = ClusterStats::new(3, 3);
        let rows = [[1.0, 2.0, 3.0], [-0.5, 0.25, 1.5], [2.0, -1.0, 0.0]];
        a.add_row(&rows[0]);
        b.add_row(&rows[1]);
        b.add_row(&rows[2]);
        for r in &rows {
            pooled.add_row(r);
        }
        let m = ClusterStats::merged(&a, &b);
        assert_eq!(m.n(), 3);
        for i in 0..3 {
            for j in 0..=i {
                assert!((m.outer_at(i, j) - pooled.outer_at(i, j)).abs() < 1e-12);
            }
            assert!((m.ssq_at(i) - pooled.ssq_at(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn agg_add_remove_cluster() {
        let mut c = ClusterStats::new(4, 2);
        c.add_row(&[1.0, 2.0, 3.0, 4.0]);
        c.add_row(&[0.0, 1.0, -1.0, 2.0]);
        let mut agg = VarAgg::new(4);
        agg.add_cluster(&c);
        assert_eq!(agg.count(), 2);
        assert!((agg.ssq_at(3) - 20.0).abs() < 1e-12);
        agg.remove_cluster(&c);
        assert_eq!(agg.count(), 0);
        assert_eq!(agg.ssq_at(3), 0.0);
    }
}
