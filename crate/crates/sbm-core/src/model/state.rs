//! Chain state for the collapsed sampler.
//!
//! The state is organised as allocation groups holding one or two data
//! blocks. An undirected run has a single group with a single block; a
//! directed run with a shared allocation has one group over the two blocks
//! (X, X'); co-clustering and bipartite runs have two independent groups.
//! The latent dimension d is the only quantity shared across groups.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::marginals::{
    log_crp_z, log_marg_left, log_marg_right, log_prior_d, log_prior_h, log_prior_k, log_prior_v,
    HyperParams,
};
use crate::model::stats::{ClusterStats, RightStats, VarAgg};

/// Immutable embedding data for one allocation group.
#[derive(Debug, Clone)]
pub struct GroupData {
    /// One matrix normally; two when a single allocation explains both the
    /// source and destination embeddings of a directed graph.
    pub xs: Vec<DMatrix<f64>>,
}

impl GroupData {
    pub fn n(&self) -> usize {
        self.xs[0].nrows()
    }

    pub fn m(&self) -> usize {
        self.xs[0].ncols()
    }

    /// Copy row `i` of block `b` into `buf`.
    pub fn row_into(&self, b: usize, i: usize, buf: &mut [f64]) {
        let x = &self.xs[b];
        for j in 0..x.ncols() {
            buf[j] = x[(i, j)];
        }
    }
}

/// The full problem data: one or two groups, all with the same column count.
#[derive(Debug, Clone)]
pub struct ProblemData {
    pub groups: Vec<GroupData>,
}

impl ProblemData {
    pub fn m(&self) -> usize {
        self.groups[0].m()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        for (g, gd) in self.groups.iter().enumerate() {
            if gd.xs.is_empty() {
                return Err(Error::Shape(format!("group {g} has no data blocks")));
            }
            for x in &gd.xs {
                if x.ncols() != m {
                    return Err(Error::Shape(
                        "all embedding blocks must share the column count".into(),
                    ));
                }
                if x.nrows() != gd.n() {
                    return Err(Error::Shape(
                        "blocks of one group must share the row count".into(),
                    ));
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("embedding entries".into()));
                }
            }
        }
        Ok(())
    }
}

/// Per-block sufficient statistics: one `ClusterStats` per community, and
/// (in second-level mode) one aggregated trailing-block statistic per
/// second-level cluster.
#[derive(Debug, Clone)]
pub struct BlockState {
    pub stats: Vec<ClusterStats>,
    pub agg: Vec<VarAgg>,
}

/// Allocation state of one group.
#[derive(Debug, Clone)]
pub struct GroupState {
    pub z: Vec<u32>,
    pub k: usize,
    /// Second-level allocation of every community (length k); all zero when
    /// the second level is disabled.
    pub v: Vec<u32>,
    pub h: usize,
    pub blocks: Vec<BlockState>,
}

impl GroupState {
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0usize; self.k];
        for &zi in &self.z {
            c[zi as usize] += 1;
        }
        c
    }

    pub fn cluster_size(&self, k: usize) -> usize {
        self.blocks[0].stats[k].n()
    }

    pub fn kempty(&self) -> usize {
        (0..self.k).filter(|&k| self.cluster_size(k) > 0).count()
    }

    /// Second-level cluster sizes counted in communities.
    pub fn v_counts(&self) -> Vec<usize> {
        let mut c = vec![0usize; self.h];
        for &vk in &self.v {
            c[vk as usize] += 1;
        }
        c
    }

    /// Number of second-level clusters with at least one community.
    pub fn hempty(&self) -> usize {
        self.v_counts().iter().filter(|&&c| c > 0).count()
    }
}

#[derive(Debug, Clone)]
pub struct ChainState {
    pub d: usize,
    pub groups: Vec<GroupState>,
}

impl ChainState {
    /// Build a state from given allocations, recomputing all statistics.
    pub fn from_allocations(
        data: &ProblemData,
        hp: &HyperParams,
        d: usize,
        allocs: &[(Vec<u32>, usize, Vec<u32>, usize)],
    ) -> Result<ChainState> {
        if allocs.len() != data.groups.len() {
            return Err(Error::Shape("one allocation per group required".into()));
        }
        let mut groups = Vec::with_capacity(allocs.len());
        for (gd, (z, k, v, h)) in data.groups.iter().zip(allocs.iter()) {
            if z.len() != gd.n() {
                return Err(Error::Shape("allocation length mismatch".into()));
            }
            if z.iter().any(|&zi| zi as usize >= *k) {
                return Err(Error::Invalid("allocation index out of range".into()));
            }
            if v.len() != *k || v.iter().any(|&vk| vk as usize >= *h) {
                return Err(Error::Invalid("second-level allocation invalid".into()));
            }
            let mut gs = GroupState {
                z: z.clone(),
                k: *k,
                v: v.clone(),
                h: *h,
                blocks: Vec::new(),
            };
            rebuild_blocks(&mut gs, gd, hp);
            groups.push(gs);
        }
        let state = ChainState { d, groups };
        if d == 0 || d > hp.m_cap {
            return Err(Error::Invalid(format!("d={d} out of range 1..={}", hp.m_cap)));
        }
        Ok(state)
    }

    /// Smallest non-empty community count across groups; the binding value
    /// for the constrained prior on d.
    pub fn kempty_min(&self) -> usize {
        self.groups.iter().map(GroupState::kempty).min().unwrap()
    }

    /// Collapsed log joint density of the state, up to additive constants
    /// that do not depend on (z, v, d, K, H).
    pub fn log_joint(&self, data: &ProblemData, hp: &HyperParams) -> Result<f64> {
        let mut acc = log_prior_d(self.d, self.kempty_min(), hp);
        for (gs, gd) in self.groups.iter().zip(data.groups.iter()) {
            acc += log_crp_z(&gs.counts(), gs.k, hp.alpha);
            acc += log_prior_k(gs.k, hp);
            if hp.second_level {
                acc += log_prior_v(&gs.v_counts(), gs.k, gs.h, hp.beta);
                acc += log_prior_h(gs.h, gs.k);
            }
            let _ = gd;
            for block in &gs.blocks {
                for st in &block.stats {
                    acc += log_marg_left(st, self.d, hp)?;
                }
                if hp.second_level {
                    for agg in &block.agg {
                        acc += log_marg_right(agg, self.d, hp);
                    }
                } else {
                    for st in &block.stats {
                        acc += log_marg_right(st, self.d, hp);
                    }
                }
            }
        }
        Ok(acc)
    }

    /// Recompute every statistic from scratch and compare with the running
    /// values; verifies counts exactly and floats to `tol`.
    pub fn check_consistency(&self, data: &ProblemData, hp: &HyperParams, tol: f64) -> Result<()> {
        for (gi, (gs, gd)) in self.groups.iter().zip(data.groups.iter()).enumerate() {
            let mut fresh = gs.clone();
            rebuild_blocks(&mut fresh, gd, hp);
            for (b, (have, want)) in gs.blocks.iter().zip(fresh.blocks.iter()).enumerate() {
                if have.stats.len() != want.stats.len() || have.agg.len() != want.agg.len() {
                    return Err(Error::Invalid(format!(
                        "group {gi} block {b}: stats shape drift"
                    )));
                }
                for (k, (hs, ws)) in have.stats.iter().zip(want.stats.iter()).enumerate() {
                    if hs.n() != ws.n() {
                        return Err(Error::Invalid(format!(
                            "group {gi} block {b} cluster {k}: count {} != {}",
                            hs.n(),
                            ws.n()
                        )));
                    }
                    for j in 0..hp.m() {
                        if (hs.ssq_at(j) - ws.ssq_at(j)).abs() > tol {
                            return Err(Error::Numerical(format!(
                                "group {gi} block {b} cluster {k} ssq[{j}] drift"
                            )));
                        }
                    }
                    for i in 0..hp.m_cap {
                        if (hs.sum_at(i) - ws.sum_at(i)).abs() > tol {
                            return Err(Error::Numerical(format!(
                                "group {gi} block {b} cluster {k} sum[{i}] drift"
                            )));
                        }
                        for j in 0..=i {
                            if (hs.outer_at(i, j) - ws.outer_at(i, j)).abs() > tol {
                                return Err(Error::Numerical(format!(
                                    "group {gi} block {b} cluster {k} outer[{i},{j}] drift"
                                )));
                            }
                        }
                    }
                }
                for (h, (ha, wa)) in have.agg.iter().zip(want.agg.iter()).enumerate() {
                    if ha.n() != wa.n() {
                        return Err(Error::Invalid(format!(
                            "group {gi} block {b} agg {h}: count {} != {}",
                            ha.n(),
                            wa.n()
                        )));
                    }
                    for j in 0..hp.m() {
                        if (ha.ssq_at(j) - wa.ssq_at(j)).abs() > tol {
                            return Err(Error::Numerical(format!(
                                "group {gi} block {b} agg {h} ssq[{j}] drift"
                            )));
                        }
                    }
                }
            }
            let n: usize = gs.counts().iter().sum();
            if n != gd.n() {
                return Err(Error::Invalid("allocation count mismatch".into()));
            }
        }
        if hp.d_prior == crate::model::marginals::DPrior::ConstrainedUniform
            && self.d > self.kempty_min()
        {
            return Err(Error::Invalid(format!(
                "constrained mode violated: d={} > K_empty={}",
                self.d,
                self.kempty_min()
            )));
        }
        Ok(())
    }
}

/// Recompute a group's per-cluster and aggregated statistics from z and v.
pub fn rebuild_blocks(gs: &mut GroupState, gd: &GroupData, hp: &HyperParams) {
    let m = gd.m();
    let mut blocks = Vec::with_capacity(gd.xs.len());
    for x in &gd.xs {
        let mut stats = vec![ClusterStats::new(m, hp.m_cap); gs.k];
        let mut row = vec![0.0; m];
        for i in 0..x.nrows() {
            for j in 0..m {
                row[j] = x[(i, j)];
            }
            stats[gs.z[i] as usize].add_row(&row);
        }
        let agg = if hp.second_level {
            let mut agg = vec![VarAgg::new(m); gs.h];
            for (k, st) in stats.iter().enumerate() {
                agg[gs.v[k] as usize].add_cluster(st);
            }
            agg
        } else {
            Vec::new()
        };
        blocks.push(BlockState { stats, agg });
    }
    gs.blocks = blocks;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::marginals::DPrior;
    use crate::util::stream_rng;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn toy_data(n: usize, m: usize, seed: u64) -> ProblemData {
        let mut rng = stream_rng(seed, 0);
        let x = DMatrix::from_fn(n, m, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        ProblemData {
            groups: vec![GroupData { xs: vec![x] }],
        }
    }

    fn state_for(
        data: &ProblemData,
        hp: &HyperParams,
        z: Vec<u32>,
        k: usize,
        d: usize,
    ) -> ChainState {
        let v = vec![0u32; k];
        ChainState::from_allocations(data, hp, d, &[(z, k, v, 1)]).unwrap()
    }

    #[test]
    fn log_joint_invariant_to_within_cluster_row_permutation() {
        let data = toy_data(6, 3, 5);
        let hp = HyperParams::uninformative(3);
        let z = vec![0, 0, 0, 1, 1, 1];
        let s = state_for(&data, &hp, z, 2, 2);
        let lj = s.log_joint(&data, &hp).unwrap();

        // permute rows within each cluster
        let x = &data.groups[0].xs[0];
        let perm = [2usize, 0, 1, 5, 4, 3];
        let xp = DMatrix::from_fn(6, 3, |i, j| x[(perm[i], j)]);
        let data2 = ProblemData {
            groups: vec![GroupData { xs: vec![xp] }],
        };
        let s2 = state_for(&data2, &hp, vec![0, 0, 0, 1, 1, 1], 2, 2);
        let lj2 = s2.log_joint(&data2, &hp).unwrap();
        assert_abs_diff_eq!(lj, lj2, epsilon = 1e-9);
    }

    #[test]
    fn log_joint_invariant_to_cluster_label_permutation() {
        let data = toy_data(7, 4, 8);
        let hp = HyperParams::uninformative(4);
        let z = vec![0, 1, 1, 2, 0, 2, 1];
        let s = state_for(&data, &hp, z.clone(), 3, 2);
        let relab: Vec<u32> = z.iter().map(|&c| [2u32, 0, 1][c as usize]).collect();
        let s2 = state_for(&data, &hp, relab, 3, 2);
        assert_abs_diff_eq!(
            s.log_joint(&data, &hp).unwrap(),
            s2.log_joint(&data, &hp).unwrap(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn log_joint_drops_when_outlier_joins_tight_cluster() {
        let m = 2;
        let hp = HyperParams::uninformative(m);
        let mut rows: Vec<[f64; 2]> = (0..9)
            .map(|i| [0.5 + 0.01 * (i as f64 - 4.0), 0.02 * (i as f64 - 4.0)])
            .collect();
        rows.push([25.0, -30.0]); // far outlier
        let x = DMatrix::from_fn(10, m, |i, j| rows[i][j]);
        let data = ProblemData {
            groups: vec![GroupData { xs: vec![x] }],
        };
        // outlier in its own cluster vs absorbed into the tight cluster
        let mut z_sep = vec![0u32; 10];
        z_sep[9] = 1;
        let s_sep = state_for(&data, &hp, z_sep, 2, 1);
        let s_abs = state_for(&data, &hp, vec![0u32; 10], 2, 1);
        // compare the data factors only: fix priors by using the same (K, d);
        // the allocation prior actually favours the single cluster, so the
        // data term must dominate for the comparison to be meaningful
        let lj_sep = s_sep.log_joint(&data, &hp).unwrap();
        let lj_abs = s_abs.log_joint(&data, &hp).unwrap();
        assert!(
            lj_sep > lj_abs,
            "separated {lj_sep} should beat absorbed {lj_abs}"
        );
    }

    #[test]
    fn constrained_consistency_check_catches_violation() {
        let data = toy_data(5, 3, 3);
        let mut hp = HyperParams::uninformative(3);
        hp.d_prior = DPrior::ConstrainedUniform;
        let s = state_for(&data, &hp, vec![0, 0, 0, 0, 0], 1, 2);
        assert!(s.check_consistency(&data, &hp, 1e-8).is_err());
    }

    #[test]
    fn consistency_accepts_fresh_state() {
        let data = toy_data(8, 4, 4);
        let mut hp = HyperParams::uninformative(4);
        hp.second_level = true;
        let z = vec![0u32, 1, 2, 0, 1, 2, 0, 1];
        let v = vec![0u32, 1, 0];
        let s = ChainState::from_allocations(&data, &hp, 2, &[(z, 3, v, 2)]).unwrap();
        s.check_consistency(&data, &hp, 1e-9).unwrap();
    }
}
