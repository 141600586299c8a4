//! Move implementations for the collapsed trans-dimensional sampler.
//!
//! Moves on one allocation group: a full collapsed Gibbs scan of z, a
//! sequentially-allocated split-merge, empty-community birth/death, and the
//! mirrored second-level moves on v; plus the dimension change shared by all
//! groups. Every move leaves the running statistics consistent with the
//! allocations.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::model::{
    log_crp_z, log_marg_left, log_marg_right, log_marg_right_range, log_prior_d, log_prior_h,
    log_prior_k, log_prior_v, ChainState, ClusterStats, DPrior, HyperParams, LeftScore,
    ProblemData, RightScore, VarAgg, WithCluster,
};
use crate::util::{logsumexp, mh_accept, sample_log_weights};

/// Per-move proposal/acceptance counters.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct MoveCounters {
    pub gibbs_z_moved: u64,
    pub gibbs_z_total: u64,
    pub split: (u64, u64),
    pub merge: (u64, u64),
    pub empty_add: (u64, u64),
    pub empty_remove: (u64, u64),
    pub dim: (u64, u64),
    pub gibbs_v_moved: u64,
    pub gibbs_v_total: u64,
    pub split_v: (u64, u64),
    pub merge_v: (u64, u64),
    pub empty_v_add: (u64, u64),
    pub empty_v_remove: (u64, u64),
}

impl MoveCounters {
    pub fn rates(&self) -> Vec<(String, u64, u64)> {
        let pair = |name: &str, p: (u64, u64)| (name.to_string(), p.0, p.1);
        vec![
            ("gibbs_z".into(), self.gibbs_z_moved, self.gibbs_z_total),
            pair("split", self.split),
            pair("merge", self.merge),
            pair("empty_add", self.empty_add),
            pair("empty_remove", self.empty_remove),
            pair("dim_change", self.dim),
            ("gibbs_v".into(), self.gibbs_v_moved, self.gibbs_v_total),
            pair("split_v", self.split_v),
            pair("merge_v", self.merge_v),
            pair("empty_v_add", self.empty_v_add),
            pair("empty_v_remove", self.empty_v_remove),
        ]
    }
}

/// Lazily rebuilt per-cluster scoring caches for one group.
struct GroupCache {
    /// [block][cluster]
    left: Vec<Vec<Option<LeftScore>>>,
    /// [block][cluster] in plain mode, [block][second-level cluster] in
    /// second-level mode.
    right: Vec<Vec<Option<RightScore>>>,
}

pub struct Sampler<'a> {
    pub data: &'a ProblemData,
    pub hp: &'a HyperParams,
    pub state: ChainState,
    pub rng: ChaCha20Rng,
    pub counters: MoveCounters,
    caches: Vec<GroupCache>,
    row_buf: Vec<Vec<f64>>,
}

impl<'a> Sampler<'a> {
    pub fn new(
        data: &'a ProblemData,
        hp: &'a HyperParams,
        state: ChainState,
        rng: ChaCha20Rng,
    ) -> Sampler<'a> {
        let caches = state
            .groups
            .iter()
            .map(|gs| GroupCache {
                left: gs.blocks.iter().map(|_| Vec::new()).collect(),
                right: gs.blocks.iter().map(|_| Vec::new()).collect(),
            })
            .collect();
        let m = data.m();
        let max_blocks = data.groups.iter().map(|g| g.xs.len()).max().unwrap();
        let mut s = Sampler {
            data,
            hp,
            state,
            rng,
            counters: MoveCounters::default(),
            caches,
            row_buf: vec![vec![0.0; m]; max_blocks],
        };
        s.invalidate_all();
        s
    }

    fn invalidate_group(&mut self, g: usize) {
        let gs = &self.state.groups[g];
        let right_len = if self.hp.second_level { gs.h } else { gs.k };
        let cache = &mut self.caches[g];
        for b in 0..gs.blocks.len() {
            cache.left[b].clear();
            cache.left[b].resize_with(gs.k, || None);
            cache.right[b].clear();
            cache.right[b].resize_with(right_len, || None);
        }
    }

    fn invalidate_all(&mut self) {
        for g in 0..self.state.groups.len() {
            self.invalidate_group(g);
        }
    }

    fn invalidate_cluster(&mut self, g: usize, k: usize) {
        let h = self.state.groups[g].v.get(k).copied().unwrap_or(0) as usize;
        let second = self.hp.second_level;
        for b in 0..self.state.groups[g].blocks.len() {
            self.caches[g].left[b][k] = None;
            let slot = if second { h } else { k };
            self.caches[g].right[b][slot] = None;
        }
    }

    /// Remove node i from its cluster (and aggregated stats), updating caches.
    fn detach_node(&mut self, g: usize, i: usize) -> usize {
        let c = self.state.groups[g].z[i] as usize;
        self.invalidate_cluster(g, c);
        let gs = &mut self.state.groups[g];
        let h = gs.v[c] as usize;
        for (b, block) in gs.blocks.iter_mut().enumerate() {
            self.data.groups[g].row_into(b, i, &mut self.row_buf[b]);
            block.stats[c].remove_row(&self.row_buf[b]);
            if self.hp.second_level {
                block.agg[h].remove_row(&self.row_buf[b]);
            }
        }
        c
    }

    fn attach_node(&mut self, g: usize, i: usize, k: usize) {
        self.invalidate_cluster(g, k);
        let gs = &mut self.state.groups[g];
        let h = gs.v[k] as usize;
        for (b, block) in gs.blocks.iter_mut().enumerate() {
            self.data.groups[g].row_into(b, i, &mut self.row_buf[b]);
            block.stats[k].add_row(&self.row_buf[b]);
            if self.hp.second_level {
                block.agg[h].add_row(&self.row_buf[b]);
            }
        }
        gs.z[i] = k as u32;
    }

    /// Smallest K_empty among the *other* groups (binding partner for the
    /// constrained prior when this group's count changes).
    fn other_kempty_min(&self, g: usize) -> usize {
        self.state
            .groups
            .iter()
            .enumerate()
            .filter(|(gi, _)| *gi != g)
            .map(|(_, gs)| gs.kempty())
            .min()
            .unwrap_or(usize::MAX)
    }

    /// One full collapsed Gibbs scan of the allocations of group `g`.
    pub fn gibbs_sweep_z(&mut self, g: usize) -> Result<()> {
        let n = self.data.groups[g].n();
        let d = self.state.d;
        let constrained = self.hp.d_prior == DPrior::ConstrainedUniform;
        let second = self.hp.second_level;
        let alpha_over_k = self.hp.alpha / self.state.groups[g].k as f64;
        let others_min = self.other_kempty_min(g);

        let mut logw: Vec<f64> = Vec::new();
        for i in 0..n {
            let old = self.state.groups[g].z[i] as usize;
            // When d saturates the constraint, a singleton's label is frozen:
            // moving it anywhere non-empty would force d > K_empty.
            if constrained
                && d == self.state.groups[g].kempty()
                && self.state.groups[g].cluster_size(old) == 1
            {
                self.counters.gibbs_z_total += 1;
                continue;
            }
            self.detach_node(g, i);

            let k_total = self.state.groups[g].k;
            let kempty_minus = self.state.groups[g].kempty();
            let nblocks = self.state.groups[g].blocks.len();
            for b in 0..nblocks {
                self.data.groups[g].row_into(b, i, &mut self.row_buf[b]);
            }
            logw.clear();
            logw.resize(k_total, 0.0);

            {
                // split borrows: read state, write caches
                let state = &self.state;
                let cache = &mut self.caches[g];
                let gs = &state.groups[g];
                for b in 0..nblocks {
                    let block = &gs.blocks[b];
                    for k in 0..k_total {
                        if cache.left[b][k].is_none() {
                            cache.left[b][k] = Some(LeftScore::build(&block.stats[k], d, self.hp)?);
                        }
                    }
                    let nright = if second { gs.h } else { k_total };
                    for s in 0..nright {
                        if cache.right[b][s].is_none() {
                            let rs = if second {
                                RightScore::build(&block.agg[s], d, self.hp)
                            } else {
                                RightScore::build(&block.stats[s], d, self.hp)
                            };
                            cache.right[b][s] = Some(rs);
                        }
                    }
                }
                for k in 0..k_total {
                    let nk = gs.cluster_size(k);
                    let mut w = (nk as f64 + alpha_over_k).ln();
                    if constrained {
                        let ke_g = kempty_minus + usize::from(nk == 0);
                        w += log_prior_d(d, ke_g.min(others_min), self.hp);
                    }
                    if w > f64::NEG_INFINITY {
                        for b in 0..nblocks {
                            let row = &self.row_buf[b];
                            w += cache.left[b][k].as_ref().unwrap().logp(row);
                            let slot = if second { gs.v[k] as usize } else { k };
                            w += cache.right[b][slot].as_ref().unwrap().logp(row);
                        }
                    }
                    logw[k] = w;
                }
            }

            let pick = sample_log_weights(&mut self.rng, &logw);
            self.attach_node(g, i, pick);
            self.counters.gibbs_z_total += 1;
            if pick != old {
                self.counters.gibbs_z_moved += 1;
            }
        }
        Ok(())
    }

    /// Full predictive (leading t times trailing t-product) of one node row
    /// against explicit proto-cluster statistics; the trailing part is
    /// skipped in second-level mode, where it cancels between the two split
    /// candidates (both children share the parent's second-level cluster).
    fn seq_alloc_logp(
        &self,
        g: usize,
        i: usize,
        proto: &[ClusterStats],
        d: usize,
    ) -> Result<f64> {
        let mut acc = 0.0;
        let mut row = vec![0.0; self.data.m()];
        for (b, st) in proto.iter().enumerate() {
            self.data.groups[g].row_into(b, i, &mut row);
            acc += LeftScore::build(st, d, self.hp)?.logp(&row);
            if !self.hp.second_level {
                acc += RightScore::build(st, d, self.hp).logp(&row);
            }
        }
        Ok(acc)
    }

    /// Split-merge move on group `g` (sequentially-allocated proposals).
    pub fn split_merge(&mut self, g: usize) -> Result<()> {
        let n = self.data.groups[g].n();
        if n < 2 {
            return Ok(());
        }
        let d = self.state.d;
        let i = self.rng.random_range(0..n);
        let j = {
            let r = self.rng.random_range(0..n - 1);
            if r >= i {
                r + 1
            } else {
                r
            }
        };
        let ci = self.state.groups[g].z[i] as usize;
        let cj = self.state.groups[g].z[j] as usize;
        if ci == cj {
            self.propose_split(g, i, j, ci, d)
        } else {
            self.propose_merge(g, i, j, ci, cj, d)
        }
    }

    fn propose_split(&mut self, g: usize, i: usize, j: usize, c: usize, d: usize) -> Result<()> {
        self.counters.split.1 += 1;
        let nblocks = self.state.groups[g].blocks.len();
        let m = self.data.m();
        let k_old = self.state.groups[g].k;
        let members: Vec<usize> = (0..self.data.groups[g].n())
            .filter(|&r| r != i && r != j && self.state.groups[g].z[r] as usize == c)
            .collect();
        let mut order = members;
        order.shuffle(&mut self.rng);

        let mut proto_a: Vec<ClusterStats> = Vec::with_capacity(nblocks);
        let mut proto_b: Vec<ClusterStats> = Vec::with_capacity(nblocks);
        let mut row = vec![0.0; m];
        for b in 0..nblocks {
            let mut sa = ClusterStats::new(m, self.hp.m_cap);
            self.data.groups[g].row_into(b, i, &mut row);
            sa.add_row(&row);
            let mut sb = ClusterStats::new(m, self.hp.m_cap);
            self.data.groups[g].row_into(b, j, &mut row);
            sb.add_row(&row);
            proto_a.push(sa);
            proto_b.push(sb);
        }

        let mut log_q = 0.0;
        let mut to_b: Vec<usize> = vec![j];
        for &r in &order {
            let la = self.seq_alloc_logp(g, r, &proto_a, d)?;
            let lb = self.seq_alloc_logp(g, r, &proto_b, d)?;
            let lse = logsumexp(&[la, lb]);
            let take_b = self.rng.random::<f64>().ln() < lb - lse;
            let target = if take_b { &mut proto_b } else { &mut proto_a };
            for b in 0..nblocks {
                self.data.groups[g].row_into(b, r, &mut row);
                target[b].add_row(&row);
            }
            log_q += if take_b { lb - lse } else { la - lse };
            if take_b {
                to_b.push(r);
            }
        }

        // target ratio
        let mut delta = 0.0;
        for b in 0..nblocks {
            let st_old = &self.state.groups[g].blocks[b].stats[c];
            delta += log_marg_left(&proto_a[b], d, self.hp)?
                + log_marg_left(&proto_b[b], d, self.hp)?
                - log_marg_left(st_old, d, self.hp)?;
            if !self.hp.second_level {
                delta += log_marg_right(&proto_a[b], d, self.hp)
                    + log_marg_right(&proto_b[b], d, self.hp)
                    - log_marg_right(st_old, d, self.hp);
            }
            // second level: the child inherits v, so the aggregated
            // trailing-block statistics are unchanged by a split
        }
        let counts = self.state.groups[g].counts();
        let mut counts_new = counts.clone();
        counts_new[c] -= to_b.len();
        counts_new.push(to_b.len());
        delta += log_crp_z(&counts_new, k_old + 1, self.hp.alpha)
            - log_crp_z(&counts, k_old, self.hp.alpha);
        delta += log_prior_k(k_old + 1, self.hp) - log_prior_k(k_old, self.hp);
        let ke = self.state.groups[g].kempty();
        let others = self.other_kempty_min(g);
        delta += log_prior_d(self.state.d, (ke + 1).min(others), self.hp)
            - log_prior_d(self.state.d, ke.min(others), self.hp);
        if self.hp.second_level {
            let gs = &self.state.groups[g];
            let vc = gs.v_counts();
            let mut vc_new = vc.clone();
            vc_new[gs.v[c] as usize] += 1;
            delta += log_prior_v(&vc_new, k_old + 1, gs.h, self.hp.beta)
                - log_prior_v(&vc, k_old, gs.h, self.hp.beta);
            delta += log_prior_h(gs.h, k_old + 1) - log_prior_h(gs.h, k_old);
        }

        if mh_accept(&mut self.rng, delta - log_q) {
            self.counters.split.0 += 1;
            let vc = self.state.groups[g].v[c];
            let gs = &mut self.state.groups[g];
            gs.k += 1;
            gs.v.push(vc);
            for (b, block) in gs.blocks.iter_mut().enumerate() {
                block.stats[c] = proto_a[b].clone();
                block.stats.push(proto_b[b].clone());
            }
            for &r in &to_b {
                gs.z[r] = (gs.k - 1) as u32;
            }
            self.invalidate_group(g);
        }
        Ok(())
    }

    fn propose_merge(
        &mut self,
        g: usize,
        i: usize,
        j: usize,
        ci: usize,
        cj: usize,
        d: usize,
    ) -> Result<()> {
        self.counters.merge.1 += 1;
        let nblocks = self.state.groups[g].blocks.len();
        let m = self.data.m();
        let k_old = self.state.groups[g].k;

        // constrained mode: merging a pair of non-empty clusters lowers
        // K_empty; reject outright when that breaks the support of d
        let ke = self.state.groups[g].kempty();
        let others = self.other_kempty_min(g);
        let prior_d_new = log_prior_d(self.state.d, (ke - 1).min(others), self.hp);
        if prior_d_new == f64::NEG_INFINITY {
            return Ok(());
        }

        let members: Vec<usize> = (0..self.data.groups[g].n())
            .filter(|&r| {
                let zr = self.state.groups[g].z[r] as usize;
                r != i && r != j && (zr == ci || zr == cj)
            })
            .collect();
        let mut order = members;
        order.shuffle(&mut self.rng);

        // replay the reverse split to accumulate its proposal density
        let mut proto_a: Vec<ClusterStats> = Vec::with_capacity(nblocks);
        let mut proto_b: Vec<ClusterStats> = Vec::with_capacity(nblocks);
        let mut row = vec![0.0; m];
        for b in 0..nblocks {
            let mut sa = ClusterStats::new(m, self.hp.m_cap);
            self.data.groups[g].row_into(b, i, &mut row);
            sa.add_row(&row);
            let mut sb = ClusterStats::new(m, self.hp.m_cap);
            self.data.groups[g].row_into(b, j, &mut row);
            sb.add_row(&row);
            proto_a.push(sa);
            proto_b.push(sb);
        }
        let mut log_q_rev = 0.0;
        for &r in &order {
            let la = self.seq_alloc_logp(g, r, &proto_a, d)?;
            let lb = self.seq_alloc_logp(g, r, &proto_b, d)?;
            let lse = logsumexp(&[la, lb]);
            let goes_b = self.state.groups[g].z[r] as usize == cj;
            log_q_rev += if goes_b { lb - lse } else { la - lse };
            let target = if goes_b { &mut proto_b } else { &mut proto_a };
            for b in 0..nblocks {
                self.data.groups[g].row_into(b, r, &mut row);
                target[b].add_row(&row);
            }
        }

        // merged statistics
        let merged: Vec<ClusterStats> = (0..nblocks)
            .map(|b| {
                let gs = &self.state.groups[g];
                ClusterStats::merged(&gs.blocks[b].stats[ci], &gs.blocks[b].stats[cj])
            })
            .collect();

        let mut delta = 0.0;
        for b in 0..nblocks {
            let gs = &self.state.groups[g];
            delta += log_marg_left(&merged[b], d, self.hp)?
                - log_marg_left(&gs.blocks[b].stats[ci], d, self.hp)?
                - log_marg_left(&gs.blocks[b].stats[cj], d, self.hp)?;
            if !self.hp.second_level {
                delta += log_marg_right(&merged[b], d, self.hp)
                    - log_marg_right(&gs.blocks[b].stats[ci], d, self.hp)
                    - log_marg_right(&gs.blocks[b].stats[cj], d, self.hp);
            }
        }

        // the merged community's second-level label is sampled uniformly
        // between the two parents; the 1/2 forward and reverse proposal
        // factors cancel, leaving only the prior and aggregation terms
        let (va, vb) = {
            let gs = &self.state.groups[g];
            (gs.v[ci] as usize, gs.v[cj] as usize)
        };
        let v_winner = if va == vb || self.rng.random_bool(0.5) {
            va
        } else {
            vb
        };
        if self.hp.second_level && va != vb {
            // rows of the community losing its label move between aggregates
            let v_loser = va + vb - v_winner;
            let loser_cluster = if v_winner == va { cj } else { ci };
            for b in 0..nblocks {
                let gs = &self.state.groups[g];
                let st = &gs.blocks[b].stats[loser_cluster];
                let agg_w = &gs.blocks[b].agg[v_winner];
                let agg_l = &gs.blocks[b].agg[v_loser];
                let gain = WithCluster { base: agg_w, extra: st };
                let mut shrunk = agg_l.clone();
                shrunk.remove_cluster(st);
                delta += log_marg_right(&gain, d, self.hp) - log_marg_right(agg_w, d, self.hp);
                delta += log_marg_right(&shrunk, d, self.hp) - log_marg_right(agg_l, d, self.hp);
            }
        }

        let counts = self.state.groups[g].counts();
        let (lo, hi) = (ci.min(cj), ci.max(cj));
        let mut counts_new = counts.clone();
        counts_new[lo] = counts[ci] + counts[cj];
        counts_new.remove(hi);
        delta += log_crp_z(&counts_new, k_old - 1, self.hp.alpha)
            - log_crp_z(&counts, k_old, self.hp.alpha);
        delta += log_prior_k(k_old - 1, self.hp) - log_prior_k(k_old, self.hp);
        delta += prior_d_new - log_prior_d(self.state.d, ke.min(others), self.hp);
        if self.hp.second_level {
            let gs = &self.state.groups[g];
            let vc = gs.v_counts();
            let mut vc_new = vc.clone();
            vc_new[va] -= 1;
            vc_new[vb] -= 1;
            vc_new[v_winner] += 1;
            delta += log_prior_v(&vc_new, k_old - 1, gs.h, self.hp.beta)
                - log_prior_v(&vc, k_old, gs.h, self.hp.beta);
            delta += log_prior_h(gs.h, k_old - 1) - log_prior_h(gs.h, k_old);
        }

        if mh_accept(&mut self.rng, delta + log_q_rev) {
            self.counters.merge.0 += 1;
            let second = self.hp.second_level;
            let gs = &mut self.state.groups[g];
            if second && va != vb {
                let v_loser = va + vb - v_winner;
                let loser_cluster = if v_winner == va { cj } else { ci };
                for block in gs.blocks.iter_mut() {
                    let st = block.stats[loser_cluster].clone();
                    block.agg[v_winner].add_cluster(&st);
                    block.agg[v_loser].remove_cluster(&st);
                }
            }
            for zi in gs.z.iter_mut() {
                let z = *zi as usize;
                if z == hi {
                    *zi = lo as u32;
                } else if z > hi {
                    *zi = (z - 1) as u32;
                }
            }
            gs.v[lo] = v_winner as u32;
            gs.v.remove(hi);
            for (b, block) in gs.blocks.iter_mut().enumerate() {
                block.stats[lo] = merged[b].clone();
                block.stats.remove(hi);
            }
            gs.k -= 1;
            self.invalidate_group(g);
        }
        Ok(())
    }

    /// Add or remove an empty community. When no empty community exists the
    /// proposal is an addition with probability one; the q factor is 0.5/2/1
    /// accordingly, which balances the boundary transitions.
    pub fn empty_community(&mut self, g: usize) -> Result<()> {
        let k_old = self.state.groups[g].k;
        let kempty = self.state.groups[g].kempty();
        let n_empty = k_old - kempty;
        let add = n_empty == 0 || self.rng.random_bool(0.5);

        let counts = self.state.groups[g].counts();
        if add {
            self.counters.empty_add.1 += 1;
            let k_new = k_old + 1;
            let q_empty: f64 = if n_empty == 0 { 0.5 } else { 1.0 };
            let mut counts_new = counts.clone();
            counts_new.push(0);
            let mut log_r = log_crp_z(&counts_new, k_new, self.hp.alpha)
                - log_crp_z(&counts, k_old, self.hp.alpha)
                + log_prior_k(k_new, self.hp)
                - log_prior_k(k_old, self.hp)
                + q_empty.ln();
            let mut h_new = 0usize;
            if self.hp.second_level {
                let gs = &self.state.groups[g];
                h_new = self.rng.random_range(0..gs.h);
                let vc = gs.v_counts();
                let mut vc_new = vc.clone();
                vc_new[h_new] += 1;
                log_r += log_prior_v(&vc_new, k_new, gs.h, self.hp.beta)
                    - log_prior_v(&vc, k_old, gs.h, self.hp.beta);
                log_r += log_prior_h(gs.h, k_new) - log_prior_h(gs.h, k_old);
                // proposal: forward draws v uniformly on {1..H}; the reverse
                // removal picks uniformly among empties, and only those
                // sharing the drawn label return to this state
                let e_match = (0..k_old)
                    .filter(|&k| counts[k] == 0 && gs.v[k] as usize == h_new)
                    .count()
                    + 1;
                log_r += (gs.h as f64).ln() + (e_match as f64).ln()
                    - ((n_empty + 1) as f64).ln();
            }
            if mh_accept(&mut self.rng, log_r) {
                self.counters.empty_add.0 += 1;
                let m = self.data.m();
                let m_cap = self.hp.m_cap;
                let gs = &mut self.state.groups[g];
                gs.k += 1;
                gs.v.push(h_new as u32);
                for block in gs.blocks.iter_mut() {
                    block.stats.push(ClusterStats::new(m, m_cap));
                }
                self.invalidate_group(g);
            }
        } else {
            self.counters.empty_remove.1 += 1;
            // a removal proposed with no empty community present is
            // impossible and rejected outright
            if n_empty == 0 {
                return Ok(());
            }
            if k_old == 1 {
                return Ok(());
            }
            let k_new = k_old - 1;
            let q_empty: f64 = if k_new == kempty { 2.0 } else { 1.0 };
            let empties: Vec<usize> = (0..k_old).filter(|&k| counts[k] == 0).collect();
            let target = empties[self.rng.random_range(0..empties.len())];
            let mut counts_new = counts.clone();
            counts_new.remove(target);
            let mut log_r = log_crp_z(&counts_new, k_new, self.hp.alpha)
                - log_crp_z(&counts, k_old, self.hp.alpha)
                + log_prior_k(k_new, self.hp)
                - log_prior_k(k_old, self.hp)
                + q_empty.ln();
            if self.hp.second_level {
                let gs = &self.state.groups[g];
                let h_old = gs.v[target] as usize;
                let vc = gs.v_counts();
                let mut vc_new = vc.clone();
                vc_new[h_old] -= 1;
                log_r += log_prior_v(&vc_new, k_new, gs.h, self.hp.beta)
                    - log_prior_v(&vc, k_old, gs.h, self.hp.beta);
                log_r += log_prior_h(gs.h, k_new) - log_prior_h(gs.h, k_old);
                let e_match = empties
                    .iter()
                    .filter(|&&k| gs.v[k] as usize == h_old)
                    .count();
                log_r += (n_empty as f64).ln()
                    - (gs.h as f64).ln()
                    - (e_match as f64).ln();
            }
            if mh_accept(&mut self.rng, log_r) {
                self.counters.empty_remove.0 += 1;
                let gs = &mut self.state.groups[g];
                for zi in gs.z.iter_mut() {
                    debug_assert_ne!(*zi as usize, target);
                    if (*zi as usize) > target {
                        *zi -= 1;
                    }
                }
                gs.v.remove(target);
                for block in gs.blocks.iter_mut() {
                    block.stats.remove(target);
                }
                gs.k -= 1;
                self.invalidate_group(g);
            }
        }
        Ok(())
    }

    /// Target part of the dimension-move acceptance ratio,
    /// log p(X, d* | ...) - log p(X, d | ...).
    ///
    /// Written so that it reads only the columns up to max(d, d*): the
    /// shared leading block and the shared tail cancel exactly, not merely
    /// numerically.
    pub fn dim_log_ratio(&self, d_star: usize) -> Result<f64> {
        let d = self.state.d;
        let (lo, hi) = (d.min(d_star), d.max(d_star));
        let sign = if d_star > d { 1.0 } else { -1.0 };
        let mut delta = 0.0;
        for gs in &self.state.groups {
            for block in &gs.blocks {
                for st in &block.stats {
                    delta += log_marg_left(st, d_star, self.hp)?
                        - log_marg_left(st, d, self.hp)?;
                }
                if self.hp.second_level {
                    for agg in &block.agg {
                        delta -= sign * log_marg_right_range(agg, lo, hi, self.hp);
                    }
                } else {
                    for st in &block.stats {
                        delta -= sign * log_marg_right_range(st, lo, hi, self.hp);
                    }
                }
            }
        }
        let ke = self.state.kempty_min();
        delta += log_prior_d(d_star, ke, self.hp) - log_prior_d(d, ke, self.hp);
        Ok(delta)
    }

    /// Propose a new latent dimension from q(d*|d) ~ xi^|d*-d| on the window
    /// around d, truncated to the constrained support.
    pub fn dim_change(&mut self) -> Result<()> {
        let d = self.state.d;
        let d_max = match self.hp.d_prior {
            DPrior::ConstrainedUniform => self.hp.m_cap.min(self.state.kempty_min()),
            DPrior::UnconstrainedGeometric => self.hp.m_cap,
        };
        let window = |center: usize| -> Vec<usize> {
            let lo = center.saturating_sub(self.hp.l_max).max(1);
            let hi = (center + self.hp.l_max).min(d_max);
            (lo..=hi).filter(|&t| t != center).collect()
        };
        let win = window(d);
        if win.is_empty() {
            return Ok(());
        }
        self.counters.dim.1 += 1;
        let weights: Vec<f64> = win
            .iter()
            .map(|&t| self.hp.xi.powi((t as i32 - d as i32).abs()))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = self.rng.random::<f64>() * total;
        let mut d_star = win[win.len() - 1];
        for (t, w) in win.iter().zip(weights.iter()) {
            u -= w;
            if u <= 0.0 {
                d_star = *t;
                break;
            }
        }

        let mut delta = self.dim_log_ratio(d_star)?;
        // proposal normalisation: the xi^|step| weight itself is symmetric
        let z_fwd: f64 = total;
        let z_rev: f64 = window(d_star)
            .iter()
            .map(|&t| self.hp.xi.powi((t as i32 - d_star as i32).abs()))
            .sum();
        delta += z_fwd.ln() - z_rev.ln();

        if mh_accept(&mut self.rng, delta) {
            self.counters.dim.0 += 1;
            self.state.d = d_star;
            self.invalidate_all();
        }
        Ok(())
    }

    /// Gibbs scan of the second-level allocations v of group `g`.
    pub fn gibbs_sweep_v(&mut self, g: usize) -> Result<()> {
        if !self.hp.second_level {
            return Ok(());
        }
        let d = self.state.d;
        let k_total = self.state.groups[g].k;
        let h_total = self.state.groups[g].h;
        if h_total < 2 {
            self.counters.gibbs_v_total += k_total as u64;
            return Ok(());
        }
        let beta_over_h = self.hp.beta / h_total as f64;
        for k in 0..k_total {
            let old = self.state.groups[g].v[k] as usize;
            // detach the community from its aggregate
            {
                let gs = &mut self.state.groups[g];
                for block in gs.blocks.iter_mut() {
                    let st = block.stats[k].clone();
                    block.agg[old].remove_cluster(&st);
                }
            }
            let mut vcounts_minus = self.state.groups[g].v_counts();
            vcounts_minus[old] -= 1;

            let mut logw = vec![0.0; h_total];
            {
                let gs = &self.state.groups[g];
                for (h, w) in logw.iter_mut().enumerate() {
                    *w = (vcounts_minus[h] as f64 + beta_over_h).ln();
                    for block in &gs.blocks {
                        let with = WithCluster {
                            base: &block.agg[h],
                            extra: &block.stats[k],
                        };
                        *w += log_marg_right(&with, d, self.hp)
                            - log_marg_right(&block.agg[h], d, self.hp);
                    }
                }
            }
            let pick = sample_log_weights(&mut self.rng, &logw);
            {
                let gs = &mut self.state.groups[g];
                for block in gs.blocks.iter_mut() {
                    let st = block.stats[k].clone();
                    block.agg[pick].add_cluster(&st);
                }
                gs.v[k] = pick as u32;
            }
            self.counters.gibbs_v_total += 1;
            if pick != old {
                self.counters.gibbs_v_moved += 1;
                self.invalidate_group(g);
            }
        }
        Ok(())
    }

    /// Aggregated trailing-block predictive of community `k` against a
    /// proto second-level aggregate.
    fn seq_alloc_v_logp(&self, g: usize, k: usize, proto: &[VarAgg], d: usize) -> f64 {
        let gs = &self.state.groups[g];
        let mut acc = 0.0;
        for (b, agg) in proto.iter().enumerate() {
            let with = WithCluster {
                base: agg,
                extra: &gs.blocks[b].stats[k],
            };
            acc += log_marg_right(&with, d, self.hp) - log_marg_right(agg, d, self.hp);
        }
        acc
    }

    /// Split-merge on the second-level clustering of communities.
    pub fn split_merge_v(&mut self, g: usize) -> Result<()> {
        if !self.hp.second_level {
            return Ok(());
        }
        let k_total = self.state.groups[g].k;
        if k_total < 2 {
            return Ok(());
        }
        let d = self.state.d;
        let nblocks = self.state.groups[g].blocks.len();
        let a = self.rng.random_range(0..k_total);
        let b = {
            let r = self.rng.random_range(0..k_total - 1);
            if r >= a {
                r + 1
            } else {
                r
            }
        };
        let ha = self.state.groups[g].v[a] as usize;
        let hb = self.state.groups[g].v[b] as usize;
        let h_old = self.state.groups[g].h;

        if ha == hb {
            self.counters.split_v.1 += 1;
            if log_prior_h(h_old + 1, k_total) == f64::NEG_INFINITY {
                return Ok(());
            }
            let members: Vec<usize> = (0..k_total)
                .filter(|&k| k != a && k != b && self.state.groups[g].v[k] as usize == ha)
                .collect();
            let mut order = members;
            order.shuffle(&mut self.rng);

            let m = self.data.m();
            let mut proto_a: Vec<VarAgg> = vec![VarAgg::new(m); nblocks];
            let mut proto_b: Vec<VarAgg> = vec![VarAgg::new(m); nblocks];
            for bl in 0..nblocks {
                let gs = &self.state.groups[g];
                proto_a[bl].add_cluster(&gs.blocks[bl].stats[a]);
                proto_b[bl].add_cluster(&gs.blocks[bl].stats[b]);
            }
            let mut log_q = 0.0;
            let mut to_b: Vec<usize> = vec![b];
            for &r in &order {
                let la = self.seq_alloc_v_logp(g, r, &proto_a, d);
                let lb = self.seq_alloc_v_logp(g, r, &proto_b, d);
                let lse = logsumexp(&[la, lb]);
                let take_b = self.rng.random::<f64>().ln() < lb - lse;
                log_q += if take_b { lb - lse } else { la - lse };
                let target = if take_b { &mut proto_b } else { &mut proto_a };
                for bl in 0..nblocks {
                    target[bl].add_cluster(&self.state.groups[g].blocks[bl].stats[r]);
                }
                if take_b {
                    to_b.push(r);
                }
            }

            let mut delta = 0.0;
            for bl in 0..nblocks {
                let gs = &self.state.groups[g];
                delta += log_marg_right(&proto_a[bl], d, self.hp)
                    + log_marg_right(&proto_b[bl], d, self.hp)
                    - log_marg_right(&gs.blocks[bl].agg[ha], d, self.hp);
            }
            let gs = &self.state.groups[g];
            let vc = gs.v_counts();
            let mut vc_new = vc.clone();
            vc_new[ha] -= to_b.len();
            vc_new.push(to_b.len());
            delta += log_prior_v(&vc_new, k_total, h_old + 1, self.hp.beta)
                - log_prior_v(&vc, k_total, h_old, self.hp.beta);
            delta += log_prior_h(h_old + 1, k_total) - log_prior_h(h_old, k_total);

            if mh_accept(&mut self.rng, delta - log_q) {
                self.counters.split_v.0 += 1;
                let gs = &mut self.state.groups[g];
                gs.h += 1;
                for (bl, block) in gs.blocks.iter_mut().enumerate() {
                    block.agg[ha] = proto_a[bl].clone();
                    block.agg.push(proto_b[bl].clone());
                }
                for &r in &to_b {
                    gs.v[r] = (gs.h - 1) as u32;
                }
                self.invalidate_group(g);
            }
        } else {
            self.counters.merge_v.1 += 1;
            let members: Vec<usize> = (0..k_total)
                .filter(|&k| {
                    let vk = self.state.groups[g].v[k] as usize;
                    k != a && k != b && (vk == ha || vk == hb)
                })
                .collect();
            let mut order = members;
            order.shuffle(&mut self.rng);

            let m = self.data.m();
            let mut proto_a: Vec<VarAgg> = vec![VarAgg::new(m); nblocks];
            let mut proto_b: Vec<VarAgg> = vec![VarAgg::new(m); nblocks];
            for bl in 0..nblocks {
                let gs = &self.state.groups[g];
                proto_a[bl].add_cluster(&gs.blocks[bl].stats[a]);
                proto_b[bl].add_cluster(&gs.blocks[bl].stats[b]);
            }
            let mut log_q_rev = 0.0;
            for &r in &order {
                let la = self.seq_alloc_v_logp(g, r, &proto_a, d);
                let lb = self.seq_alloc_v_logp(g, r, &proto_b, d);
                let lse = logsumexp(&[la, lb]);
                let goes_b = self.state.groups[g].v[r] as usize == hb;
                log_q_rev += if goes_b { lb - lse } else { la - lse };
                let target = if goes_b { &mut proto_b } else { &mut proto_a };
                for bl in 0..nblocks {
                    target[bl].add_cluster(&self.state.groups[g].blocks[bl].stats[r]);
                }
            }

            let mut delta = 0.0;
            for bl in 0..nblocks {
                let gs = &self.state.groups[g];
                let mut pooled = gs.blocks[bl].agg[ha].clone();
                pooled.absorb(&gs.blocks[bl].agg[hb]);
                delta += log_marg_right(&pooled, d, self.hp)
                    - log_marg_right(&gs.blocks[bl].agg[ha], d, self.hp)
                    - log_marg_right(&gs.blocks[bl].agg[hb], d, self.hp);
            }
            let gs = &self.state.groups[g];
            let (lo, hi) = (ha.min(hb), ha.max(hb));
            let vc = gs.v_counts();
            let mut vc_new = vc.clone();
            vc_new[lo] = vc[ha] + vc[hb];
            vc_new.remove(hi);
            delta += log_prior_v(&vc_new, k_total, h_old - 1, self.hp.beta)
                - log_prior_v(&vc, k_total, h_old, self.hp.beta);
            delta += log_prior_h(h_old - 1, k_total) - log_prior_h(h_old, k_total);

            if mh_accept(&mut self.rng, delta + log_q_rev) {
                self.counters.merge_v.0 += 1;
                let gs = &mut self.state.groups[g];
                for block in gs.blocks.iter_mut() {
                    let moved = block.agg[hi].clone();
                    block.agg[lo].absorb(&moved);
                    block.agg.remove(hi);
                }
                for vk in gs.v.iter_mut() {
                    let v = *vk as usize;
                    if v == hi {
                        *vk = lo as u32;
                    } else if v > hi {
                        *vk = (v - 1) as u32;
                    }
                }
                gs.h -= 1;
                self.invalidate_group(g);
            }
        }
        Ok(())
    }

    /// Add or remove an empty second-level cluster; mirrors
    /// `empty_community` one level up, with H bounded by K.
    pub fn empty_v(&mut self, g: usize) -> Result<()> {
        if !self.hp.second_level {
            return Ok(());
        }
        let k_total = self.state.groups[g].k;
        let h_old = self.state.groups[g].h;
        let hempty = self.state.groups[g].hempty();
        let n_empty = h_old - hempty;
        let add = n_empty == 0 || self.rng.random_bool(0.5);
        let vc = self.state.groups[g].v_counts();

        if add {
            self.counters.empty_v_add.1 += 1;
            if log_prior_h(h_old + 1, k_total) == f64::NEG_INFINITY {
                return Ok(());
            }
            let q_empty: f64 = if n_empty == 0 { 0.5 } else { 1.0 };
            let mut vc_new = vc.clone();
            vc_new.push(0);
            let log_r = log_prior_v(&vc_new, k_total, h_old + 1, self.hp.beta)
                - log_prior_v(&vc, k_total, h_old, self.hp.beta)
                + log_prior_h(h_old + 1, k_total)
                - log_prior_h(h_old, k_total)
                + q_empty.ln();
            if mh_accept(&mut self.rng, log_r) {
                self.counters.empty_v_add.0 += 1;
                let m = self.data.m();
                let gs = &mut self.state.groups[g];
                gs.h += 1;
                for block in gs.blocks.iter_mut() {
                    block.agg.push(VarAgg::new(m));
                }
                self.invalidate_group(g);
            }
        } else {
            self.counters.empty_v_remove.1 += 1;
            if n_empty == 0 || h_old == 1 {
                return Ok(());
            }
            let q_empty: f64 = if h_old - 1 == hempty { 2.0 } else { 1.0 };
            let empties: Vec<usize> = (0..h_old).filter(|&h| vc[h] == 0).collect();
            let target = empties[self.rng.random_range(0..empties.len())];
            let mut vc_new = vc.clone();
            vc_new.remove(target);
            let log_r = log_prior_v(&vc_new, k_total, h_old - 1, self.hp.beta)
                - log_prior_v(&vc, k_total, h_old, self.hp.beta)
                + log_prior_h(h_old - 1, k_total)
                - log_prior_h(h_old, k_total)
                + q_empty.ln();
            if mh_accept(&mut self.rng, log_r) {
                self.counters.empty_v_remove.0 += 1;
                let gs = &mut self.state.groups[g];
                for vk in gs.v.iter_mut() {
                    debug_assert_ne!(*vk as usize, target);
                    if (*vk as usize) > target {
                        *vk -= 1;
                    }
                }
                for block in gs.blocks.iter_mut() {
                    block.agg.remove(target);
                }
                gs.h -= 1;
                self.invalidate_group(g);
            }
        }
        Ok(())
    }
}
