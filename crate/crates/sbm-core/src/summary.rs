//! Posterior summaries from sampled traces: the posterior similarity
//! matrix, average-linkage point-estimate clusterings, posterior tables for
//! (d, K, H), the adjusted Rand index, and the expected-adjusted-Rand
//! selector.

use std::collections::HashMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mcmc::Trace;
use crate::util::fmt_g17;

/// Symmetric n x n matrix of pairwise co-clustering frequencies, unit
/// diagonal, stored as a packed lower triangle.
#[derive(Debug, Clone)]
pub struct PosteriorSimilarity {
    n: usize,
    tri: Vec<f64>,
}

impl PosteriorSimilarity {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(i: usize, j: usize) -> usize {
        let (a, b) = if i >= j { (i, j) } else { (j, i) };
        a * (a + 1) / 2 + b
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.tri[Self::idx(i, j)]
    }

    /// Exact co-clustering frequency over allocation samples.
    pub fn from_rows<'a, I>(n: usize, rows: I) -> PosteriorSimilarity
    where
        I: IntoIterator<Item = &'a [u32]>,
    {
        let mut counts = vec![0u32; n * (n + 1) / 2];
        let mut total = 0u32;
        let mut buckets: HashMap<u32, Vec<usize>> = HashMap::new();
        for row in rows {
            assert_eq!(row.len(), n, "allocation row length mismatch");
            total += 1;
            buckets.clear();
            for (i, &z) in row.iter().enumerate() {
                buckets.entry(z).or_default().push(i);
            }
            for members in buckets.values() {
                for (a, &i) in members.iter().enumerate() {
                    for &j in &members[..a] {
                        counts[Self::idx(i, j)] += 1;
                    }
                }
            }
        }
        assert!(total > 0, "no allocation samples");
        let mut tri = vec![0.0; n * (n + 1) / 2];
        for i in 0..n {
            tri[Self::idx(i, i)] = 1.0;
        }
        for i in 0..n {
            for j in 0..i {
                tri[Self::idx(i, j)] = counts[Self::idx(i, j)] as f64 / total as f64;
            }
        }
        PosteriorSimilarity { n, tri }
    }

    /// Pool allocation samples of one group across chains.
    pub fn from_traces(traces: &[Trace], group: usize) -> PosteriorSimilarity {
        let n = traces
            .iter()
            .flat_map(|t| t.allocs.first())
            .map(|a| a[group].len())
            .next()
            .expect("empty traces");
        let rows = traces
            .iter()
            .flat_map(|t| t.allocs.iter())
            .map(|a| a[group].as_slice());
        Self::from_rows(n, rows)
    }

    /// Write the dense lower triangle (diagonal included), one row per line.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for i in 0..self.n {
            let line: Vec<String> = (0..=i).map(|j| fmt_g17(self.get(i, j))).collect();
            writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// One merge step of the stepwise dendrogram: the two cluster ids joined.
/// Original observations are clusters 0..n; step s creates cluster n+s.
pub type MergeStep = (usize, usize);

/// Average-linkage agglomeration on the distance 1 - pi_ij. Deterministic:
/// ties merge the lexicographically smallest cluster-id pair first.
pub fn average_linkage(psm: &PosteriorSimilarity) -> Vec<MergeStep> {
    let n = psm.n();
    if n == 0 {
        return Vec::new();
    }
    // active cluster list with sizes; distances kept in a full square for
    // simplicity (n is bounded by the PSM cap)
    let mut active: Vec<usize> = (0..n).collect();
    let mut size: HashMap<usize, f64> = (0..n).map(|i| (i, 1.0)).collect();
    let mut dist: HashMap<(usize, usize), f64> = HashMap::new();
    let key = |a: usize, b: usize| if a < b { (a, b) } else { (b, a) };
    for i in 0..n {
        for j in 0..i {
            dist.insert(key(i, j), 1.0 - psm.get(i, j));
        }
    }
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    let mut next_id = n;
    while active.len() > 1 {
        let mut best = (usize::MAX, usize::MAX);
        let mut best_d = f64::INFINITY;
        for (ai, &a) in active.iter().enumerate() {
            for &b in &active[..ai] {
                let d = dist[&key(a, b)];
                let pair = key(a, b);
                if d < best_d || (d == best_d && pair < best) {
                    best_d = d;
                    best = pair;
                }
            }
        }
        let (a, b) = best;
        let (sa, sb) = (size[&a], size[&b]);
        let new = next_id;
        next_id += 1;
        active.retain(|&c| c != a && c != b);
        for &c in &active {
            let d = (sa * dist[&key(a, c)] + sb * dist[&key(b, c)]) / (sa + sb);
            dist.insert(key(new, c), d);
        }
        active.push(new);
        size.insert(new, sa + sb);
        merges.push((a, b));
    }
    merges
}

/// Labels after cutting the dendrogram at `k` clusters (compact labels in
/// order of first appearance).
pub fn cut_dendrogram(merges: &[MergeStep], n: usize, k: usize) -> Vec<u32> {
    let k = k.clamp(1, n.max(1));
    let steps = n - k;
    let mut parent: Vec<usize> = (0..n + steps).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (s, &(a, b)) in merges.iter().take(steps).enumerate() {
        let new = n + s;
        let ra = find(&mut parent, a);
        let rb = find(&mut parent, b);
        parent[ra] = new;
        parent[rb] = new;
    }
    let mut label: HashMap<usize, u32> = HashMap::new();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let r = find(&mut parent, i);
        let next = label.len() as u32;
        out.push(*label.entry(r).or_insert(next));
    }
    out
}

/// Mean silhouette width of a clustering under the 1 - pi distance;
/// used to pick a cut when no cluster count is requested.
fn mean_silhouette(psm: &PosteriorSimilarity, labels: &[u32]) -> f64 {
    let n = psm.n();
    let k = labels.iter().map(|&l| l + 1).max().unwrap_or(1) as usize;
    if k < 2 {
        return -1.0;
    }
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l as usize] += 1;
    }
    let mut total = 0.0;
    for i in 0..n {
        let li = labels[i] as usize;
        if sizes[li] <= 1 {
            continue; // singleton: silhouette 0
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sums[labels[j] as usize] += 1.0 - psm.get(i, j);
            }
        }
        let a = sums[li] / (sizes[li] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != li && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

/// Point-estimate clustering from the similarity matrix: average-linkage
/// cut at `k` when given, otherwise at the best mean-silhouette cut among
/// 2..=k_max candidates.
pub fn map_clustering(psm: &PosteriorSimilarity, k: Option<usize>) -> Vec<u32> {
    let n = psm.n();
    if n == 0 {
        return Vec::new();
    }
    let merges = average_linkage(psm);
    match k {
        Some(k) => cut_dendrogram(&merges, n, k),
        None => {
            let k_max = n.min(20);
            let mut best = cut_dendrogram(&merges, n, 1);
            let mut best_s = f64::NEG_INFINITY;
            for k in 2..=k_max {
                let cand = cut_dendrogram(&merges, n, k);
                let s = mean_silhouette(psm, &cand);
                if s > best_s {
                    best_s = s;
                    best = cand;
                }
            }
            best
        }
    }
}

/// Posterior expected adjusted Rand of a candidate clustering against the
/// similarity matrix (the usual PSM-based estimator).
pub fn expected_ari(psm: &PosteriorSimilarity, labels: &[u32]) -> f64 {
    let n = psm.n();
    let mut sum_dp = 0.0; // sum of delta_ij * pi_ij over i<j
    let mut sum_d = 0.0;
    let mut sum_p = 0.0;
    for i in 0..n {
        for j in 0..i {
            let p = psm.get(i, j);
            sum_p += p;
            if labels[i] == labels[j] {
                sum_d += 1.0;
                sum_dp += p;
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let expected = sum_d * sum_p / pairs;
    let num = sum_dp - expected;
    let den = 0.5 * (sum_d + sum_p) - expected;
    if den.abs() < 1e-15 {
        if num.abs() < 1e-15 {
            1.0
        } else {
            0.0
        }
    } else {
        num / den
    }
}

/// Pick the dendrogram cut maximising the posterior expected adjusted Rand.
pub fn pear_select(psm: &PosteriorSimilarity, k_max: usize) -> (usize, Vec<u32>) {
    let n = psm.n();
    let merges = average_linkage(psm);
    let mut best_k = 1;
    let mut best = cut_dendrogram(&merges, n, 1);
    let mut best_val = expected_ari(psm, &best);
    for k in 2..=k_max.min(n) {
        let cand = cut_dendrogram(&merges, n, k);
        let val = expected_ari(psm, &cand);
        if val > best_val {
            best_val = val;
            best_k = k;
            best = cand;
        }
    }
    (best_k, best)
}

/// Normalised histogram with MAP value (ties resolved to the smaller value).
#[derive(Debug, Clone, serde::Serialize)]
pub struct PosteriorTable {
    pub probs: Vec<(usize, f64)>,
    pub map: usize,
}

fn table_from(values: impl Iterator<Item = usize>) -> PosteriorTable {
    let mut counts: HashMap<usize, u64> = HashMap::new();
    let mut total = 0u64;
    for v in values {
        *counts.entry(v).or_insert(0) += 1;
        total += 1;
    }
    let mut probs: Vec<(usize, f64)> = counts
        .into_iter()
        .map(|(v, c)| (v, c as f64 / total as f64))
        .collect();
    probs.sort_by_key(|&(v, _)| v);
    let map = probs
        .iter()
        .cloned()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(v, _)| v)
        .unwrap_or(0);
    PosteriorTable { probs, map }
}

/// Pooled posterior tables over d, K_empty and H_empty (per group).
#[derive(Debug, Clone, serde::Serialize)]
pub struct PosteriorTables {
    pub d: PosteriorTable,
    pub kempty: Vec<PosteriorTable>,
    pub hempty: Vec<PosteriorTable>,
}

pub fn posterior_tables(traces: &[Trace]) -> PosteriorTables {
    let n_groups = traces.first().map(|t| t.n_groups).unwrap_or(1);
    let d = table_from(traces.iter().flat_map(|t| t.samples.iter()).map(|s| s.d));
    let kempty = (0..n_groups)
        .map(|g| {
            table_from(
                traces
                    .iter()
                    .flat_map(|t| t.samples.iter())
                    .map(move |s| s.groups[g].kempty),
            )
        })
        .collect();
    let hempty = (0..n_groups)
        .map(|g| {
            table_from(
                traces
                    .iter()
                    .flat_map(|t| t.samples.iter())
                    .map(move |s| s.groups[g].hempty),
            )
        })
        .collect();
    PosteriorTables { d, kempty, hempty }
}

pub fn write_table_csv(table: &PosteriorTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "value,probability").map_err(|e| Error::io(path, e))?;
    for (v, p) in &table.probs {
        writeln!(w, "{v},{}", fmt_g17(*p)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Adjusted Rand index between two partitions of the same node set.
pub fn ari(a: &[u32], b: &[u32]) -> f64 {
    assert_eq!(a.len(), b.len(), "partition length mismatch");
    let n = a.len();
    if n == 0 {
        return 1.0;
    }
    let mut table: HashMap<(u32, u32), u64> = HashMap::new();
    let mut ra: HashMap<u32, u64> = HashMap::new();
    let mut rb: HashMap<u32, u64> = HashMap::new();
    for i in 0..n {
        *table.entry((a[i], b[i])).or_insert(0) += 1;
        *ra.entry(a[i]).or_insert(0) += 1;
        *rb.entry(b[i]).or_insert(0) += 1;
    }
    let c2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = table.values().map(|&v| c2(v)).sum();
    let sum_a: f64 = ra.values().map(|&v| c2(v)).sum();
    let sum_b: f64 = rb.values().map(|&v| c2(v)).sum();
    let pairs = c2(n as u64);
    let expected = sum_a * sum_b / pairs;
    let num = sum_ij - expected;
    let den = 0.5 * (sum_a + sum_b) - expected;
    if den.abs() < 1e-15 {
        if num.abs() < 1e-15 {
            1.0
        } else {
            0.0
        }
    } else {
        num / den
    }
}

/// Write `node,cluster` labels.
pub fn write_clusters_csv(labels: &[u32], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "node,cluster").map_err(|e| Error::io(path, e))?;
    for (i, l) in labels.iter().enumerate() {
        writeln!(w, "{i},{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn psm_of(rows: &[&[u32]]) -> PosteriorSimilarity {
        PosteriorSimilarity::from_rows(rows[0].len(), rows.iter().cloned())
    }

    #[test]
    fn psm_point_mass_is_block_indicator() {
        let psm = psm_of(&[&[0, 0, 1, 1]]);
        assert_eq!(psm.get(0, 1), 1.0);
        assert_eq!(psm.get(0, 2), 0.0);
        assert_eq!(psm.get(2, 3), 1.0);
        assert_eq!(psm.get(1, 1), 1.0);
    }

    #[test]
    fn psm_two_sample_average() {
        let psm = psm_of(&[&[0, 0], &[0, 1]]);
        assert_abs_diff_eq!(psm.get(0, 1), 0.5);
    }

    #[test]
    fn psm_label_switching_invariant() {
        let a = psm_of(&[&[0, 0, 1], &[2, 2, 0]]);
        let b = psm_of(&[&[5, 5, 3], &[0, 0, 7]]);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(a.get(i, j), b.get(i, j));
            }
        }
    }

    #[test]
    fn map_clustering_recovers_blocks() {
        let psm = psm_of(&[&[0, 0, 0, 1, 1, 2, 2]]);
        let labels = map_clustering(&psm, Some(3));
        assert_eq!(labels[0], labels[1]);
        assert_eq!(labels[0], labels[2]);
        assert_eq!(labels[3], labels[4]);
        assert_eq!(labels[5], labels[6]);
        assert_ne!(labels[0], labels[3]);
        assert_ne!(labels[3], labels[5]);
    }

    #[test]
    fn map_clustering_k1_all_zero() {
        let psm = psm_of(&[&[0, 1, 2]]);
        assert_eq!(map_clustering(&psm, Some(1)), vec![0, 0, 0]);
    }

    #[test]
    fn map_clustering_deterministic_under_ties() {
        let psm = psm_of(&[&[0, 0, 1, 1], &[0, 0, 1, 1]]);
        let a = map_clustering(&psm, Some(2));
        let b = map_clustering(&psm, Some(2));
        assert_eq!(a, b);
    }

    #[test]
    fn silhouette_cut_finds_clear_structure() {
        let psm = psm_of(&[&[0, 0, 0, 1, 1, 1, 2, 2, 2]]);
        let labels = map_clustering(&psm, None);
        let k = labels.iter().map(|&l| l + 1).max().unwrap();
        assert_eq!(k, 3);
    }

    #[test]
    fn ari_identical_is_one() {
        assert_abs_diff_eq!(ari(&[0, 1, 1, 2], &[5, 3, 3, 0]), 1.0);
    }

    #[test]
    fn ari_singletons_vs_lump_is_zero() {
        assert_abs_diff_eq!(ari(&[0, 1, 2, 3], &[0, 0, 0, 0]), 0.0);
    }

    #[test]
    fn ari_permutation_invariant() {
        let a = [0u32, 0, 1, 1, 2, 2];
        let b = [0u32, 1, 1, 2, 2, 0];
        let b_perm: Vec<u32> = b.iter().map(|&x| [7u32, 3, 9][x as usize]).collect();
        assert_abs_diff_eq!(ari(&a, &b), ari(&a, &b_perm), epsilon = 1e-12);
    }

    #[test]
    fn pear_picks_the_obvious_k() {
        let psm = psm_of(&[&[0, 0, 0, 1, 1, 1], &[0, 0, 0, 1, 1, 1]]);
        let (k, labels) = pear_select(&psm, 6);
        assert_eq!(k, 2);
        assert_eq!(labels[0], labels[2]);
        assert_ne!(labels[0], labels[5]);
    }

    #[test]
    fn tables_point_mass() {
        // hand-built trace with a constant d
        use crate::mcmc::{GroupSample, Trace, TraceSample};
        let mk = |d: usize| TraceSample {
            iter: 0,
            d,
            groups: vec![GroupSample {
                k: 3,
                kempty: 2,
                h: 1,
                hempty: 1,
            }],
            log_joint: 0.0,
        };
        let t = Trace {
            chain: 0,
            seed: 0,
            samples: vec![mk(4), mk(4), mk(4)],
            allocs: vec![vec![vec![0, 0]]; 3],
            accept: vec![],
            n_groups: 1,
        };
        let tables = posterior_tables(&[t]);
        assert_eq!(tables.d.map, 4);
        assert_eq!(tables.d.probs, vec![(4, 1.0)]);
        assert_eq!(tables.kempty[0].map, 2);
    }
}
