//! Synthetic stochastic-blockmodel generation with a controllable latent
//! rank: Beta-distributed block probability matrices, truncated low-rank
//! approximation with [0,1] validation and bounded resampling, and Bernoulli
//! edge sampling with ground-truth bookkeeping.

use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphKind};
use crate::util::{fmt_g17, stream_rng};

/// Bounded retries when the truncated block matrix leaves [0,1].
pub const TRUNCATION_RETRIES: usize = 100;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SbmSpec {
    pub kind: GraphKind,
    /// Directed graphs only: one community structure shared by sources and
    /// destinations (B symmetric), as opposed to co-clustering.
    pub shared: bool,
    pub n: usize,
    /// Destination-side node count; used by bipartite graphs only.
    pub n_prime: usize,
    pub k: usize,
    pub k_prime: usize,
    pub d_target: usize,
    /// Community probabilities; uniform when empty.
    pub theta: Vec<f64>,
    pub theta_prime: Vec<f64>,
    pub beta_a: f64,
    pub beta_b: f64,
    pub seed: u64,
}

impl SbmSpec {
    pub fn new(kind: GraphKind, n: usize, k: usize, d_target: usize, seed: u64) -> Self {
        SbmSpec {
            kind,
            shared: kind != GraphKind::Bipartite && kind != GraphKind::Directed,
            n,
            n_prime: n,
            k,
            k_prime: k,
            d_target,
            theta: Vec::new(),
            theta_prime: Vec::new(),
            beta_a: 1.2,
            beta_b: 1.2,
            seed,
        }
    }

    /// Does one allocation explain both sides?
    pub fn single_structure(&self) -> bool {
        self.kind == GraphKind::Undirected || (self.kind == GraphKind::Directed && self.shared)
    }

    /// Is B constrained to be symmetric?
    pub fn symmetric_b(&self) -> bool {
        self.single_structure()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 || self.d_target == 0 {
            return Err(Error::Invalid("n, K and d must be positive".into()));
        }
        if self.kind == GraphKind::Bipartite && self.n_prime == 0 {
            return Err(Error::Invalid("bipartite graphs need n_prime > 0".into()));
        }
        let kp = if self.single_structure() { self.k } else { self.k_prime };
        if kp == 0 {
            return Err(Error::Invalid("K_prime must be positive".into()));
        }
        if self.d_target > self.k.min(kp) {
            return Err(Error::Invalid(format!(
                "d={} exceeds min(K, K') = {}",
                self.d_target,
                self.k.min(kp)
            )));
        }
        if !(self.beta_a > 0.0 && self.beta_b > 0.0) {
            return Err(Error::Invalid("Beta shapes must be positive".into()));
        }
        for (th, k) in [(&self.theta, self.k), (&self.theta_prime, kp)] {
            if !th.is_empty() {
                if th.len() != k {
                    return Err(Error::Invalid("theta length must equal K".into()));
                }
                let s: f64 = th.iter().sum();
                if th.iter().any(|&p| p < 0.0) || (s - 1.0).abs() > 1e-9 {
                    return Err(Error::Invalid("theta must be a probability vector".into()));
                }
            }
        }
        Ok(())
    }

    /// The five fixed well-separated community means used by the named
    /// two-dimensional five-block preset; B = M M^T has rank 2.
    pub fn fig2_means() -> [[f64; 2]; 5] {
        [
            [0.7, 0.4],
            [0.1, 0.1],
            [0.4, 0.8],
            [-0.1, 0.5],
            [0.3, 0.5],
        ]
    }

    /// Named preset: n-node undirected 5-block model with the fixed means
    /// above and uniform community probabilities.
    pub fn fig2(n: usize, seed: u64) -> (SbmSpec, DMatrix<f64>) {
        let mu = Self::fig2_means();
        let b = DMatrix::from_fn(5, 5, |i, j| mu[i][0] * mu[j][0] + mu[i][1] * mu[j][1]);
        let spec = SbmSpec {
            theta: vec![0.2; 5],
            ..SbmSpec::new(GraphKind::Undirected, n, 5, 2, seed)
        };
        (spec, b)
    }
}

/// Draw a block probability matrix with iid Beta(a,b) entries, mirroring the
/// upper triangle when B must be symmetric.
pub fn sample_b<R: Rng + ?Sized>(spec: &SbmSpec, rng: &mut R) -> Result<DMatrix<f64>> {
    let beta = Beta::new(spec.beta_a, spec.beta_b)
        .map_err(|e| Error::Invalid(format!("Beta shapes: {e}")))?;
    let kp = if spec.single_structure() { spec.k } else { spec.k_prime };
    let mut b = DMatrix::zeros(spec.k, kp);
    if spec.symmetric_b() {
        for i in 0..spec.k {
            for j in i..spec.k {
                let v = beta.sample(rng);
                b[(i, j)] = v;
                b[(j, i)] = v;
            }
        }
    } else {
        for i in 0..spec.k {
            for j in 0..kp {
                b[(i, j)] = beta.sample(rng);
            }
        }
    }
    Ok(b)
}

/// Rank-d approximation of B: truncated eigendecomposition (symmetric) or
/// SVD (otherwise). Fails when any entry leaves [0,1]; tiny negative
/// round-off within 1e-9 is clamped first.
pub fn truncate_b(b: &DMatrix<f64>, d_target: usize, symmetric: bool) -> Result<DMatrix<f64>> {
    let mut bt = if symmetric {
        let (vals, vecs) = crate::embed::solver::dense_symmetric_top(b.clone(), d_target)?;
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for (c, &lam) in vals.iter().enumerate() {
            let u = vecs.column(c);
            for i in 0..b.nrows() {
                for j in 0..b.ncols() {
                    out[(i, j)] += lam * u[i] * u[j];
                }
            }
        }
        out
    } else {
        let (vals, u, v) = crate::embed::solver::dense_svd_top(b.clone(), d_target)?;
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for (c, &s) in vals.iter().enumerate() {
            for i in 0..b.nrows() {
                for j in 0..b.ncols() {
                    out[(i, j)] += s * u[(i, c)] * v[(j, c)];
                }
            }
        }
        out
    };
    for v in bt.iter_mut() {
        if *v < 0.0 && *v > -1e-9 {
            *v = 0.0;
        }
        if *v > 1.0 && *v < 1.0 + 1e-9 {
            *v = 1.0;
        }
        if !(*v >= 0.0 && *v <= 1.0) {
            return Err(Error::Numerical(format!(
                "truncated block matrix entry {v} outside [0,1]"
            )));
        }
    }
    Ok(bt)
}

/// Sample B and truncate, resampling from fresh substreams until the
/// truncation stays inside [0,1].
pub fn generate_b(spec: &SbmSpec) -> Result<(DMatrix<f64>, usize)> {
    let mut rejections = 0;
    for attempt in 0..TRUNCATION_RETRIES {
        let mut rng = stream_rng(spec.seed, attempt as u64);
        let b = sample_b(spec, &mut rng)?;
        match truncate_b(&b, spec.d_target, spec.symmetric_b()) {
            Ok(bt) => return Ok((bt, rejections)),
            Err(_) => rejections += 1,
        }
    }
    Err(Error::Numerical(format!(
        "no valid rank-{} truncation of B in {TRUNCATION_RETRIES} draws; \
         try different Beta shapes or a different d",
        spec.d_target
    )))
}

/// Ground truth and graph from one draw of the blockmodel.
#[derive(Debug)]
pub struct SynthGraph {
    pub graph: Graph,
    pub z: Vec<u32>,
    pub z_prime: Option<Vec<u32>>,
}

fn sample_alloc<R: Rng + ?Sized>(n: usize, k: usize, theta: &[f64], rng: &mut R) -> Vec<u32> {
    (0..n)
        .map(|_| {
            if theta.is_empty() {
                rng.random_range(0..k) as u32
            } else {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (c, &p) in theta.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return c as u32;
                    }
                }
                (k - 1) as u32
            }
        })
        .collect()
}

/// Independent Bernoulli edges with probabilities taken from the (truncated)
/// block matrix; the diagonal stays hollow for square graphs.
pub fn sample_graph<R: Rng + ?Sized>(
    spec: &SbmSpec,
    b_tilde: &DMatrix<f64>,
    rng: &mut R,
) -> Result<SynthGraph> {
    spec.validate()?;
    let z = sample_alloc(spec.n, spec.k, &spec.theta, rng);
    let (n_cols, z_dst): (usize, Option<Vec<u32>>) = match spec.kind {
        GraphKind::Undirected => (spec.n, None),
        GraphKind::Directed => {
            if spec.shared {
                (spec.n, None)
            } else {
                (
                    spec.n,
                    Some(sample_alloc(spec.n, spec.k_prime, &spec.theta_prime, rng)),
                )
            }
        }
        GraphKind::Bipartite => (
            spec.n_prime,
            Some(sample_alloc(
                spec.n_prime,
                spec.k_prime,
                &spec.theta_prime,
                rng,
            )),
        ),
    };

    let mut edges: Vec<(u32, u32)> = Vec::new();
    match spec.kind {
        GraphKind::Undirected => {
            for i in 0..spec.n {
                for j in (i + 1)..spec.n {
                    let p = b_tilde[(z[i] as usize, z[j] as usize)];
                    if rng.random::<f64>() < p {
                        edges.push((i as u32, j as u32));
                    }
                }
            }
        }
        GraphKind::Directed => {
            for i in 0..spec.n {
                for j in 0..spec.n {
                    if i == j {
                        continue;
                    }
                    let col = match &z_dst {
                        Some(zd) => zd[j] as usize,
                        None => z[j] as usize,
                    };
                    let p = b_tilde[(z[i] as usize, col)];
                    if rng.random::<f64>() < p {
                        edges.push((i as u32, j as u32));
                    }
                }
            }
        }
        GraphKind::Bipartite => {
            let zd = z_dst.as_ref().unwrap();
            for i in 0..spec.n {
                for j in 0..n_cols {
                    let p = b_tilde[(z[i] as usize, zd[j] as usize)];
                    if rng.random::<f64>() < p {
                        edges.push((i as u32, j as u32));
                    }
                }
            }
        }
    }
    let graph = Graph::from_edges(spec.kind, spec.n, n_cols, edges)?;
    Ok(SynthGraph {
        graph,
        z,
        z_prime: z_dst,
    })
}

/// One-call generator: draw a valid truncated B, then a graph from it.
pub fn generate(spec: &SbmSpec) -> Result<(SynthGraph, DMatrix<f64>, usize)> {
    spec.validate()?;
    let (bt, rejections) = generate_b(spec)?;
    let mut rng = stream_rng(spec.seed, 10_000);
    let g = sample_graph(spec, &bt, &mut rng)?;
    Ok((g, bt, rejections))
}

/// Like [`generate`] but with a caller-supplied block matrix (presets).
pub fn generate_with_b(spec: &SbmSpec, b: &DMatrix<f64>) -> Result<SynthGraph> {
    spec.validate()?;
    let bt = truncate_b(b, spec.d_target, spec.symmetric_b())?;
    let mut rng = stream_rng(spec.seed, 10_000);
    sample_graph(spec, &bt, &mut rng)
}

/// Write `node,z` ground-truth allocations.
pub fn write_truth_csv(z: &[u32], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "node,z").map_err(|e| Error::io(path, e))?;
    for (i, zi) in z.iter().enumerate() {
        writeln!(w, "{i},{zi}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_truth_csv(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ix, line) in text.lines().enumerate() {
        if ix == 0 || line.trim().is_empty() {
            continue;
        }
        let z = line
            .split(',')
            .nth(1)
            .and_then(|f| f.trim().parse::<u32>().ok())
            .ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: ix + 1,
                msg: "expected node,z".into(),
            })?;
        out.push(z);
    }
    Ok(out)
}

/// Write a dense matrix as bare CSV rows (17 significant digits).
pub fn write_matrix_csv(mat: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for i in 0..mat.nrows() {
        let line: Vec<String> = (0..mat.ncols()).map(|j| fmt_g17(mat[(i, j)])).collect();
        writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn b_is_symmetric_for_undirected_and_in_unit_interval() {
        let spec = SbmSpec::new(GraphKind::Undirected, 10, 4, 2, 9);
        let mut rng = stream_rng(9, 0);
        let b = sample_b(&spec, &mut rng).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(b[(i, j)], b[(j, i)]);
                assert!((0.0..=1.0).contains(&b[(i, j)]));
            }
        }
        let mut rng2 = stream_rng(9, 0);
        let b2 = sample_b(&spec, &mut rng2).unwrap();
        assert_eq!(b, b2);
    }

    #[test]
    fn full_rank_truncation_is_identity() {
        let spec = SbmSpec::new(GraphKind::Undirected, 10, 3, 3, 4);
        let mut rng = stream_rng(4, 0);
        let b = sample_b(&spec, &mut rng).unwrap();
        let bt = truncate_b(&b, 3, true).unwrap();
        for (x, y) in b.iter().zip(bt.iter()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn truncation_rank_bound() {
        let (bt, _) = generate_b(&SbmSpec::new(GraphKind::Undirected, 10, 5, 2, 11)).unwrap();
        let svd = bt.clone().svd(false, false);
        let mut sv: Vec<f64> = svd.singular_values.iter().cloned().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for &s in &sv[2..] {
            assert!(s < 1e-10, "rank leak: singular value {s}");
        }
    }

    #[test]
    fn truncation_rejection_path_is_reachable() {
        // search small random draws for one that violates [0,1] after rank-1
        // truncation; extreme Beta shapes make violations common
        let mut hits = 0;
        for seed in 0..200u64 {
            let spec = SbmSpec {
                beta_a: 0.15,
                beta_b: 0.15,
                ..SbmSpec::new(GraphKind::Undirected, 4, 4, 1, seed)
            };
            let mut rng = stream_rng(seed, 0);
            let b = sample_b(&spec, &mut rng).unwrap();
            if truncate_b(&b, 1, true).is_err() {
                hits += 1;
            }
        }
        assert!(hits > 0, "expected at least one truncation rejection");
    }

    #[test]
    fn degenerate_block_matrices() {
        let spec = SbmSpec::new(GraphKind::Undirected, 6, 2, 1, 3);
        let zero = DMatrix::zeros(2, 2);
        let g = sample_graph(&spec, &zero, &mut stream_rng(3, 0)).unwrap();
        assert_eq!(g.graph.n_pairs(), 0);
        let one = DMatrix::from_element(2, 2, 1.0);
        let g = sample_graph(&spec, &one, &mut stream_rng(3, 0)).unwrap();
        assert_eq!(g.graph.n_pairs(), 6 * 5); // complete hollow, both orientations
    }

    #[test]
    fn seed_determinism_end_to_end() {
        let spec = SbmSpec::new(GraphKind::Bipartite, 15, 3, 2, 21);
        let mut spec = spec;
        spec.n_prime = 12;
        spec.k_prime = 3;
        let (a, ba, _) = generate(&spec).unwrap();
        let (b, bb, _) = generate(&spec).unwrap();
        assert_eq!(ba, bb);
        assert_eq!(a.graph.edges(), b.graph.edges());
        assert_eq!(a.z, b.z);
        assert_eq!(a.z_prime, b.z_prime);
    }

    #[test]
    fn fig2_preset_matrix_values() {
        let (_, b) = SbmSpec::fig2(100, 1);
        assert!((b[(0, 0)] - 0.65).abs() < 1e-12);
        assert!((b[(0, 1)] - (0.07 + 0.04)).abs() < 1e-12);
        let bt = truncate_b(&b, 2, true).unwrap();
        for (x, y) in b.iter().zip(bt.iter()) {
            assert!((x - y).abs() < 1e-10); // already rank 2
        }
    }

    #[test]
    fn block_densities_match_b() {
        // moderate size keeps the unit suite fast; the acceptance suite
        // re-checks this at n=2500 with three binomial standard errors
        let mut spec = SbmSpec::new(GraphKind::Undirected, 400, 3, 2, 77);
        spec.theta = vec![1.0 / 3.0; 3];
        let (sg, bt, _) = generate(&spec).unwrap();
        let mut cnt = vec![vec![0usize; 3]; 3];
        let mut tot = vec![vec![0usize; 3]; 3];
        for i in 0..400 {
            for j in (i + 1)..400 {
                tot[sg.z[i] as usize][sg.z[j] as usize] += 1;
                tot[sg.z[j] as usize][sg.z[i] as usize] += 1;
            }
        }
        for &(i, j) in sg.graph.edges() {
            if i < j {
                let (a, b) = (sg.z[i as usize] as usize, sg.z[j as usize] as usize);
                cnt[a][b] += 1;
                cnt[b][a] += 1;
            }
        }
        for a in 0..3 {
            for b in a..3 {
                let p = bt[(a, b)];
                let t = tot[a][b] as f64 / if a == b { 2.0 } else { 1.0 };
                let c = cnt[a][b] as f64 / if a == b { 2.0 } else { 1.0 };
                let se = (p * (1.0 - p) * t).sqrt().max(1.0);
                assert!(
                    (c - p * t).abs() <= 4.0 * se,
                    "block ({a},{b}): {c} vs {} +- {se}",
                    p * t
                );
            }
        }
    }
}
