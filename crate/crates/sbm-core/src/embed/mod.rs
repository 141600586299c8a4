//! Spectral embeddings of graphs: ASE, LSE, and the paired SVD embedding
//! for directed and bipartite graphs.
//!
//! Columns are ordered by decreasing magnitude of the associated eigenvalue
//! (or singular value), and every eigenvector/singular-pair is sign-fixed so
//! that its largest-magnitude entry is positive. Together with the
//! deterministic solvers this makes embeddings bit-reproducible.

pub mod solver;

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::{laplacian, Graph, GraphKind, IsolatedPolicy, Laplacian};
use crate::util::fmt_g17;
use solver::{symmetric_top, SymOp, DENSE_EIGEN_CAP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedSource {
    Ase,
    Lse,
    Svd,
}

/// An `n x m` node embedding with its spectrum metadata. Directed and
/// bipartite graphs carry the paired destination embedding `x_prime`.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub source: EmbedSource,
    pub m: usize,
    pub x: DMatrix<f64>,
    pub x_prime: Option<DMatrix<f64>>,
    /// Signed eigenvalues (magnitude-descending) or singular values
    /// (descending).
    pub spectrum: Vec<f64>,
    /// Original node indices of the embedding rows when isolated nodes were
    /// dropped (LSE only); `None` means the identity map.
    pub retained: Option<Vec<u32>>,
}

impl Embedding {
    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    /// Ranked `(index, magnitude)` pairs of the spectrum, non-increasing.
    pub fn scree(&self) -> Vec<(usize, f64)> {
        let mut mags: Vec<f64> = self.spectrum.iter().map(|v| v.abs()).collect();
        mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
        mags.into_iter().enumerate().map(|(i, v)| (i + 1, v)).collect()
    }

    pub fn validate_finite(&self) -> Result<()> {
        let check = |m: &DMatrix<f64>, name: &str| {
            if m.iter().any(|v| !v.is_finite()) {
                Err(Error::NonFinite(format!("embedding matrix {name}")))
            } else {
                Ok(())
            }
        };
        check(&self.x, "X")?;
        if let Some(xp) = &self.x_prime {
            check(xp, "X'")?;
        }
        Ok(())
    }
}

struct AdjacencyOp<'a>(&'a Graph);

impl SymOp for AdjacencyOp<'_> {
    fn dim(&self) -> usize {
        self.0.n_rows()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.0.n_rows() {
            y[i] = self.0.neighbors(i).iter().map(|&j| x[j as usize]).sum();
        }
    }
    fn materialize(&self) -> DMatrix<f64> {
        self.0.dense_adjacency(usize::MAX).expect("cap disabled")
    }
}

impl SymOp for Laplacian {
    fn dim(&self) -> usize {
        Laplacian::dim(self)
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        Laplacian::apply(self, x, y)
    }
    fn materialize(&self) -> DMatrix<f64> {
        Laplacian::materialize(self, usize::MAX).expect("cap disabled")
    }
}

/// Flip the sign of each column so its largest-magnitude entry is positive;
/// ties resolved by the lowest row index.
fn fix_signs(x: &mut DMatrix<f64>) {
    for c in 0..x.ncols() {
        let mut best = 0usize;
        let mut best_abs = f64::NEG_INFINITY;
        for r in 0..x.nrows() {
            let a = x[(r, c)].abs();
            if a > best_abs {
                best_abs = a;
                best = r;
            }
        }
        if x[(best, c)] < 0.0 {
            for r in 0..x.nrows() {
                x[(r, c)] = -x[(r, c)];
            }
        }
    }
}

/// Sign convention for singular pairs: the rule above applied to the stacked
/// vector [u; v], flipping u and v together.
fn fix_signs_pair(u: &mut DMatrix<f64>, v: &mut DMatrix<f64>) {
    for c in 0..u.ncols() {
        let mut best_val = 0.0f64;
        let mut best_abs = f64::NEG_INFINITY;
        for r in 0..u.nrows() {
            let a = u[(r, c)].abs();
            if a > best_abs {
                best_abs = a;
                best_val = u[(r, c)];
            }
        }
        for r in 0..v.nrows() {
            let a = v[(r, c)].abs();
            if a > best_abs {
                best_abs = a;
                best_val = v[(r, c)];
            }
        }
        if best_val < 0.0 {
            for r in 0..u.nrows() {
                u[(r, c)] = -u[(r, c)];
            }
            for r in 0..v.nrows() {
                v[(r, c)] = -v[(r, c)];
            }
        }
    }
}

fn scale_by_sqrt_magnitude(vecs: &mut DMatrix<f64>, vals: &[f64]) {
    for (c, &lam) in vals.iter().enumerate() {
        let s = lam.abs().sqrt();
        for r in 0..vecs.nrows() {
            vecs[(r, c)] *= s;
        }
    }
}

/// Adjacency spectral embedding of an undirected graph:
/// eigenvectors of A scaled by |eigenvalue|^{1/2}.
pub fn ase(graph: &Graph, m: usize) -> Result<Embedding> {
    if graph.kind() != GraphKind::Undirected {
        return Err(Error::Invalid("ASE requires an undirected graph".into()));
    }
    if m == 0 || m > graph.n_rows() {
        return Err(Error::Shape(format!(
            "embedding dimension m={m} out of range 1..={}",
            graph.n_rows()
        )));
    }
    let op = AdjacencyOp(graph);
    let (vals, mut vecs) = symmetric_top(&op, m, DENSE_EIGEN_CAP)?;
    fix_signs(&mut vecs);
    scale_by_sqrt_magnitude(&mut vecs, &vals);
    Ok(Embedding {
        source: EmbedSource::Ase,
        m,
        x: vecs,
        x_prime: None,
        spectrum: vals,
        retained: None,
    })
}

/// Laplacian spectral embedding: ASE applied to `D^{-1/2} A D^{-1/2}`.
pub fn lse(graph: &Graph, m: usize, isolated: IsolatedPolicy) -> Result<Embedding> {
    let lap = laplacian(graph, isolated)?;
    if m == 0 || m > lap.dim() {
        return Err(Error::Shape(format!(
            "embedding dimension m={m} out of range 1..={}",
            lap.dim()
        )));
    }
    let retained = if lap.retained().len() == graph.n_rows() {
        None
    } else {
        Some(lap.retained().to_vec())
    };
    let (vals, mut vecs) = symmetric_top(&lap, m, DENSE_EIGEN_CAP)?;
    fix_signs(&mut vecs);
    scale_by_sqrt_magnitude(&mut vecs, &vals);
    Ok(Embedding {
        source: EmbedSource::Lse,
        m,
        x: vecs,
        x_prime: None,
        spectrum: vals,
        retained,
    })
}

/// SVD embedding of a directed or bipartite graph (a symmetric matrix is
/// accepted and treated as directed): the pair `X = U D^{1/2}`,
/// `X' = V D^{1/2}` from the top-m singular triplets.
pub fn svd_embed(graph: &Graph, m: usize) -> Result<Embedding> {
    let min_side = graph.n_rows().min(graph.n_cols());
    if m == 0 || m > min_side {
        return Err(Error::Shape(format!(
            "embedding dimension m={m} out of range 1..={min_side}"
        )));
    }
    // Dense is comfortably fast at every scale this crate targets; the cap
    // mirrors the eigen path.
    let a = graph.dense_adjacency(DENSE_EIGEN_CAP.max(graph.n_rows().max(graph.n_cols())))?;
    let (vals, mut u, mut v) = solver::dense_svd_top(a, m)?;
    fix_signs_pair(&mut u, &mut v);
    scale_by_sqrt_magnitude(&mut u, &vals);
    scale_by_sqrt_magnitude(&mut v, &vals);
    Ok(Embedding {
        source: EmbedSource::Svd,
        m,
        x: u,
        x_prime: Some(v),
        spectrum: vals,
        retained: None,
    })
}

/// Scree-elbow estimate of the latent dimension: the position of the largest
/// drop between consecutive spectrum magnitudes. Used for initialisation and
/// reporting only.
pub fn scree_elbow(spectrum: &[f64]) -> usize {
    let mags: Vec<f64> = spectrum.iter().map(|v| v.abs()).collect();
    if mags.len() < 2 {
        return 1;
    }
    let mut best = 0usize;
    let mut best_drop = f64::NEG_INFINITY;
    for i in 0..mags.len() - 1 {
        let drop = mags[i] - mags[i + 1];
        if drop > best_drop {
            best_drop = drop;
            best = i;
        }
    }
    best + 1
}

/// Write an embedding matrix as CSV: header `node,ev_1..ev_m`, 17
/// significant digits. `nodes` supplies the node column (indices when None).
pub fn write_embedding_csv(
    x: &DMatrix<f64>,
    nodes: Option<&[String]>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("node");
    for j in 1..=x.ncols() {
        header.push_str(&format!(",ev_{j}"));
    }
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for i in 0..x.nrows() {
        let name = match nodes {
            Some(ns) => ns[i].clone(),
            None => i.to_string(),
        };
        let mut line = name;
        for j in 0..x.ncols() {
            line.push(',');
            line.push_str(&fmt_g17(x[(i, j)]));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read an embedding CSV back; validates a consistent column count.
pub fn read_embedding_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, DMatrix<f64>)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "empty file".into(),
        })?
        .1
        .map_err(|e| Error::io(path, e))
        .map(|h| (0usize, h))?;
    let ncols = header.split(',').count();
    if ncols < 2 {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: "expected header node,ev_1,..".into(),
        });
    }
    let m = ncols - 1;
    let mut nodes = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for (ix, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != ncols {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: ix + 1,
                msg: format!("expected {ncols} columns, found {}", fields.len()),
            });
        }
        nodes.push(fields[0].to_string());
        for f in &fields[1..] {
            rows.push(f.trim().parse::<f64>().map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: ix + 1,
                msg: e.to_string(),
            })?);
        }
    }
    let n = nodes.len();
    Ok((nodes, DMatrix::from_row_slice(n, m, &rows)))
}

/// Read a spectrum sidecar CSV back.
pub fn read_spectrum_csv(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ix, line) in text.lines().enumerate() {
        if ix == 0 || line.trim().is_empty() {
            continue;
        }
        let v = line
            .split(',')
            .nth(1)
            .and_then(|f| f.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: ix + 1,
                msg: "expected index,value".into(),
            })?;
        out.push(v);
    }
    Ok(out)
}

/// Write the spectrum sidecar CSV `index,value`.
pub fn write_spectrum_csv(spectrum: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "index,value").map_err(|e| Error::io(path, e))?;
    for (i, v) in spectrum.iter().enumerate() {
        writeln!(w, "{},{}", i + 1, fmt_g17(*v)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
