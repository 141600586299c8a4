//! Truncated symmetric eigensolvers and SVD.
//!
//! Dense decompositions below a size threshold, thick-restart Lanczos with
//! full reorthogonalisation above it. Both paths are deterministic: the
//! Lanczos start vector comes from a fixed internal stream, and eigenpairs
//! are ordered by a single magnitude-with-tie-break rule.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::util::stream_rng;

/// Matrices at or below this order are decomposed densely.
pub const DENSE_EIGEN_CAP: usize = 2000;

/// Iterative-solver residual tolerance.
pub const LANCZOS_TOL: f64 = 1e-10;

/// Symmetric linear operator, the only interface the iterative path needs.
pub trait SymOp {
    fn dim(&self) -> usize;
    /// y = A x.
    fn apply(&self, x: &[f64], y: &mut [f64]);

    fn materialize(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut a = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            self.apply(&e, &mut col);
            e[j] = 0.0;
            for i in 0..n {
                a[(i, j)] = col[i];
            }
        }
        a
    }
}

pub struct DenseOp<'a>(pub &'a DMatrix<f64>);

impl SymOp for DenseOp<'_> {
    fn dim(&self) -> usize {
        self.0.nrows()
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let v = DVector::from_column_slice(x);
        let out = self.0 * v;
        y.copy_from_slice(out.as_slice());
    }
    fn materialize(&self) -> DMatrix<f64> {
        self.0.clone()
    }
}

/// Order eigenvalues by decreasing magnitude. Magnitudes within a relative
/// 1e-12 are treated as tied; ties prefer the larger signed value, then the
/// lower solver index, so e.g. the +1/-1 pair of a single edge always comes
/// out as (+1, -1).
fn magnitude_order(vals: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ma, mb) = (vals[a].abs(), vals[b].abs());
        let scale = ma.max(mb).max(1.0);
        if (ma - mb).abs() > 1e-12 * scale {
            return mb.partial_cmp(&ma).unwrap();
        }
        match vals[b].partial_cmp(&vals[a]).unwrap() {
            std::cmp::Ordering::Equal => a.cmp(&b),
            ord => ord,
        }
    });
    idx
}

/// Top-`m` eigenpairs of a dense symmetric matrix by magnitude.
pub fn dense_symmetric_top(a: DMatrix<f64>, m: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if m > n {
        return Err(Error::Shape(format!("requested {m} eigenpairs of order {n}")));
    }
    let eig = a.symmetric_eigen();
    let order = magnitude_order(eig.eigenvalues.as_slice());
    let mut vals = Vec::with_capacity(m);
    let mut vecs = DMatrix::zeros(n, m);
    for (c, &j) in order.iter().take(m).enumerate() {
        vals.push(eig.eigenvalues[j]);
        vecs.set_column(c, &eig.eigenvectors.column(j));
    }
    Ok((vals, vecs))
}

fn orthogonalize_against(w: &mut DVector<f64>, basis: &DMatrix<f64>, ncols: usize) {
    for _ in 0..2 {
        for c in 0..ncols {
            let col = basis.column(c);
            let proj = col.dot(w);
            w.axpy(-proj, &col.clone_owned(), 1.0);
        }
    }
}

/// Top-`m` eigenpairs by magnitude via thick-restart Lanczos with full
/// reorthogonalisation. Ritz selection by |θ| keeps both ends of the
/// spectrum, which is what the magnitude ordering needs.
pub fn lanczos_symmetric_top(
    op: &dyn SymOp,
    m: usize,
    tol: f64,
    max_matvecs: usize,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = op.dim();
    if m > n {
        return Err(Error::Shape(format!("requested {m} eigenpairs of order {n}")));
    }
    if m == 0 {
        return Ok((Vec::new(), DMatrix::zeros(n, 0)));
    }
    let ncv = (2 * m + 12).min(n);
    if ncv == n {
        return dense_symmetric_top(op.materialize(), m);
    }
    let keep = (m + (m / 2).max(4)).min(ncv - 2);

    let mut rng = stream_rng(0x5b3c_7a91, 0);
    let fresh_direction = |basis: &DMatrix<f64>, ncols: usize, rng: &mut rand_chacha::ChaCha20Rng| {
        let mut f = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        orthogonalize_against(&mut f, basis, ncols);
        let norm = f.norm();
        if norm < 1e-12 {
            None
        } else {
            Some(f / norm)
        }
    };

    let mut v = DMatrix::<f64>::zeros(n, ncv);
    let mut t = DMatrix::<f64>::zeros(ncv, ncv);
    {
        let mut start = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        start /= start.norm();
        v.set_column(0, &start);
    }

    let mut first_new = 0usize; // first basis column still to be processed
    let mut matvecs = 0usize;
    let mut work = vec![0.0; n];

    loop {
        let mut beta_last = 0.0;
        let mut w_last: Option<DVector<f64>> = None;
        for j in first_new..ncv {
            let vj = v.column(j).clone_owned();
            op.apply(vj.as_slice(), &mut work);
            matvecs += 1;
            let av = DVector::from_column_slice(&work);
            t[(j, j)] = vj.dot(&av);
            let mut w = av;
            orthogonalize_against(&mut w, &v, j + 1);
            let beta = w.norm();
            if j + 1 < ncv {
                if beta < 1e-13 {
                    match fresh_direction(&v, j + 1, &mut rng) {
                        Some(f) => v.set_column(j + 1, &f),
                        None => break,
                    }
                    // exact invariant subspace: zero coupling
                } else {
                    w /= beta;
                    v.set_column(j + 1, &w);
                    t[(j, j + 1)] = beta;
                    t[(j + 1, j)] = beta;
                }
            } else {
                beta_last = beta;
                if beta >= 1e-13 {
                    w_last = Some(w / beta);
                }
            }
        }

        let tt = t.view((0, 0), (ncv, ncv)).clone_owned();
        let eig = tt.symmetric_eigen();
        let order = magnitude_order(eig.eigenvalues.as_slice());
        let theta: Vec<f64> = order.iter().map(|&c| eig.eigenvalues[c]).collect();
        let resid: Vec<f64> = order
            .iter()
            .map(|&c| (beta_last * eig.eigenvectors[(ncv - 1, c)]).abs())
            .collect();
        let converged = (0..m).all(|i| resid[i] <= tol * theta[i].abs().max(1.0));

        if converged {
            let mut vals = Vec::with_capacity(m);
            let mut vecs = DMatrix::zeros(n, m);
            for (c, &oi) in order.iter().take(m).enumerate() {
                vals.push(eig.eigenvalues[oi]);
                let y = eig.eigenvectors.column(oi);
                let mut col = DVector::zeros(n);
                for r in 0..ncv {
                    col.axpy(y[r], &v.column(r).clone_owned(), 1.0);
                }
                col /= col.norm();
                vecs.set_column(c, &col);
            }
            return Ok((vals, vecs));
        }
        if matvecs >= max_matvecs {
            return Err(Error::Eigensolver(format!(
                "no convergence after {matvecs} matrix products; leading residual norms {:?}",
                &resid[..m]
            )));
        }

        // Thick restart: compress onto the leading Ritz vectors; the saved
        // Lanczos residual becomes the next basis vector, coupled to the
        // restarted block through beta_last * (bottom row of the Ritz basis).
        let mut newv = DMatrix::<f64>::zeros(n, ncv);
        let mut newt = DMatrix::<f64>::zeros(ncv, ncv);
        for (c, &oi) in order.iter().take(keep).enumerate() {
            let y = eig.eigenvectors.column(oi);
            let mut col = DVector::zeros(n);
            for r in 0..ncv {
                col.axpy(y[r], &v.column(r).clone_owned(), 1.0);
            }
            newt[(c, c)] = eig.eigenvalues[oi];
            let b = beta_last * eig.eigenvectors[(ncv - 1, oi)];
            newt[(keep, c)] = b;
            newt[(c, keep)] = b;
            newv.set_column(c, &col);
        }
        let next = match w_last {
            Some(mut w) => {
                orthogonalize_against(&mut w, &newv, keep);
                let norm = w.norm();
                if norm < 1e-13 {
                    fresh_direction(&newv, keep, &mut rng)
                } else {
                    Some(w / norm)
                }
            }
            None => fresh_direction(&newv, keep, &mut rng),
        };
        match next {
            Some(f) => newv.set_column(keep, &f),
            None => {
                return Err(Error::Eigensolver(
                    "restart space exhausted before convergence".into(),
                ))
            }
        }
        v = newv;
        t = newt;
        first_new = keep;
    }
}

/// Top-`m` eigenpairs, dense or iterative depending on the operator order.
pub fn symmetric_top(
    op: &dyn SymOp,
    m: usize,
    dense_cap: usize,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = op.dim();
    if n <= dense_cap || 2 * m + 12 >= n {
        dense_symmetric_top(op.materialize(), m)
    } else {
        lanczos_symmetric_top(op, m, LANCZOS_TOL, 10 * m * n)
    }
}

/// Top-`m` singular triplets of a dense matrix, descending singular values.
pub fn dense_svd_top(a: DMatrix<f64>, m: usize) -> Result<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let (nr, nc) = (a.nrows(), a.ncols());
    if m > nr.min(nc) {
        return Err(Error::Shape(format!(
            "requested {m} singular triplets of a {nr}x{nc} matrix"
        )));
    }
    let svd = a
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Eigensolver("SVD did not converge".into()))?;
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let sv = svd.singular_values;
    let mut idx: Vec<usize> = (0..sv.len()).collect();
    idx.sort_by(|&x, &y| match sv[y].partial_cmp(&sv[x]).unwrap() {
        std::cmp::Ordering::Equal => x.cmp(&y),
        ord => ord,
    });
    let mut vals = Vec::with_capacity(m);
    let mut um = DMatrix::zeros(nr, m);
    let mut vm = DMatrix::zeros(nc, m);
    for (c, &j) in idx.iter().take(m).enumerate() {
        vals.push(sv[j]);
        um.set_column(c, &u.column(j));
        vm.set_column(c, &vt.row(j).transpose());
    }
    Ok((vals, um, vm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, GraphKind};
    use crate::util::stream_rng;
    use rand::Rng;

    struct AdjOp<'a>(&'a Graph);
    impl SymOp for AdjOp<'_> {
        fn dim(&self) -> usize {
            self.0.n_rows()
        }
        fn apply(&self, x: &[f64], y: &mut [f64]) {
            for i in 0..self.0.n_rows() {
                y[i] = self.0.neighbors(i).iter().map(|&j| x[j as usize]).sum();
            }
        }
    }

    fn random_connected(n: usize, extra: usize, seed: u64) -> Graph {
        let mut rng = stream_rng(seed, 0);
        let mut edges: Vec<(u32, u32)> = (1..n as u32)
            .map(|i| (rng.random_range(0..i), i))
            .collect();
        for _ in 0..extra {
            let i = rng.random_range(0..n as u32);
            let j = rng.random_range(0..n as u32);
            if i != j {
                edges.push((i.min(j), i.max(j)));
            }
        }
        Graph::from_edges(GraphKind::Undirected, n, n, edges).unwrap()
    }

    #[test]
    fn magnitude_order_prefers_positive_on_ties() {
        let order = magnitude_order(&[-1.0, 0.2, 1.0]);
        assert_eq!(order, vec![2, 0, 1]);
    }

    #[test]
    fn lanczos_matches_dense_on_random_graphs() {
        for seed in [1u64, 2, 3] {
            let g = random_connected(220, 800, seed);
            let a = g.dense_adjacency(1000).unwrap();
            let (dv, _) = dense_symmetric_top(a, 8).unwrap();
            let op = AdjOp(&g);
            let (lv, lx) = lanczos_symmetric_top(&op, 8, 1e-10, 10 * 8 * 220).unwrap();
            for i in 0..8 {
                assert!(
                    (dv[i] - lv[i]).abs() <= 1e-7 * dv[i].abs().max(1.0),
                    "seed {seed} eigenvalue {i}: dense {} vs lanczos {}",
                    dv[i],
                    lv[i]
                );
            }
            let mut y = vec![0.0; 220];
            for c in 0..8 {
                let x: Vec<f64> = lx.column(c).iter().cloned().collect();
                op.apply(&x, &mut y);
                let r: f64 = y
                    .iter()
                    .zip(x.iter())
                    .map(|(yi, xi)| (yi - lv[c] * xi).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(r < 1e-8 * lv[c].abs().max(1.0), "residual {r}");
            }
        }
    }

    #[test]
    fn lanczos_deterministic() {
        let g = random_connected(150, 500, 9);
        let op = AdjOp(&g);
        let (v1, x1) = lanczos_symmetric_top(&op, 5, 1e-10, 10_000).unwrap();
        let (v2, x2) = lanczos_symmetric_top(&op, 5, 1e-10, 10_000).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(x1, x2);
    }

    #[test]
    fn dense_svd_sorted() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 3.0, 0.0, 0.0]);
        let (s, u, v) = dense_svd_top(a, 2).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-12 && (s[1] - 1.0).abs() < 1e-12);
        assert_eq!(u.nrows(), 3);
        assert_eq!(v.nrows(), 2);
    }
}
