//! Seeded K-means (k-means++ initialisation, Lloyd iterations) used to
//! initialise the sampler's cluster configuration.

use nalgebra::DMatrix;
use rand::Rng;

/// Cluster the first `cols` columns of `x` into `k` groups.
/// Deterministic given the RNG state.
pub fn kmeans<R: Rng + ?Sized>(x: &DMatrix<f64>, cols: usize, k: usize, rng: &mut R) -> Vec<u32> {
    let n = x.nrows();
    let cols = cols.min(x.ncols()).max(1);
    let k = k.min(n).max(1);
    let dist2 = |i: usize, c: &[f64]| -> f64 {
        let mut acc = 0.0;
        for j in 0..cols {
            let d = x[(i, j)] - c[j];
            acc += d * d;
        }
        acc
    };
    let row = |i: usize| -> Vec<f64> { (0..cols).map(|j| x[(i, j)]).collect() };

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(i, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                u -= w;
                if u <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centers.push(row(next));
        for i in 0..n {
            d2[i] = d2[i].min(dist2(i, centers.last().unwrap()));
        }
    }

    let mut assign = vec![0u32; n];
    for _ in 0..100 {
        let mut moved = false;
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = dist2(i, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[i] != best as u32 {
                assign[i] = best as u32;
                moved = true;
            }
        }
        // recompute centers; reseed empty clusters with the farthest point
        let mut sums = vec![vec![0.0; cols]; k];
        let mut cnts = vec![0usize; k];
        for i in 0..n {
            cnts[assign[i] as usize] += 1;
            for j in 0..cols {
                sums[assign[i] as usize][j] += x[(i, j)];
            }
        }
        for c in 0..k {
            if cnts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        dist2(a, &centers[assign[a] as usize])
                            .partial_cmp(&dist2(b, &centers[assign[b] as usize]))
                            .unwrap()
                    })
                    .unwrap();
                centers[c] = row(far);
                moved = true;
            } else {
                for j in 0..cols {
                    centers[c][j] = sums[c][j] / cnts[c] as f64;
                }
            }
        }
        if !moved {
            break;
        }
    }
    assign
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::stream_rng;

    #[test]
    fn separates_two_obvious_blobs() {
        let mut rows = Vec::new();
        for i in 0..20 {
            let t = (i % 10) as f64 * 0.01;
            if i < 10 {
                rows.push([t, t]);
            } else {
                rows.push([5.0 + t, 5.0 - t]);
            }
        }
        let x = DMatrix::from_fn(20, 2, |i, j| rows[i][j]);
        let mut rng = stream_rng(3, 0);
        let z = kmeans(&x, 2, 2, &mut rng);
        for i in 1..10 {
            assert_eq!(z[i], z[0]);
            assert_eq!(z[10 + i], z[10]);
        }
        assert_ne!(z[0], z[10]);
    }

    #[test]
    fn deterministic_given_stream() {
        let x = DMatrix::from_fn(30, 3, |i, j| ((i * 7 + j * 3) % 13) as f64);
        let a = kmeans(&x, 3, 4, &mut stream_rng(5, 1));
        let b = kmeans(&x, 3, 4, &mut stream_rng(5, 1));
        assert_eq!(a, b);
    }
}
