//! Small deterministic linear algebra used by the filters: a cyclic Jacobi
//! eigensolver for symmetric matrices and a 2-means with farthest-pair
//! initialization. No randomness, so filter outputs are reproducible.

use ndarray::{Array1, Array2};

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues ascending, eigenvectors as columns).
pub fn sym_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.dim().0;
    assert_eq!(a.dim().0, a.dim().1, "square matrix");
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);

    let off = |m: &Array2<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += m[[i, j] ] * m[[i, j]];
            }
        }
        s
    };

    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(1e-300);
    for _sweep in 0..100 {
        if off(&m) <= 1e-24 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[[i, i]]
            .partial_cmp(&m[[j, j]])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut vals = Array1::<f64>::zeros(n);
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (new, &old) in order.iter().enumerate() {
        vals[new] = m[[old, old]];
        // canonical sign: largest-magnitude component positive
        let mut best = 0;
        for k in 0..n {
            if v[[k, old]].abs() > v[[best, old]].abs() {
                best = k;
            }
        }
        let sign = if v[[best, old]] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vecs[[k, new]] = sign * v[[k, old]];
        }
    }
    (vals, vecs)
}

/// Eigenvector of the largest eigenvalue.
pub fn top_eigenvector(a: &Array2<f64>) -> Array1<f64> {
    let (_, vecs) = sym_eigen(a);
    let n = a.dim().0;
    vecs.column(n - 1).to_owned()
}

/// Row mean of a data matrix.
pub fn row_mean(x: &Array2<f64>) -> Array1<f64> {
    let n = x.dim().0 as f64;
    let mut mu = Array1::<f64>::zeros(x.dim().1);
    for row in x.outer_iter() {
        mu += &row;
    }
    mu / n
}

/// Covariance (biased, /n) of rows around their mean.
pub fn covariance(x: &Array2<f64>, mu: &Array1<f64>) -> Array2<f64> {
    let (n, m) = x.dim();
    let mut cov = Array2::<f64>::zeros((m, m));
    for row in x.outer_iter() {
        let d = &row - mu;
        for i in 0..m {
            if d[i] == 0.0 {
                continue;
            }
            for j in 0..m {
                cov[[i, j]] += d[i] * d[j];
            }
        }
    }
    cov / n as f64
}

/// Inverse square root of a symmetric positive definite matrix via its
/// eigen-decomposition; eigenvalues are floored at `floor`.
pub fn inv_sqrt(a: &Array2<f64>, floor: f64) -> Array2<f64> {
    let (vals, vecs) = sym_eigen(a);
    let n = a.dim().0;
    let mut out = Array2::<f64>::zeros((n, n));
    for k in 0..n {
        let lam = vals[k].max(floor);
        let w = 1.0 / lam.sqrt();
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += w * vecs[[i, k]] * vecs[[j, k]];
            }
        }
    }
    out
}

/// Squared Mahalanobis distances of rows under (mu, cov^-1 via eigen).
pub fn mahalanobis_sq(x: &Array2<f64>, mu: &Array1<f64>, cov: &Array2<f64>, floor: f64) -> Vec<f64> {
    let (vals, vecs) = sym_eigen(cov);
    let m = cov.dim().0;
    x.outer_iter()
        .map(|row| {
            let d = &row - mu;
            let mut total = 0.0;
            for k in 0..m {
                let lam = vals[k].max(floor);
                let proj: f64 = (0..m).map(|i| d[i] * vecs[[i, k]]).sum();
                total += proj * proj / lam;
            }
            total
        })
        .collect()
}

/// Deterministic 2-means: centers start at the farthest pair of points
/// (smallest indices on ties), then Lloyd iterations until stable.
pub fn kmeans2(x: &Array2<f64>) -> Vec<usize> {
    let n = x.dim().0;
    if n < 2 {
        return vec![0; n];
    }
    let dist2 = |a: usize, b: usize| -> f64 {
        x.row(a)
            .iter()
            .zip(x.row(b).iter())
            .map(|(p, q)| (p - q) * (p - q))
            .sum()
    };
    let (mut bi, mut bj, mut best) = (0usize, 1usize, -1.0f64);
    for i in 0..n {
        for j in i + 1..n {
            let d = dist2(i, j);
            if d > best {
                best = d;
                bi = i;
                bj = j;
            }
        }
    }
    let mut centers = [x.row(bi).to_owned(), x.row(bj).to_owned()];
    let mut assign = vec![0usize; n];
    for _ in 0..200 {
        let mut changed = false;
        for i in 0..n {
            let d0: f64 = x
                .row(i)
                .iter()
                .zip(centers[0].iter())
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            let d1: f64 = x
                .row(i)
                .iter()
                .zip(centers[1].iter())
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            let a = usize::from(d1 < d0);
            if assign[i] != a {
                assign[i] = a;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for c in 0..2 {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            if members.is_empty() {
                continue; // keep the previous center
            }
            let mut mean = Array1::<f64>::zeros(x.dim().1);
            for &i in &members {
                mean += &x.row(i);
            }
            centers[c] = mean / members.len() as f64;
        }
    }
    assign
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn eigen_of_diagonal() {
        let a = array![[3.0, 0.0], [0.0, 1.0]];
        let (vals, vecs) = sym_eigen(&a);
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
        assert!((vecs[[0, 1]].abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn eigen_reconstructs_matrix() {
        let a = array![
            [4.0, 1.0, 0.5],
            [1.0, 3.0, -0.2],
            [0.5, -0.2, 2.0]
        ];
        let (vals, vecs) = sym_eigen(&a);
        let mut rebuilt = Array2::<f64>::zeros((3, 3));
        for k in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    rebuilt[[i, j]] += vals[k] * vecs[[i, k]] * vecs[[j, k]];
                }
            }
        }
        for (x, y) in a.iter().zip(rebuilt.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn inv_sqrt_whitens() {
        let a = array![[4.0, 0.0], [0.0, 9.0]];
        let w = inv_sqrt(&a, 1e-12);
        // W a W^T should be the identity
        let prod = w.dot(&a).dot(&w.t());
        assert!((prod[[0, 0]] - 1.0).abs() < 1e-9);
        assert!((prod[[1, 1]] - 1.0).abs() < 1e-9);
        assert!(prod[[0, 1]].abs() < 1e-9);
    }

    #[test]
    fn kmeans_separates_two_blobs() {
        let mut rows = Vec::new();
        for i in 0..8 {
            rows.push([i as f64 * 0.01, 0.0]);
        }
        for i in 0..4 {
            rows.push([10.0 + i as f64 * 0.01, 0.0]);
        }
        let x = Array2::from_shape_vec((12, 2), rows.into_iter().flatten().collect()).unwrap();
        let assign = kmeans2(&x);
        let first = assign[0];
        assert!(assign[..8].iter().all(|&a| a == first));
        assert!(assign[8..].iter().all(|&a| a != first));
    }
}
