//! Symmetric eigensolvers used by the projections and the diversity axis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::matrix::Matrix;

pub const EIG_TOL: f64 = 1e-9;
pub const EIG_MAX_ITERS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub value: f64,
    pub vector: Vec<f64>,
}

fn mat_vec(a: &Matrix, v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        *o = a.row(i).iter().zip(v).map(|(x, y)| x * y).sum();
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let c = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
    }
}

/// The `count` eigenpairs of largest magnitude of a symmetric matrix,
/// sorted by descending eigenvalue.
///
/// Power iteration with deflation by orthogonalization against the vectors
/// already found; each vector stops when it moves less than `EIG_TOL` or
/// after `EIG_MAX_ITERS` steps. A final Rayleigh-Ritz step on the found
/// subspace resolves rotations within clusters of near-equal eigenvalues.
pub fn top_eigenpairs(a: &Matrix, count: usize) -> Vec<EigenPair> {
    let n = a.rows();
    assert_eq!(n, a.cols(), "matrix must be square");
    let count = count.min(n);
    if count == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut next = vec![0.0; n];
    for _ in 0..count {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        orthogonalize(&mut v, &basis);
        if normalize(&mut v) == 0.0 {
            break;
        }
        for _ in 0..EIG_MAX_ITERS {
            mat_vec(a, &v, &mut next);
            orthogonalize(&mut next, &basis);
            orthogonalize(&mut next, &basis);
            if normalize(&mut next) == 0.0 {
                break;
            }
            // a negative eigenvalue flips the iterate each step
            let sign = if dot(&next, &v) < 0.0 { -1.0 } else { 1.0 };
            let delta = next.iter().zip(&v).map(|(x, y)| (sign * x - y).powi(2)).sum::<f64>().sqrt();
            std::mem::swap(&mut v, &mut next);
            if delta < EIG_TOL {
                break;
            }
        }
        basis.push(v);
    }
    rayleigh_ritz(a, basis)
}

fn rayleigh_ritz(a: &Matrix, basis: Vec<Vec<f64>>) -> Vec<EigenPair> {
    let p = basis.len();
    let n = a.rows();
    let mut av = vec![vec![0.0; n]; p];
    for (v, out) in basis.iter().zip(av.iter_mut()) {
        mat_vec(a, v, out);
    }
    let mut h = Matrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            h.set(i, j, 0.5 * (dot(&basis[i], &av[j]) + dot(&basis[j], &av[i])));
        }
    }
    let small = jacobi_eigen(&h);
    small
        .into_iter()
        .map(|pair| {
            let mut vector = vec![0.0; n];
            for (c, b) in pair.vector.iter().zip(&basis) {
                vector.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
            }
            normalize(&mut vector);
            EigenPair { value: pair.value, vector }
        })
        .collect()
}

/// Full eigendecomposition of a small symmetric matrix by cyclic Jacobi
/// rotations, sorted by descending eigenvalue.
pub fn jacobi_eigen(a: &Matrix) -> Vec<EigenPair> {
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::zeros(n, n);
    for i in 0..n {
        v.set(i, i, 1.0);
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut pairs: Vec<EigenPair> = (0..n)
        .map(|j| EigenPair {
            value: m.get(j, j),
            vector: (0..n).map(|i| v.get(i, j)).collect(),
        })
        .collect();
    pairs.sort_by(|a, b| b.value.total_cmp(&a.value));
    pairs
}

/// Flips `v` so its entries sum to a non-negative value; when the sum is
/// zero, the first nonzero entry is made positive.
pub fn fix_sign(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    let flip = if s.abs() > 1e-12 {
        s < 0.0
    } else {
        v.iter().find(|x| x.abs() > 1e-12).is_some_and(|&x| x < 0.0)
    };
    if flip {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}
