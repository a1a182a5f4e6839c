//! Small deterministic vector kernels shared by the operator and estimator code.

use nalgebra::DMatrix;

const PAIRWISE_BLOCK: usize = 64;

/// Pairwise-summed inner product. The summation tree depends only on the
/// length, so results are reproducible regardless of caller.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: length mismatch");
    pairwise(a, b)
}

fn pairwise(a: &[f64], b: &[f64]) -> f64 {
    if a.len() <= PAIRWISE_BLOCK {
        let mut s = 0.0;
        for (x, y) in a.iter().zip(b) {
            s += x * y;
        }
        return s;
    }
    let mid = a.len() / 2;
    pairwise(&a[..mid], &b[..mid]) + pairwise(&a[mid..], &b[mid..])
}

pub fn sum(a: &[f64]) -> f64 {
    if a.len() <= PAIRWISE_BLOCK {
        return a.iter().sum();
    }
    let mid = a.len() / 2;
    sum(&a[..mid]) + sum(&a[mid..])
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `|a - b| / |b|`, with `|a|` returned when `b` vanishes.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let nb = norm(b);
    let d = norm(&sub(a, b));
    if nb == 0.0 {
        d
    } else {
        d / nb
    }
}

/// Relative Frobenius distance between two dense matrices.
pub fn rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let nb = b.norm();
    let d = (a - b).norm();
    if nb == 0.0 {
        d
    } else {
        d / nb
    }
}

/// Numerical rank: singular values above `rel_tol * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// Eigenvalues of a symmetric matrix, sorted in descending order, with the
/// matching eigenvectors as columns.
pub fn sym_eig_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}
