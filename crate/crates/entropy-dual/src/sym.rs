//! Packed symmetric matrices.
//!
//! Upper triangle, row-major, off-diagonal entries scaled by √2 so that the
//! Frobenius product of two matrices is the plain dot product of their packs.

use nalgebra::{DMatrix, SymmetricEigen};

pub const SQRT2: f64 = std::f64::consts::SQRT_2;

pub fn packed_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Packed position of entry `(l, m)`; order does not matter.
pub fn packed_index(n: usize, l: usize, m: usize) -> usize {
    let (l, m) = if l <= m { (l, m) } else { (m, l) };
    l * n - l * l.saturating_sub(1) / 2 + (m - l)
}

/// `(l, m)` for every packed slot.
pub fn packed_entries(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(packed_len(n));
    for l in 0..n {
        for m in l..n {
            out.push((l, m));
        }
    }
    out
}

/// Factor converting a matrix entry into its packed coordinate.
pub fn entry_scale(l: usize, m: usize) -> f64 {
    if l == m {
        1.0
    } else {
        SQRT2
    }
}

pub fn pack(mat: &DMatrix<f64>) -> Vec<f64> {
    let n = mat.nrows();
    packed_entries(n).into_iter().map(|(l, m)| mat[(l, m)] * entry_scale(l, m)).collect()
}

pub fn unpack(n: usize, p: &[f64]) -> DMatrix<f64> {
    let mut mat = DMatrix::zeros(n, n);
    for (k, (l, m)) in packed_entries(n).into_iter().enumerate() {
        let v = p[k] / entry_scale(l, m);
        mat[(l, m)] = v;
        mat[(m, l)] = v;
    }
    mat
}

pub fn identity(n: usize) -> Vec<f64> {
    packed_entries(n).into_iter().map(|(l, m)| if l == m { 1.0 } else { 0.0 }).collect()
}

pub fn trace(n: usize, p: &[f64]) -> f64 {
    (0..n).map(|l| p[packed_index(n, l, l)]).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn eigen(n: usize, p: &[f64]) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(unpack(n, p))
}

pub fn min_eigenvalue(n: usize, p: &[f64]) -> f64 {
    if n == 1 {
        return p[0];
    }
    if n == 2 {
        let (a, b, c) = (p[0], p[1] / SQRT2, p[2]);
        let mid = 0.5 * (a + c);
        let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        return mid - rad;
    }
    eigen(n, p).eigenvalues.min()
}

pub fn max_eigenvalue(n: usize, p: &[f64]) -> f64 {
    let neg: Vec<f64> = p.iter().map(|v| -v).collect();
    -min_eigenvalue(n, &neg)
}

/// Smallest eigenvalue with a unit eigenvector, as a packed outer product.
pub fn min_eigenpair_outer(n: usize, p: &[f64]) -> (f64, Vec<f64>) {
    let e = eigen(n, p);
    let (idx, lam) = e.eigenvalues.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, v)| if *v < acc.1 { (i, *v) } else { acc });
    let v = e.eigenvectors.column(idx);
    let outer = v * v.transpose();
    (lam, pack(&outer))
}

/// Euclidean projection onto the PSD cone by eigenvalue clipping.
pub fn project_psd(n: usize, p: &[f64]) -> Vec<f64> {
    let e = eigen(n, p);
    let clipped = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0)));
    pack(&(&e.eigenvectors * clipped * e.eigenvectors.transpose()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_matches_enumeration() {
        for n in 1..7 {
            for (k, (l, m)) in packed_entries(n).into_iter().enumerate() {
                assert_eq!(packed_index(n, l, m), k);
                assert_eq!(packed_index(n, m, l), k);
            }
        }
    }

    #[test]
    fn frobenius_is_packed_dot() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 5.0, -1.0, 3.0, -1.0, 4.0]);
        let b = DMatrix::from_row_slice(3, 3, &[0.5, -1.0, 0.0, -1.0, 2.0, 7.0, 0.0, 7.0, 1.0]);
        let frob: f64 = a.component_mul(&b).sum();
        assert!((dot(&pack(&a), &pack(&b)) - frob).abs() < 1e-12);
        assert_eq!(unpack(3, &pack(&a)), a);
    }

    #[test]
    fn small_eigen_shortcuts_agree() {
        let p = pack(&DMatrix::from_row_slice(2, 2, &[1.0, 3.0, 3.0, -2.0]));
        let full = eigen(2, &p).eigenvalues.min();
        assert!((min_eigenvalue(2, &p) - full).abs() < 1e-12);
    }
}
