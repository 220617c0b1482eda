//! Small dense linear-algebra helpers (desk-scale sizes only).

use ndarray::{Array1, Array2};

/// Invert a square matrix by Gauss-Jordan with partial pivoting.
/// Returns None when a pivot falls below `tol` relative to the largest entry.
pub fn invert(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return None;
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let tol = 1e-12 * scale;
    let mut work = a.clone();
    let mut inv = Array2::<f64>::eye(n);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r1, &r2| work[[r1, col]].abs().partial_cmp(&work[[r2, col]].abs()).unwrap())?;
        if work[[pivot_row, col]].abs() < tol {
            return None;
        }
        if pivot_row != col {
            for j in 0..n {
                work.swap([pivot_row, j], [col, j]);
                inv.swap([pivot_row, j], [col, j]);
            }
        }
        let pivot = work[[col, col]];
        for j in 0..n {
            work[[col, j]] /= pivot;
            inv[[col, j]] /= pivot;
        }
        for r in 0..n {
            if r != col {
                let factor = work[[r, col]];
                if factor != 0.0 {
                    for j in 0..n {
                        work[[r, j]] -= factor * work[[col, j]];
                        inv[[r, j]] -= factor * inv[[col, j]];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// Right pseudoinverse A^T (A A^T)^{-1} of a full-row-rank n x k matrix
/// (so pinv(A) . A-image reproduces b exactly when A x = b is solvable).
pub fn right_pseudoinverse(a: &Array2<f64>) -> Option<Array2<f64>> {
    let gram = a.dot(&a.t());
    let inv = invert(&gram)?;
    Some(a.t().dot(&inv))
}

/// Spectral norm by power iteration on A^T A.
pub fn spectral_norm(a: &Array2<f64>) -> f64 {
    let k = a.ncols();
    let mut v = Array1::from_elem(k, 1.0 / (k as f64).sqrt());
    let mut norm = 0.0;
    for _ in 0..200 {
        let w = a.t().dot(&a.dot(&v));
        let wn = w.dot(&w).sqrt();
        if wn == 0.0 {
            return 0.0;
        }
        v = w / wn;
        let av = a.dot(&v);
        let next = av.dot(&av).sqrt();
        if (next - norm).abs() <= 1e-12 * next.max(1.0) {
            return next;
        }
        norm = next;
    }
    norm
}
