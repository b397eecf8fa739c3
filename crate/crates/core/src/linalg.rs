//! Small dense helpers for the d <= 3 matrices that appear per particle and per node.

use crate::MAX_DIM;
use nalgebra::{Matrix2, Matrix3};

/// Row-major d x d matrix stored inline.
pub type MatBuf = [f64; MAX_DIM * MAX_DIM];
/// Vector of length d stored inline.
pub type VecBuf = [f64; MAX_DIM];

/// Eigenvalues (ascending) and eigenvectors (column k of the row-major buffer) of a symmetric matrix.
pub fn sym_eigen(d: usize, m: &[f64]) -> (VecBuf, MatBuf) {
    let mut vals = [0.0; MAX_DIM];
    let mut vecs = [0.0; MAX_DIM * MAX_DIM];
    match d {
        1 => {
            vals[0] = m[0];
            vecs[0] = 1.0;
        }
        2 => {
            let e = Matrix2::new(m[0], m[1], m[2], m[3]).symmetric_eigen();
            let mut order = [0usize, 1];
            order.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
            for (k, &o) in order.iter().enumerate() {
                vals[k] = e.eigenvalues[o];
                for i in 0..2 {
                    vecs[i * d + k] = e.eigenvectors[(i, o)];
                }
            }
        }
        3 => {
            let e = Matrix3::new(m[0], m[1], m[2], m[3], m[4], m[5], m[6], m[7], m[8])
                .symmetric_eigen();
            let mut order = [0usize, 1, 2];
            order.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
            for (k, &o) in order.iter().enumerate() {
                vals[k] = e.eigenvalues[o];
                for i in 0..3 {
                    vecs[i * d + k] = e.eigenvectors[(i, o)];
                }
            }
        }
        _ => panic!("sym_eigen: unsupported dimension {d}"),
    }
    (vals, vecs)
}

pub fn min_eigenvalue(d: usize, m: &[f64]) -> f64 {
    match d {
        1 => m[0],
        2 => {
            let tr = 0.5 * (m[0] + m[3]);
            let disc = (0.25 * (m[0] - m[3]).powi(2) + m[1] * m[2]).max(0.0).sqrt();
            tr - disc
        }
        _ => sym_eigen(d, m).0[0],
    }
}

pub fn max_eigenvalue(d: usize, m: &[f64]) -> f64 {
    match d {
        1 => m[0],
        2 => {
            let tr = 0.5 * (m[0] + m[3]);
            let disc = (0.25 * (m[0] - m[3]).powi(2) + m[1] * m[2]).max(0.0).sqrt();
            tr + disc
        }
        _ => sym_eigen(d, m).0[d - 1],
    }
}

pub fn frobenius(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Largest |m_ij - m_ji|.
pub fn asymmetry(d: usize, m: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..d {
        for j in (i + 1)..d {
            worst = worst.max((m[i * d + j] - m[j * d + i]).abs());
        }
    }
    worst
}

/// Solves a tridiagonal system in place (Thomas algorithm).
///
/// `lower[0]` and `upper[n-1]` are ignored. Returns `None` on a vanishing pivot.
pub fn solve_tridiagonal(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &mut [f64],
    scratch: &mut Vec<f64>,
) -> Option<()> {
    let n = diag.len();
    scratch.clear();
    scratch.resize(n, 0.0);
    let mut pivot = diag[0];
    if pivot.abs() < 1e-300 {
        return None;
    }
    rhs[0] /= pivot;
    for i in 1..n {
        scratch[i] = upper[i - 1] / pivot;
        pivot = diag[i] - lower[i] * scratch[i];
        if pivot.abs() < 1e-300 || !pivot.is_finite() {
            return None;
        }
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / pivot;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= scratch[i + 1] * rhs[i + 1];
    }
    Some(())
}
