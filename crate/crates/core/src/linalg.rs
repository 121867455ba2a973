//! Small dense linear-algebra kernels that the geometry code needs without
//! pulling a full decomposition from a library.

use nalgebra::{Matrix3, Vector3};

/// Off-diagonal Frobenius norm, relative to the full norm, at which the
/// Jacobi sweep stops.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
/// Upper bound on cyclic sweeps.
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymmetricEigen3 {
    /// Eigenvalues in the order the solver produced them (unsorted).
    pub values: [f64; 3],
    /// Unit eigenvectors; `vectors[j]` pairs with `values[j]`.
    pub vectors: [Vector3<f64>; 3],
    pub sweeps: usize,
}

fn off_diagonal_norm(a: &Matrix3<f64>) -> f64 {
    (2.0 * (a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2))).sqrt()
}

/// Cyclic Jacobi iteration on a symmetric 3×3 matrix.
///
/// Only the upper triangle of `m` is read; the lower triangle is assumed to
/// mirror it.
pub fn symmetric_eigen3(m: &Matrix3<f64>) -> SymmetricEigen3 {
    let mut a = *m;
    for i in 0..3 {
        for j in 0..i {
            a[(i, j)] = a[(j, i)];
        }
    }
    let mut v = Matrix3::<f64>::identity();
    let norm = a.norm();
    let mut sweeps = 0;

    while sweeps < JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&a) <= JACOBI_TOLERANCE * norm {
            break;
        }
        sweeps += 1;
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = a[(p, q)];
            if apq == 0.0 {
                continue;
            }
            let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;

            // A <- Jᵀ A J on rows/columns p and q.
            for k in 0..3 {
                let akp = a[(k, p)];
                let akq = a[(k, q)];
                a[(k, p)] = c * akp - s * akq;
                a[(k, q)] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[(p, k)];
                let aqk = a[(q, k)];
                a[(p, k)] = c * apk - s * aqk;
                a[(q, k)] = s * apk + c * aqk;
            }
            a[(p, q)] = 0.0;
            a[(q, p)] = 0.0;

            for k in 0..3 {
                let vkp = v[(k, p)];
                let vkq = v[(k, q)];
                v[(k, p)] = c * vkp - s * vkq;
                v[(k, q)] = s * vkp + c * vkq;
            }
        }
    }

    SymmetricEigen3 {
        values: [a[(0, 0)], a[(1, 1)], a[(2, 2)]],
        vectors: [
            v.column(0).normalize(),
            v.column(1).normalize(),
            v.column(2).normalize(),
        ],
        sweeps,
    }
}
