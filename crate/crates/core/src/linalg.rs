//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// `(A + Aᵀ) / 2`.
pub fn sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eig(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 1 {
        return a[(0, 0)];
    }
    SymmetricEigen::new(a.clone()).eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 1 {
        return a[(0, 0)];
    }
    SymmetricEigen::new(a.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Induced 2-norm of a symmetric matrix.
pub fn sym_norm(a: &DMatrix<f64>) -> f64 {
    max_eig(a).abs().max(min_eig(a).abs())
}

/// Number of entries in the upper triangle of an `n x n` matrix.
pub fn tri_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Row-major `(row, col)` positions of the upper triangle, `row <= col`.
pub fn upper_tri_indices(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(tri_len(n));
    for i in 0..n {
        for j in i..n {
            out.push((i, j));
        }
    }
    out
}

/// Dimension `n` with `n(n+1)/2 == len`, if any.
pub fn tri_dim(len: usize) -> Option<usize> {
    let n = ((((8 * len + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    (tri_len(n) == len).then_some(n)
}

/// Packs the upper triangle of a symmetric matrix, row-major.
pub fn pack_sym(a: &DMatrix<f64>) -> Vec<f64> {
    upper_tri_indices(a.nrows()).into_iter().map(|(i, j)| a[(i, j)]).collect()
}

/// Inverse of [`pack_sym`].
pub fn unpack_sym(n: usize, v: &[f64]) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(n, n);
    for (k, (i, j)) in upper_tri_indices(n).into_iter().enumerate() {
        a[(i, j)] = v[k];
        a[(j, i)] = v[k];
    }
    a
}

/// Gauss–Legendre nodes and weights mapped onto `[0, 1]`.
pub fn gauss_legendre01(order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(order >= 1);
    if order == 1 {
        return (vec![0.5], vec![1.0]);
    }
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Chebyshev initial guess, then Newton on P_n.
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let legendre = |z: f64| {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            (p1, n as f64 * (z * p1 - p0) / (z * z - 1.0))
        };
        for _ in 0..100 {
            let (p, dp) = legendre(z);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let dp = legendre(z).1;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        nodes[i] = 0.5 * (1.0 - z);
        nodes[n - 1 - i] = 0.5 * (1.0 + z);
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    (nodes, weights)
}

/// Solves `A X + X Aᵀ + Q = 0` by vectorization. Intended for small `n`.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    // vec(A X + X Aᵀ) = (I ⊗ A + A ⊗ I) vec(X)
    let k = eye.kronecker(a) + a.kronecker(&eye);
    let rhs = -DVector::from_column_slice(q.as_slice());
    let sol = k.lu().solve(&rhs).ok_or_else(|| Error::Solver("singular Lyapunov operator".into()))?;
    let x = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok(sym(&x))
}

/// Residual norm of the control-form CARE `AᵀP + PA − P B R⁻¹ Bᵀ P + Q`.
pub fn care_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let rinv = r.clone().try_inverse().unwrap_or_else(|| r.clone());
    (a.transpose() * p + p * a - p * b * rinv * b.transpose() * p + q).norm()
}

/// Solves the control-form continuous algebraic Riccati equation
/// `AᵀP + PA − P B R⁻¹ Bᵀ P + Q = 0` by Newton–Kleinman iteration.
///
/// The initial stabilizing gain comes from a Lyapunov solve on the
/// shifted matrix `A − βI`, with `β` past the spectral abscissa.
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let rinv = r.clone().try_inverse().ok_or_else(|| Error::Solver("R not invertible".into()))?;
    let s = b * &rinv * b.transpose();

    // Bass-type stabilizing start: shifted Lyapunov solve.
    let beta = a.norm() + 1.0;
    let shifted = -(a + &eye * beta);
    let lyap = solve_lyapunov(&shifted, &(&s * 2.0))?;
    let mut k = match lyap.clone().try_inverse() {
        Some(inv) if min_eig(&lyap) > 0.0 => &rinv * b.transpose() * inv,
        _ => DMatrix::zeros(b.ncols(), n),
    };

    let mut p = DMatrix::zeros(n, n);
    for _ in 0..max_iter {
        let acl = a - b * &k;
        let rhs = q + k.transpose() * r * &k;
        // AclᵀP + P Acl + rhs = 0
        let p_next = solve_lyapunov(&acl.transpose(), &rhs)?;
        k = &rinv * b.transpose() * &p_next;
        let change = (&p_next - &p).norm();
        p = p_next;
        if care_residual(a, b, q, r, &p) <= tol * (1.0 + p.norm()) || change <= 1e-15 {
            break;
        }
    }
    if !p.iter().all(|v| v.is_finite()) {
        return Err(Error::Solver("Riccati iteration diverged".into()));
    }
    let res = care_residual(a, b, q, r, &p);
    if res > 1e-6 * (1.0 + p.norm()) {
        return Err(Error::Solver(format!("Riccati residual {res:.3e}")));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        for order in 1..=12 {
            let (x, w) = gauss_legendre01(order);
            assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-14);
            for deg in 0..(2 * order) {
                let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
                assert_relative_eq!(q, 1.0 / (deg as f64 + 1.0), epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn pack_roundtrip_and_order() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 2.0]);
        assert_eq!(pack_sym(&a), vec![4.0, 2.0, 2.0]);
        assert_eq!(unpack_sym(2, &pack_sym(&a)), a);
        assert_eq!(tri_dim(6), Some(3));
        assert_eq!(tri_dim(5), None);
    }

    #[test]
    fn care_scalar_closed_form() {
        // a = 1, b = 1, q = 1, r = 1: 2p - p^2 + 1 = 0 -> p = 1 + sqrt(2)
        let one = DMatrix::from_element(1, 1, 1.0);
        let p = solve_care(&one, &one, &one, &one, 1e-12, 50).unwrap();
        assert_relative_eq!(p[(0, 0)], 1.0 + 2f64.sqrt(), epsilon = 1e-10);
    }

    #[test]
    fn lyapunov_matches_definition() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 0.0, -3.0]);
        let q = DMatrix::identity(2, 2);
        let x = solve_lyapunov(&a, &q).unwrap();
        let r = &a * &x + &x * a.transpose() + q;
        assert!(r.norm() < 1e-12);
    }
}
