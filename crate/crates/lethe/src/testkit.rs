//! Independent numerical oracles used to validate the main implementation.
//!
//! Nothing here shares code with the paths it checks: the finite-difference
//! gradient check evaluates losses through plain forward passes, the Jacobi
//! eigensolver knows nothing about the covariance estimator, and the
//! rank-one residual check is plain slice arithmetic. Keeping these routines
//! in the library (rather than test files) lets the integration and
//! acceptance suites share them.

use crate::numcore::Matrix;

/// Relative error between an analytic and a reference value, with an
/// absolute floor so that near-zero pairs compare absolutely.
pub fn relative_error(analytic: f64, reference: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(reference.abs());
    if scale <= floor {
        0.0
    } else {
        (analytic - reference).abs() / scale
    }
}

/// Central finite differences of a scalar function over every entry of a
/// parameter vector. `f` must be a pure function of `theta`.
pub fn central_differences(theta: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + step;
        let plus = f(&work);
        work[i] = orig - step;
        let minus = f(&work);
        work[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    out
}

/// Worst relative error between an analytic gradient and its
/// finite-difference estimate. Pairs whose magnitudes both sit below
/// `floor` are treated as matching zeros.
pub fn max_gradient_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| relative_error(*a, *n, floor))
        .fold(0.0, f64::max)
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method,
/// ascending. Independent of the linear solver used elsewhere.
pub fn symmetric_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    assert_eq!(a.cols(), n, "symmetric_eigenvalues expects a square matrix");
    let mut m = a.clone();
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m.get(p, q) * m.get(p, q);
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + m.max_abs()) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m.get(k, p);
                    let akq = m.get(k, q);
                    m.set(k, p, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = m.get(p, k);
                    let aqk = m.get(q, k);
                    m.set(p, k, c * apk - s * aqk);
                    m.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eig
}

/// Dominant singular triple `(sigma, u, v)` of a matrix by power iteration
/// on `A^T A`, with `u` recovered from `A v`.
pub fn top_singular_triple(a: &Matrix) -> (f64, Vec<f64>, Vec<f64>) {
    let (rows, cols) = a.shape();
    let mut v: Vec<f64> = (0..cols)
        .map(|i| 1.0 + (i as f64 * 0.618).sin() * 0.01)
        .collect();
    normalize(&mut v);
    for _ in 0..200 {
        // w = A v, then v = A^T w.
        let mut w = vec![0.0; rows];
        for r in 0..rows {
            w[r] = crate::numcore::dot(a.row(r), &v);
        }
        let mut nv = vec![0.0; cols];
        for r in 0..rows {
            let wr = w[r];
            for c in 0..cols {
                nv[c] += wr * a.get(r, c);
            }
        }
        normalize(&mut nv);
        v = nv;
    }
    let mut u = vec![0.0; rows];
    for r in 0..rows {
        u[r] = crate::numcore::dot(a.row(r), &v);
    }
    let sigma = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if sigma > 0.0 {
        for x in u.iter_mut() {
            *x /= sigma;
        }
    }
    (sigma, u, v)
}

/// Upper bound on the second singular value: the Frobenius norm of the
/// residual after removing the dominant rank-one component. For a matrix
/// that is numerically rank one this sits at roundoff level.
pub fn second_singular_value_bound(a: &Matrix) -> f64 {
    let (sigma, u, v) = top_singular_triple(a);
    let mut residual = 0.0;
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            let d = a.get(r, c) - sigma * u[r] * v[c];
            residual += d * d;
        }
    }
    residual.sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_differences_of_quadratic() {
        // f(x) = x0^2 + 3 x0 x1, analytic grad (2 x0 + 3 x1, 3 x0).
        let theta = [1.5, -2.0];
        let num = central_differences(&theta, 1e-5, |t| t[0] * t[0] + 3.0 * t[0] * t[1]);
        let ana = [2.0 * theta[0] + 3.0 * theta[1], 3.0 * theta[0]];
        assert!(max_gradient_error(&ana, &num, 1e-10) < 1e-9);
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // diag(1, 2, 5) conjugated by a rotation has the same spectrum.
        let a = Matrix::from_vec(
            3,
            3,
            vec![2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 5.0],
        )
        .unwrap();
        let eig = symmetric_eigenvalues(&a);
        let expected = [1.0, 3.0, 5.0];
        for (e, x) in eig.iter().zip(expected.iter()) {
            assert!((e - x).abs() < 1e-10, "eig {e} vs {x}");
        }
    }

    #[test]
    fn rank_one_residual_is_tiny() {
        let u: Vec<f64> = (0..8).map(|i| (i as f64 + 1.0).sin()).collect();
        let v: Vec<f64> = (0..6).map(|i| (i as f64 * 2.0 + 0.3).cos()).collect();
        let a = Matrix::outer(&u, &v);
        let (sigma, _, _) = top_singular_triple(&a);
        let bound = second_singular_value_bound(&a);
        assert!(bound <= 1e-12 * sigma, "bound {bound} sigma {sigma}");
    }

    #[test]
    fn full_rank_matrix_has_large_residual() {
        let a = Matrix::identity(4);
        let bound = second_singular_value_bound(&a);
        assert!(bound > 0.5);
    }
}
