use super::{all_finite, axpy, dot, norm, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgOptions {
    /// Relative residual target `‖Ax − b‖ / ‖b‖`.
    pub tol: f64,
    /// Iteration cap; `None` means `10 · dim`.
    pub max_iter: Option<usize>,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions {
            tol: 1e-10,
            max_iter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub rel_residual: f64,
    pub converged: bool,
}

/// Conjugate gradient for a symmetric positive definite operator.
///
/// On hitting `max_iter` the iterate with the smallest residual is returned
/// with `converged == false`.
pub fn cg_solve<F>(mut apply_a: F, b: &[f64], opts: CgOptions) -> Result<CgOutcome>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    if !all_finite(b) {
        return Err(Error::NumericalBreakdown("non-finite right-hand side".into()));
    }
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok(CgOutcome {
            x: vec![0.0; n],
            iterations: 0,
            rel_residual: 0.0,
            converged: true,
        });
    }
    let max_iter = opts.max_iter.unwrap_or(10 * n.max(1));

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);

    let mut best_x = x.clone();
    let mut best_res = 1.0;

    for it in 0..max_iter {
        let ap = apply_a(&p);
        if ap.len() != n {
            return Err(Error::DimensionMismatch {
                what: "operator output",
                expected: n,
                got: ap.len(),
            });
        }
        let pap = dot(&p, &ap);
        if !pap.is_finite() {
            return Err(Error::NumericalBreakdown(format!(
                "non-finite curvature at CG iteration {it}"
            )));
        }
        if pap <= 0.0 {
            return Err(Error::NumericalBreakdown(format!(
                "operator is not positive definite (pᵀAp = {pap:e} at CG iteration {it}); add damping"
            )));
        }
        let alpha = rr / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rr_new = dot(&r, &r);
        if !rr_new.is_finite() {
            return Err(Error::NumericalBreakdown(format!(
                "non-finite residual at CG iteration {it}"
            )));
        }
        let rel = rr_new.sqrt() / b_norm;
        if rel < best_res {
            best_res = rel;
            best_x.copy_from_slice(&x);
        }
        if rel <= opts.tol {
            return Ok(CgOutcome {
                x,
                iterations: it + 1,
                rel_residual: rel,
                converged: true,
            });
        }
        let beta = rr_new / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_new;
    }

    Ok(CgOutcome {
        x: best_x,
        iterations: max_iter,
        rel_residual: best_res,
        converged: false,
    })
}

/// Solve `A x = b` for symmetric positive definite `A` via Cholesky.
pub fn cholesky_solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::DimensionMismatch {
            what: "cholesky: square matrix",
            expected: n,
            got: a.cols(),
        });
    }
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            what: "cholesky: right-hand side",
            expected: n,
            got: b.len(),
        });
    }

    // lower factor, row-major
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }

    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    Ok(x)
}

/// Central-difference gradient with step `h`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NumericalBreakdown(format!(
                "non-finite function value while differencing coordinate {i}"
            )));
        }
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{rel_err, RngStream};

    fn random_spd(n: usize, rng: &mut RngStream) -> Matrix {
        let m = Matrix::from_vec(n, n, (0..n * n).map(|_| rng.normal()).collect()).unwrap();
        let mut a = m.transpose().matmul(&m).unwrap();
        a.add_diagonal(1.0);
        a
    }

    #[test]
    fn cg_identity() {
        let a = Matrix::identity(2);
        let out = cg_solve(|v| a.matvec(v), &[3.0, -1.0], CgOptions::default()).unwrap();
        assert!(out.converged);
        assert!(rel_err(&out.x, &[3.0, -1.0]) < 1e-14);
    }

    #[test]
    fn cg_scalar_matrix() {
        let out = cg_solve(
            |v| v.iter().map(|x| 2.0 * x).collect(),
            &[4.0, 6.0],
            CgOptions::default(),
        )
        .unwrap();
        assert!(rel_err(&out.x, &[2.0, 3.0]) < 1e-14);
    }

    #[test]
    fn cg_zero_rhs_returns_zero_immediately() {
        let mut calls = 0;
        let out = cg_solve(
            |v| {
                calls += 1;
                v.to_vec()
            },
            &[0.0; 4],
            CgOptions::default(),
        )
        .unwrap();
        assert_eq!(out.x, vec![0.0; 4]);
        assert_eq!(calls, 0);
    }

    #[test]
    fn cg_non_finite_rhs_is_breakdown() {
        let err = cg_solve(|v| v.to_vec(), &[1.0, f64::NAN], CgOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NumericalBreakdown(_)));
    }

    #[test]
    fn cg_indefinite_operator_is_reported() {
        let a = Matrix::from_diag(&[1.0, -1.0]);
        let err = cg_solve(|v| a.matvec(v), &[0.0, 1.0], CgOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NumericalBreakdown(_)));
    }

    #[test]
    fn cg_iteration_cap_returns_best_iterate() {
        let mut rng = RngStream::new(1);
        let a = random_spd(30, &mut rng);
        let b: Vec<f64> = (0..30).map(|_| rng.normal()).collect();
        let out = cg_solve(
            |v| a.matvec(v),
            &b,
            CgOptions {
                tol: 1e-14,
                max_iter: Some(3),
            },
        )
        .unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 3);
        let resid: Vec<f64> = a.matvec(&out.x).iter().zip(&b).map(|(x, y)| x - y).collect();
        assert!((norm(&resid) / norm(&b) - out.rel_residual).abs() < 1e-8);
    }

    #[test]
    fn cg_matches_cholesky_on_5x5() {
        let mut rng = RngStream::new(2024);
        let a = random_spd(5, &mut rng);
        let b: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let x_cg = cg_solve(|v| a.matvec(v), &b, CgOptions::default()).unwrap().x;
        let x_ch = cholesky_solve(&a, &b).unwrap();
        assert!(rel_err(&x_cg, &x_ch) <= 1e-8);
    }

    #[test]
    fn cholesky_small_cases() {
        let x = cholesky_solve(&Matrix::identity(3), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(x, vec![1.0, 2.0, 3.0]);
        let x = cholesky_solve(&Matrix::from_diag(&[4.0, 9.0]), &[8.0, 27.0]).unwrap();
        assert!(rel_err(&x, &[2.0, 3.0]) < 1e-15);
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let x = cholesky_solve(&a, &[3.0, 3.0]).unwrap();
        assert!(rel_err(&x, &[1.0, 1.0]) < 1e-15);
    }

    #[test]
    fn cholesky_names_failing_pivot() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        match cholesky_solve(&a, &[1.0, 1.0]) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn fd_quadratic_and_constant() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() <= 1e-8);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn fd_propagates_non_finite() {
        let err = finite_diff_grad(|x| (x[0]).ln(), &[0.0], 1e-5).unwrap_err();
        assert!(matches!(err, Error::NumericalBreakdown(_)));
    }

    #[test]
    fn fd_rejects_nonpositive_step() {
        assert!(finite_diff_grad(|x| x[0], &[0.0], 0.0).is_err());
    }
}
