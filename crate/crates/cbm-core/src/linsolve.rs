//! GMRES over the shifted block-sparse operator `J = I - dt A` and the
//! Newton outer loop for the backward Euler nonlinear system.

use crate::error::Error;
use crate::jacobian::{norm_2, BlockJacobian};

/// A linear operator given by its action on a vector.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64], out: &mut [f64]);
}

/// `J = I - dt A` applied through block-sparse products; symmetric since `A`
/// is symmetric.
pub struct ShiftedJacobian<'a> {
    pub dt: f64,
    pub jac: &'a BlockJacobian,
}

impl LinearOperator for ShiftedJacobian<'_> {
    fn dim(&self) -> usize {
        self.jac.order()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        self.jac.apply(v, out);
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o = x - self.dt * *o;
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmresResult {
    pub solution: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// GMRES without restarts, up to `max_iter` Krylov vectors, stopping when
/// `|rhs - J x|_2 <= max(tol_rel |rhs|_2, tol_abs)`. Orthogonalization is
/// modified Gram-Schmidt with one extra pass on severe cancellation. On
/// Arnoldi breakdown the current iterate is returned with `converged` set by
/// the residual test.
pub fn gmres_solve(
    op: &dyn LinearOperator,
    rhs: &[f64],
    tol_rel: f64,
    tol_abs: f64,
    max_iter: usize,
) -> GmresResult {
    let n = op.dim();
    debug_assert_eq!(rhs.len(), n);
    let beta = norm_2(rhs);
    let threshold = (tol_rel * beta).max(tol_abs);
    if beta <= threshold {
        return GmresResult {
            solution: vec![0.0; n],
            residual_norm: beta,
            iterations: 0,
            converged: true,
        };
    }

    let m = max_iter.min(n);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    basis.push(rhs.iter().map(|x| x / beta).collect());
    // Hessenberg columns after Givens rotations (upper triangular part).
    let mut h_cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut cs: Vec<f64> = Vec::with_capacity(m);
    let mut sn: Vec<f64> = Vec::with_capacity(m);
    let mut g = vec![0.0; m + 1];
    g[0] = beta;

    let mut iterations = 0;
    let mut residual = beta;
    let mut converged = false;

    for j in 0..m {
        let mut w = vec![0.0; n];
        op.apply(&basis[j], &mut w);
        let w_norm_before = norm_2(&w);
        let mut h = vec![0.0; j + 2];
        for (i, v) in basis.iter().enumerate().take(j + 1) {
            let dot: f64 = w.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            h[i] += dot;
            for (wk, vk) in w.iter_mut().zip(v.iter()) {
                *wk -= dot * vk;
            }
        }
        if norm_2(&w) <= 1e-8 * w_norm_before {
            // Severe cancellation: one reorthogonalization pass.
            for (i, v) in basis.iter().enumerate().take(j + 1) {
                let dot: f64 = w.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                h[i] += dot;
                for (wk, vk) in w.iter_mut().zip(v.iter()) {
                    *wk -= dot * vk;
                }
            }
        }
        let h_next = norm_2(&w);
        h[j + 1] = h_next;

        // Apply previous rotations to the new column.
        for i in 0..j {
            let tmp = cs[i] * h[i] + sn[i] * h[i + 1];
            h[i + 1] = -sn[i] * h[i] + cs[i] * h[i + 1];
            h[i] = tmp;
        }
        // New rotation eliminating h[j+1].
        let denom = (h[j] * h[j] + h[j + 1] * h[j + 1]).sqrt();
        let (c, s) = if denom == 0.0 { (1.0, 0.0) } else { (h[j] / denom, h[j + 1] / denom) };
        cs.push(c);
        sn.push(s);
        h[j] = c * h[j] + s * h[j + 1];
        h[j + 1] = 0.0;
        g[j + 1] = -s * g[j];
        g[j] *= c;
        h_cols.push(h);
        iterations = j + 1;
        residual = g[j + 1].abs();

        if residual <= threshold {
            converged = true;
            break;
        }
        if h_next == 0.0 {
            // Breakdown without meeting the tolerance.
            break;
        }
        basis.push(w.iter().map(|x| x / h_next).collect());
    }

    // Back substitution for the least-squares coefficients.
    let k = iterations;
    let mut y = vec![0.0; k];
    for i in (0..k).rev() {
        let mut acc = g[i];
        for (jj, yj) in y.iter().enumerate().skip(i + 1) {
            acc -= h_cols[jj][i] * yj;
        }
        y[i] = acc / h_cols[i][i];
    }
    let mut x = vec![0.0; n];
    for (yi, v) in y.iter().zip(basis.iter()) {
        for (xk, vk) in x.iter_mut().zip(v.iter()) {
            *xk += yi * vk;
        }
    }
    GmresResult { solution: x, residual_norm: residual, iterations, converged }
}

/// Counts and convergence record for one backward Euler solve.
#[derive(Debug, Clone, Default)]
pub struct IterationStats {
    pub newton_iters: usize,
    pub gmres_iters_per_newton: Vec<usize>,
    /// Linear residual `|F + J dx|_2` of the last inner solve.
    pub final_residual_norm: f64,
    pub converged: bool,
}

/// Tolerances and iteration caps for the Newton–GMRES solve.
#[derive(Debug, Clone, Copy)]
pub struct NewtonConfig {
    pub n_newton: usize,
    pub eps_newton: f64,
    pub n_gmres: usize,
    pub eps_gmres_rel: f64,
    pub eps_gmres_abs: f64,
}

/// Solves the backward Euler system `x = x_prev + dt F(x)` by Newton
/// iterations with GMRES on `(I - dt A) dx = -(x - x_prev - dt F(x))`.
///
/// `f0`/`a0` are the force and Jacobian at the initial guess; `refresh`
/// re-evaluates both at a new iterate. Stops when
/// `|dx|_2 < eps_newton (|x|_2 + 1)` or after `n_newton` iterations; on
/// non-convergence the last iterate is returned with the flag cleared.
pub fn newton_solve(
    x_prev: &[f64],
    dt: f64,
    x_init: Vec<f64>,
    f0: Vec<f64>,
    a0: BlockJacobian,
    mut refresh: impl FnMut(&[f64]) -> Result<(Vec<f64>, BlockJacobian), Error>,
    cfg: &NewtonConfig,
) -> Result<(Vec<f64>, IterationStats), Error> {
    let n = x_prev.len();
    let mut x_next = x_init;
    let mut f_hat = f0;
    let mut a_hat = a0;
    let mut stats = IterationStats::default();

    for iter in 0..cfg.n_newton {
        // rhs = -(x_next - x_prev - dt F(x_next))
        let rhs: Vec<f64> = (0..n)
            .map(|k| -(x_next[k] - x_prev[k] - dt * f_hat[k]))
            .collect();
        let op = ShiftedJacobian { dt, jac: &a_hat };
        let lin = gmres_solve(&op, &rhs, cfg.eps_gmres_rel, cfg.eps_gmres_abs, cfg.n_gmres);
        for (xk, dxk) in x_next.iter_mut().zip(lin.solution.iter()) {
            *xk += dxk;
        }
        stats.newton_iters = iter + 1;
        stats.gmres_iters_per_newton.push(lin.iterations);
        stats.final_residual_norm = lin.residual_norm;
        if norm_2(&lin.solution) < cfg.eps_newton * (norm_2(&x_next) + 1.0) {
            stats.converged = true;
            break;
        }
        if iter + 1 < cfg.n_newton {
            let (f, a) = refresh(&x_next)?;
            f_hat = f;
            a_hat = a;
        }
    }
    Ok((x_next, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_neighbor_list, total_force, CellPopulation, ForceLaw};
    use nalgebra::{DMatrix, DVector};

    struct DenseOp(DMatrix<f64>);

    impl LinearOperator for DenseOp {
        fn dim(&self) -> usize {
            self.0.nrows()
        }
        fn apply(&self, v: &[f64], out: &mut [f64]) {
            let r = &self.0 * DVector::from_column_slice(v);
            out.copy_from_slice(r.as_slice());
        }
    }

    fn two_cell_state(r: f64) -> (CellPopulation, ForceLaw, BlockJacobian, Vec<f64>) {
        let law = ForceLaw::default();
        let pop =
            CellPopulation::new(3, vec![-r / 2.0, 0.0, 0.0, r / 2.0, 0.0, 0.0], vec![]).unwrap();
        let nl = build_neighbor_list(&pop, law.capture_radius());
        let jac = crate::jacobian::assemble(&pop, &law, &nl).unwrap();
        let f = total_force(&pop, &law, &nl).unwrap();
        (pop, law, jac, f)
    }

    #[test]
    fn gmres_identity_converges_in_one_iteration() {
        let (_, _, jac, _) = two_cell_state(0.3);
        let op = ShiftedJacobian { dt: 0.0, jac: &jac };
        let rhs = vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0];
        let res = gmres_solve(&op, &rhs, 1e-12, 1e-14, 10);
        assert!(res.converged);
        assert_eq!(res.iterations, 1);
        for (x, b) in res.solution.iter().zip(rhs.iter()) {
            assert!((x - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gmres_zero_rhs() {
        let (_, _, jac, _) = two_cell_state(0.3);
        let op = ShiftedJacobian { dt: 0.01, jac: &jac };
        let res = gmres_solve(&op, &[0.0; 6], 1e-10, 1e-12, 10);
        assert!(res.converged);
        assert_eq!(res.iterations, 0);
        assert_eq!(res.solution, vec![0.0; 6]);
    }

    #[test]
    fn gmres_matches_dense_solve() {
        let (_, _, jac, _) = two_cell_state(0.3);
        let dt = 0.007;
        let n = jac.order();
        let dense_a = jac.to_dense().unwrap();
        let mut dense_j = DMatrix::from_row_slice(n, n, &dense_a);
        dense_j = DMatrix::identity(n, n) - dt * dense_j;
        let rhs = vec![0.3, -0.1, 0.7, 0.2, -0.5, 0.11];
        let exact = dense_j
            .clone()
            .lu()
            .solve(&DVector::from_column_slice(&rhs))
            .unwrap();
        let op = ShiftedJacobian { dt, jac: &jac };
        let res = gmres_solve(&op, &rhs, 1e-12, 1e-14, n);
        assert!(res.converged);
        for k in 0..n {
            assert!((res.solution[k] - exact[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn gmres_residual_monotone() {
        // Track the residual by re-running with growing iteration caps.
        let m = DMatrix::from_fn(12, 12, |i, j| {
            if i == j {
                2.0 + i as f64 * 0.3
            } else {
                0.5 / (1.0 + (i as f64 - j as f64).abs())
            }
        });
        let op = DenseOp(m);
        let rhs: Vec<f64> = (0..12).map(|k| ((k * 7) % 5) as f64 - 2.0).collect();
        let mut last = f64::INFINITY;
        for cap in 1..=12 {
            let res = gmres_solve(&op, &rhs, 0.0, 1e-300, cap);
            assert!(res.residual_norm <= last + 1e-12);
            last = res.residual_norm;
        }
        assert!(last < 1e-10);
    }

    #[test]
    fn operator_is_symmetric() {
        let (_, _, jac, _) = two_cell_state(0.74);
        let op = ShiftedJacobian { dt: 0.05, jac: &jac };
        let v = [0.2, -0.3, 0.5, 0.9, -0.7, 0.1];
        let w = [-0.4, 0.8, 0.3, -0.2, 0.6, 0.5];
        let mut jv = [0.0; 6];
        let mut jw = [0.0; 6];
        op.apply(&v, &mut jv);
        op.apply(&w, &mut jw);
        let a: f64 = v.iter().zip(jw.iter()).map(|(x, y)| x * y).sum();
        let b: f64 = w.iter().zip(jv.iter()).map(|(x, y)| x * y).sum();
        assert!((a - b).abs() < 1e-10);
    }

    fn newton_cfg(eps: f64) -> NewtonConfig {
        NewtonConfig {
            n_newton: 5,
            eps_newton: 1e-3 * eps,
            n_gmres: 10,
            eps_gmres_rel: 1e-3 * eps,
            eps_gmres_abs: 1e-3 * eps,
        }
    }

    #[test]
    fn newton_fixed_point_at_equilibrium() {
        let (pop, law, jac, f) = two_cell_state(1.0);
        assert_eq!(f, vec![0.0; 6]);
        let x = pop.free_coords().to_vec();
        let nl = build_neighbor_list(&pop, law.capture_radius());
        let (x_next, stats) = newton_solve(
            &x,
            0.5,
            x.clone(),
            f,
            jac,
            |y| {
                let mut p = pop.clone();
                p.set_free_coords(y);
                let f = total_force(&p, &law, &nl)?;
                let a = crate::jacobian::assemble(&p, &law, &nl)?;
                Ok((f, a))
            },
            &newton_cfg(0.005),
        )
        .unwrap();
        assert!(stats.converged);
        assert_eq!(stats.newton_iters, 1);
        assert_eq!(x_next, x);
    }

    #[test]
    fn newton_solves_implicit_equation() {
        let (pop, law, jac, f) = two_cell_state(0.3);
        let x = pop.free_coords().to_vec();
        let dt = 0.1;
        let eps = 0.005;
        let nl = build_neighbor_list(&pop, law.capture_radius());
        let evaluate = |y: &[f64]| {
            let mut p = pop.clone();
            p.set_free_coords(y);
            let f = total_force(&p, &law, &nl)?;
            let a = crate::jacobian::assemble(&p, &law, &nl)?;
            Ok((f, a))
        };
        let (x_next, stats) =
            newton_solve(&x, dt, x.clone(), f, jac, evaluate, &newton_cfg(eps)).unwrap();
        assert!(stats.converged);
        // Residual of x_next - x - dt F(x_next).
        let mut p = pop.clone();
        p.set_free_coords(&x_next);
        let f_next = total_force(&p, &law, &nl).unwrap();
        let res: Vec<f64> =
            (0..6).map(|k| x_next[k] - x[k] - dt * f_next[k]).collect();
        assert!(norm_2(&res) < 10.0 * 1e-3 * eps, "residual {}", norm_2(&res));
    }

    #[test]
    fn newton_updates_shrink_superlinearly() {
        // Large step from a strongly forced state gives several iterations;
        // successive update norms must contract faster than geometrically.
        let (pop, law, jac, f) = two_cell_state(0.3);
        let x = pop.free_coords().to_vec();
        let nl = build_neighbor_list(&pop, law.capture_radius());
        let mut updates = Vec::new();
        let cfg = NewtonConfig {
            n_newton: 8,
            eps_newton: 1e-12,
            n_gmres: 24,
            eps_gmres_rel: 1e-14,
            eps_gmres_abs: 1e-14,
        };
        let mut x_next = x.clone();
        let mut f_hat = f;
        let mut a_hat = jac;
        for _ in 0..cfg.n_newton {
            let rhs: Vec<f64> =
                (0..6).map(|k| -(x_next[k] - x[k] - 0.3 * f_hat[k])).collect();
            let op = ShiftedJacobian { dt: 0.3, jac: &a_hat };
            let lin = gmres_solve(&op, &rhs, cfg.eps_gmres_rel, cfg.eps_gmres_abs, cfg.n_gmres);
            for (xk, dxk) in x_next.iter_mut().zip(lin.solution.iter()) {
                *xk += dxk;
            }
            let nrm = norm_2(&lin.solution);
            updates.push(nrm);
            if nrm < 1e-13 {
                break;
            }
            let mut p = pop.clone();
            p.set_free_coords(&x_next);
            f_hat = total_force(&p, &law, &nl).unwrap();
            a_hat = crate::jacobian::assemble(&p, &law, &nl).unwrap();
        }
        assert!(updates.len() >= 4, "expected several iterations, got {updates:?}");
        let ratios: Vec<f64> = updates
            .windows(2)
            .filter(|w| w[0] > 1e-13)
            .map(|w| w[1] / w[0])
            .collect();
        for pair in ratios.windows(2) {
            assert!(pair[1] < pair[0], "contraction should accelerate: {updates:?}");
        }
        assert!(*updates.last().unwrap() < 1e-10, "final update too large: {updates:?}");
    }
}
