//! Primal-dual interior-point method for smooth convex programs
//! `min c^T x  s.t.  g_i(x) <= 0`.

use nalgebra::{DMatrix, DVector};

/// A convex program in inequality form with a linear objective.
///
/// The default linear-algebra methods go through the sparse per-constraint
/// gradients and Hessians and a dense Newton solve; implementors with
/// structure override them.
pub trait BarrierProgram {
    fn num_vars(&self) -> usize;
    fn num_constraints(&self) -> usize;
    /// Objective vector `c` (minimized).
    fn objective(&self) -> &[f64];
    /// Writes `g(x)` into `out`. Returns `false` if `x` is outside the domain.
    fn constraints(&self, x: &[f64], out: &mut [f64]) -> bool;
    /// Sparse gradient of constraint `i`.
    fn constraint_gradient(&self, x: &[f64], i: usize) -> Vec<(usize, f64)>;
    /// Sparse Hessian of constraint `i` as `(row, col, value)`, both triangles.
    fn constraint_hessian(&self, x: &[f64], i: usize) -> Vec<(usize, usize, f64)>;

    /// `out = sum_i v_i grad g_i(x)`.
    fn gradient_transpose(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &vi) in v.iter().enumerate() {
            if vi != 0.0 {
                for (j, g) in self.constraint_gradient(x, i) {
                    out[j] += vi * g;
                }
            }
        }
    }

    /// `out = sum_i |v_i| |grad g_i(x)|`, elementwise; scales the dual residual.
    fn gradient_transpose_abs(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &vi) in v.iter().enumerate() {
            if vi != 0.0 {
                for (j, g) in self.constraint_gradient(x, i) {
                    out[j] += (vi * g).abs();
                }
            }
        }
    }

    /// `out_i = grad g_i(x)^T dx`.
    fn gradient_apply(&self, x: &[f64], dx: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.constraint_gradient(x, i).iter().map(|&(j, g)| g * dx[j]).sum();
        }
    }

    /// Solves `(sum_i lambda_i hess g_i + sum_i d_i grad g_i grad g_i^T) dx = rhs`.
    fn solve_newton(&self, x: &[f64], lambda: &[f64], d: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
        let h = dense_newton_matrix(self, x, lambda, d);
        let chol = h.cholesky()?;
        Some(chol.solve(&DVector::from_column_slice(rhs)).as_slice().to_vec())
    }
}

/// Dense reduced Newton matrix built from the per-constraint derivatives.
pub fn dense_newton_matrix<P: BarrierProgram + ?Sized>(p: &P, x: &[f64], lambda: &[f64], d: &[f64]) -> DMatrix<f64> {
    let n = p.num_vars();
    let mut h = DMatrix::zeros(n, n);
    for i in 0..p.num_constraints() {
        if lambda[i] != 0.0 {
            for (r, c, v) in p.constraint_hessian(x, i) {
                h[(r, c)] += lambda[i] * v;
            }
        }
        let g = p.constraint_gradient(x, i);
        for &(r, gr) in &g {
            for &(c, gc) in &g {
                h[(r, c)] += d[i] * gr * gc;
            }
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpmSettings {
    /// Cap on the number of Newton steps.
    pub max_iterations: usize,
    /// Stop when the surrogate gap `-g^T lambda` is below `gap_tol * max(1, |c^T x|)`.
    pub gap_tol: f64,
    /// Required dual residual at exit, per coordinate relative to
    /// `1 + |c_k| + sum_i |lambda_i d g_i / d x_k|`.
    pub residual_tol: f64,
    /// Centering parameter: the step targets `t = mu m / gap`.
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Let the duals keep the full fraction-to-boundary step when the primal
    /// line search backtracks. Slower on typical programs, but it recovers
    /// runs where the duals otherwise fall behind and the residual stalls.
    pub separate_dual_step: bool,
}

impl Default for IpmSettings {
    fn default() -> Self {
        Self { max_iterations: 200, gap_tol: 1e-7, residual_tol: 1e-6, mu: 10.0, alpha: 0.01, beta: 0.5, separate_dual_step: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IpmStatus {
    Converged,
    IterationLimit,
    /// The Newton system or line search broke down; the last point is returned.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct IpmResult {
    pub x: Vec<f64>,
    pub lambda: Vec<f64>,
    pub objective: f64,
    /// Surrogate duality gap `-g(x)^T lambda`.
    pub gap: f64,
    /// Scaled dual residual (see [`IpmSettings::residual_tol`]).
    pub residual: f64,
    pub iterations: usize,
    pub status: IpmStatus,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Primal-dual interior-point method with a strictly feasible primal path.
///
/// Panics if `x0` is not strictly feasible; callers construct interior starts.
pub fn solve<P: BarrierProgram + ?Sized>(p: &P, x0: &[f64], settings: &IpmSettings) -> IpmResult {
    let n = p.num_vars();
    let m = p.num_constraints();
    let c = p.objective().to_vec();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; m];
    let ok = p.constraints(&x, &mut g);
    assert!(ok && g.iter().all(|&v| v < 0.0), "interior-point start is not strictly feasible");

    let dual = |x: &[f64], lambda: &[f64], out: &mut [f64]| {
        p.gradient_transpose(x, lambda, out);
        for (o, ci) in out.iter_mut().zip(&c) {
            *o += ci;
        }
    };
    // The absolute residual bounds the scaled one from above, so the term
    // magnitudes are only computed when it is needed.
    let scaled_residual = |x: &[f64], lambda: &[f64], rd: &[f64], scratch: &mut [f64]| {
        let abs = rd.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if abs <= settings.residual_tol {
            return abs;
        }
        p.gradient_transpose_abs(x, lambda, scratch);
        (0..rd.len()).map(|k| rd[k].abs() / (1.0 + c[k].abs() + scratch[k])).fold(0.0, f64::max)
    };
    // Barrier change from (x, g) to (x + s dx, g_new), free of cancellation.
    let barrier_change = |s: f64, dx: &[f64], g: &[f64], g_new: &[f64], t: f64| {
        t * s * dot(&c, dx) - g.iter().zip(g_new).map(|(a, b)| (b / a).ln()).sum::<f64>()
    };

    let scale = dot(&c, &x).abs().max(1.0);
    let mut lambda: Vec<f64> = g.iter().map(|gi| scale / (m as f64 * -gi)).collect();
    let mut rd = vec![0.0; n];
    dual(&x, &lambda, &mut rd);
    let mut iterations = 0;
    let mut status = IpmStatus::IterationLimit;
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; m];
    let mut lambda_new = vec![0.0; m];
    let mut rd_new = vec![0.0; n];
    let mut gdx = vec![0.0; m];
    let mut scratch = vec![0.0; n];

    loop {
        let eta = -dot(&g, &lambda);
        if eta <= settings.gap_tol * dot(&c, &x).abs().max(1.0) && scaled_residual(&x, &lambda, &rd, &mut scratch) <= settings.residual_tol {
            status = IpmStatus::Converged;
            break;
        }
        if iterations >= settings.max_iterations {
            break;
        }
        // Recenter when some complementarity product lags far behind the average.
        let min_comp = g.iter().zip(&lambda).map(|(gi, li)| -gi * li).fold(f64::INFINITY, f64::min);
        let sigma_inv = if min_comp < 0.01 * eta / m as f64 { 1.0 } else { settings.mu };
        let t = sigma_inv * m as f64 / eta;
        let d: Vec<f64> = g.iter().zip(&lambda).map(|(gi, li)| li / -gi).collect();
        let w: Vec<f64> = g.iter().map(|gi| 1.0 / (-t * gi)).collect();
        p.gradient_transpose(&x, &w, &mut scratch);
        let rhs: Vec<f64> = scratch.iter().zip(&c).map(|(v, ci)| -(v + ci)).collect();
        let Some(dx) = p.solve_newton(&x, &lambda, &d, &rhs) else {
            status = IpmStatus::Stalled;
            break;
        };
        if dx.iter().any(|v| !v.is_finite()) {
            status = IpmStatus::Stalled;
            break;
        }
        iterations += 1;
        p.gradient_apply(&x, &dx, &mut gdx);
        let dl: Vec<f64> = (0..m).map(|i| d[i] * gdx[i] - lambda[i] + w[i]).collect();
        let mut s_dual = (0..m).filter(|&i| dl[i] < 0.0).map(|i| -lambda[i] / dl[i]).fold(1.0f64, f64::min);
        if s_dual < 1.0 {
            s_dual *= 0.99;
        }
        let mut s = s_dual;
        // Line search on the primal barrier, for which dx is a descent direction.
        let slope = t * dot(&c, &dx) + (0..m).map(|i| gdx[i] / -g[i]).sum::<f64>();
        let mut accepted = false;
        while s > 1e-14 {
            for j in 0..n {
                x_new[j] = x[j] + s * dx[j];
            }
            // Fraction to the boundary: no slack shrinks by more than 100x per step.
            if p.constraints(&x_new, &mut g_new)
                && g_new.iter().zip(&g).all(|(&v, &v0)| v <= 0.01 * v0)
                && barrier_change(s, &dx, &g, &g_new, t) <= settings.alpha * s * slope.min(0.0)
            {
                accepted = true;
                break;
            }
            s *= settings.beta;
        }
        if accepted {
            for i in 0..m {
                lambda_new[i] = lambda[i] + if settings.separate_dual_step { s_dual } else { s } * dl[i];
            }
            dual(&x_new, &lambda_new, &mut rd_new);
        }
        if !accepted {
            status = IpmStatus::Stalled;
            break;
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        std::mem::swap(&mut lambda, &mut lambda_new);
        std::mem::swap(&mut rd, &mut rd_new);
    }
    let residual = scaled_residual(&x, &lambda, &rd, &mut scratch);
    IpmResult { objective: dot(&c, &x), gap: -dot(&g, &lambda), x, lambda, residual, iterations, status }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// min -x - y  s.t.  x^2 + y^2 <= 1.
    struct Disk;

    impl BarrierProgram for Disk {
        fn num_vars(&self) -> usize {
            2
        }
        fn num_constraints(&self) -> usize {
            1
        }
        fn objective(&self) -> &[f64] {
            &[-1.0, -1.0]
        }
        fn constraints(&self, x: &[f64], out: &mut [f64]) -> bool {
            out[0] = x[0] * x[0] + x[1] * x[1] - 1.0;
            true
        }
        fn constraint_gradient(&self, x: &[f64], _i: usize) -> Vec<(usize, f64)> {
            vec![(0, 2.0 * x[0]), (1, 2.0 * x[1])]
        }
        fn constraint_hessian(&self, _x: &[f64], _i: usize) -> Vec<(usize, usize, f64)> {
            vec![(0, 0, 2.0), (1, 1, 2.0)]
        }
    }

    /// min -sum log-ish: max t s.t. t <= log(1 + x), x <= 3, t >= -5.
    struct LogBox;

    impl BarrierProgram for LogBox {
        fn num_vars(&self) -> usize {
            2
        }
        fn num_constraints(&self) -> usize {
            3
        }
        fn objective(&self) -> &[f64] {
            &[0.0, -1.0]
        }
        fn constraints(&self, x: &[f64], out: &mut [f64]) -> bool {
            if x[0] <= -1.0 {
                return false;
            }
            out[0] = x[1] - (1.0 + x[0]).ln();
            out[1] = x[0] - 3.0;
            out[2] = -5.0 - x[1];
            true
        }
        fn constraint_gradient(&self, x: &[f64], i: usize) -> Vec<(usize, f64)> {
            match i {
                0 => vec![(0, -1.0 / (1.0 + x[0])), (1, 1.0)],
                1 => vec![(0, 1.0)],
                _ => vec![(1, -1.0)],
            }
        }
        fn constraint_hessian(&self, x: &[f64], i: usize) -> Vec<(usize, usize, f64)> {
            if i == 0 {
                vec![(0, 0, 1.0 / ((1.0 + x[0]) * (1.0 + x[0])))]
            } else {
                Vec::new()
            }
        }
    }

    #[test]
    fn disk_optimum() {
        let r = solve(&Disk, &[0.0, 0.0], &IpmSettings::default());
        assert_eq!(r.status, IpmStatus::Converged);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((r.x[0] - h).abs() < 1e-6 && (r.x[1] - h).abs() < 1e-6, "{:?}", r.x);
        assert!((r.objective + 2f64.sqrt()).abs() < 2e-7);
    }

    #[test]
    fn log_constraint_optimum() {
        for separate_dual_step in [false, true] {
            let settings = IpmSettings { separate_dual_step, ..IpmSettings::default() };
            let r = solve(&LogBox, &[0.0, -1.0], &settings);
            assert_eq!(r.status, IpmStatus::Converged);
            assert!((r.x[1] - 4f64.ln()).abs() < 1e-7, "{:?}", r.x);
            assert!((r.x[0] - 3.0).abs() < 1e-6);
            // KKT: lambda_0 = 1, lambda_1 = 1/4, lambda_2 = 0.
            assert!((r.lambda[0] - 1.0).abs() < 1e-6);
            assert!((r.lambda[1] - 0.25).abs() < 1e-6);
            assert!(r.lambda[2].abs() < 1e-6);
        }
    }

    #[test]
    fn iteration_limit_reports_best_point() {
        let settings = IpmSettings { max_iterations: 2, ..IpmSettings::default() };
        let r = solve(&Disk, &[0.0, 0.0], &settings);
        assert_eq!(r.status, IpmStatus::IterationLimit);
        assert!(r.x[0] * r.x[0] + r.x[1] * r.x[1] < 1.0);
    }

    #[test]
    #[should_panic(expected = "strictly feasible")]
    fn rejects_infeasible_start() {
        solve(&Disk, &[1.0, 1.0], &IpmSettings::default());
    }
}
