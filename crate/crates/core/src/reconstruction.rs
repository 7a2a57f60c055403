//! Regularized reconstruction from bucket measurements.
//!
//! Two estimators are provided:
//!
//! * ridge: `min 1/2 ||y - Phi x||^2 + lambda/2 ||L x||^2`, solved through the
//!   normal equations `(Phi^T Phi + lambda L^T L) x = Phi^T y` with conjugate
//!   gradients. The system matrix is only ever applied as chained products.
//! * tv: `min 1/2 ||y - Phi x||^2 + lambda ||D x||_1` (anisotropic), solved by
//!   proximal gradient with step `1/L_hat`, where `L_hat` bounds the largest
//!   eigenvalue of `Phi^T Phi`. The prox of the L1-of-differences term has no
//!   closed form and is approximated by projected gradient on its dual,
//!   warm-started across outer iterations. A candidate that does not lower the
//!   objective is rejected, so the recorded objective never increases.

use nalgebra::DVector;

use crate::error::{invalid, Result, SpxError};
use crate::patterns::SensingOperator;
use crate::rng::SpxRng;
use crate::sensing::Scene;

pub const POWER_ITERATIONS: usize = 50;
pub const POWER_TOL: f64 = 1e-6;
pub const LIPSCHITZ_INFLATION: f64 = 1.01;
pub const TV_INNER_ITERATIONS: usize = 20;
/// Consecutive rejected prox-gradient candidates before TV declares stagnation.
pub const TV_REJECT_PATIENCE: usize = 3;
/// `||D||^2 <= 8` for 2-D forward differences, so `1/8` is a safe dual step.
const TV_DUAL_STEP: f64 = 0.125;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconMethod {
    Ridge,
    Tv,
}

/// Choice of `L` in the ridge penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Regularizer {
    Identity,
    /// 5-point stencil with replicate boundary.
    #[default]
    Laplacian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StepRule {
    #[default]
    PowerIteration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconConfig {
    pub method: ReconMethod,
    pub lambda: f64,
    pub regularizer: Regularizer,
    pub max_iters: usize,
    pub tol: f64,
    pub step_rule: StepRule,
}

impl ReconConfig {
    pub fn ridge(lambda: f64) -> Self {
        Self {
            method: ReconMethod::Ridge,
            lambda,
            regularizer: Regularizer::Laplacian,
            max_iters: 2000,
            tol: 1e-8,
            step_rule: StepRule::PowerIteration,
        }
    }

    pub fn tv(lambda: f64) -> Self {
        Self {
            method: ReconMethod::Tv,
            lambda,
            regularizer: Regularizer::Laplacian,
            max_iters: 2000,
            tol: 1e-6,
            step_rule: StepRule::PowerIteration,
        }
    }

    pub fn with_regularizer(mut self, r: Regularizer) -> Self {
        self.regularizer = r;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iters(mut self, n: usize) -> Self {
        self.max_iters = n;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.tol > 0.0) {
            return Err(invalid("tol must be > 0"));
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconResult {
    pub x_hat: Scene,
    pub iterations: usize,
    pub final_objective: f64,
    /// Objective after each iteration.
    pub objective_trace: Vec<f64>,
    /// Ridge: relative normal-equation residual. TV: `||Phi x - y||`.
    pub residual_trace: Vec<f64>,
    pub converged: bool,
}

/// Forward differences stacked as `[vertical; horizontal]` (`2N x N`), stored
/// in compressed-row form. Differences that would leave the grid are zero rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientOperator {
    height: usize,
    width: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

pub fn build_gradient_operator(h: usize, w: usize) -> Result<GradientOperator> {
    if h == 0 || w == 0 {
        return Err(invalid(format!("gradient operator for a {h}x{w} grid")));
    }
    let n = h * w;
    let mut row_ptr = Vec::with_capacity(2 * n + 1);
    let mut cols = Vec::with_capacity(4 * n);
    let mut vals = Vec::with_capacity(4 * n);
    row_ptr.push(0);
    for i in 0..h {
        for j in 0..w {
            if i + 1 < h {
                cols.extend([i * w + j, (i + 1) * w + j]);
                vals.extend([-1.0, 1.0]);
            }
            row_ptr.push(cols.len());
        }
    }
    for i in 0..h {
        for j in 0..w {
            if j + 1 < w {
                cols.extend([i * w + j, i * w + j + 1]);
                vals.extend([-1.0, 1.0]);
            }
            row_ptr.push(cols.len());
        }
    }
    Ok(GradientOperator {
        height: h,
        width: w,
        row_ptr,
        cols,
        vals,
    })
}

impl GradientOperator {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn nrows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn ncols(&self) -> usize {
        self.height * self.width
    }

    /// `(column, value)` pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ncols());
        DVector::from_fn(self.nrows(), |r, _| self.row(r).map(|(c, v)| v * x[c]).sum())
    }

    pub fn apply_transpose(&self, p: &DVector<f64>) -> DVector<f64> {
        assert_eq!(p.len(), self.nrows());
        let mut out = DVector::zeros(self.ncols());
        for r in 0..self.nrows() {
            let pr = p[r];
            if pr != 0.0 {
                for (c, v) in self.row(r) {
                    out[c] += v * pr;
                }
            }
        }
        out
    }
}

/// `L x` for the 5-point Laplacian with replicate boundary: missing neighbours
/// contribute nothing, so constants are in the null space. `L` is symmetric.
pub fn laplacian_apply(h: usize, w: usize, x: &DVector<f64>) -> DVector<f64> {
    assert_eq!(x.len(), h * w);
    DVector::from_fn(h * w, |p, _| {
        let (i, j) = (p / w, p % w);
        let c = x[p];
        let mut s = 0.0;
        if i > 0 {
            s += x[p - w] - c;
        }
        if i + 1 < h {
            s += x[p + w] - c;
        }
        if j > 0 {
            s += x[p - 1] - c;
        }
        if j + 1 < w {
            s += x[p + 1] - c;
        }
        s
    })
}

fn check_dims(op: &SensingOperator, x: Option<&DVector<f64>>, y: &DVector<f64>) -> Result<()> {
    if y.len() != op.m() {
        return Err(invalid(format!(
            "measurement length {} vs operator rows {}",
            y.len(),
            op.m()
        )));
    }
    if let Some(x) = x {
        if x.len() != op.n_pixels() {
            return Err(invalid(format!(
                "image length {} vs operator columns {}",
                x.len(),
                op.n_pixels()
            )));
        }
    }
    Ok(())
}

/// `Phi^T (Phi x - y)`, the gradient of `1/2 ||y - Phi x||^2`.
pub fn data_gradient(op: &SensingOperator, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    check_dims(op, Some(x), y)?;
    Ok(op.apply_transpose(&(op.apply(x) - y)))
}

pub fn reconstruct(op: &SensingOperator, y: &DVector<f64>, cfg: &ReconConfig) -> Result<ReconResult> {
    match cfg.method {
        ReconMethod::Ridge => reconstruct_ridge(op, y, cfg),
        ReconMethod::Tv => reconstruct_tv(op, y, cfg),
    }
}

struct RidgeSystem<'a> {
    op: &'a SensingOperator,
    lambda: f64,
    regularizer: Regularizer,
}

impl RidgeSystem<'_> {
    fn penalty_map(&self, x: &DVector<f64>) -> DVector<f64> {
        match self.regularizer {
            Regularizer::Identity => x.clone(),
            Regularizer::Laplacian => laplacian_apply(self.op.height(), self.op.width(), x),
        }
    }

    /// `(Phi^T Phi + lambda L^T L) x`.
    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = self.op.apply_transpose(&self.op.apply(x));
        if self.lambda > 0.0 {
            let lx = self.penalty_map(x);
            // L is symmetric for both choices
            out.axpy(self.lambda, &self.penalty_map(&lx), 1.0);
        }
        out
    }

    fn objective(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let data = 0.5 * (self.op.apply(x) - y).norm_squared();
        if self.lambda > 0.0 {
            data + 0.5 * self.lambda * self.penalty_map(x).norm_squared()
        } else {
            data
        }
    }
}

/// Ridge estimate by conjugate gradients from `x = 0`.
pub fn reconstruct_ridge(op: &SensingOperator, y: &DVector<f64>, cfg: &ReconConfig) -> Result<ReconResult> {
    cfg.validate()?;
    check_dims(op, None, y)?;
    if cfg.lambda == 0.0 && op.m() < op.n_pixels() {
        return Err(SpxError::SingularSystem(format!(
            "lambda = 0 with {} measurements of {} unknowns",
            op.m(),
            op.n_pixels()
        )));
    }
    let sys = RidgeSystem {
        op,
        lambda: cfg.lambda,
        regularizer: cfg.regularizer,
    };
    let n = op.n_pixels();
    let b = op.apply_transpose(y);
    let b_norm = b.norm();
    let mut x = DVector::zeros(n);
    let mut objective_trace = Vec::new();
    let mut residual_trace = Vec::new();
    if b_norm == 0.0 {
        return Ok(finish(op, x, 0, sys.objective(&DVector::zeros(n), y), objective_trace, residual_trace, true));
    }

    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.norm_squared();
    let mut best = (f64::INFINITY, x.clone());
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let ap = sys.apply(&p);
        let curvature = p.dot(&ap);
        if !(curvature > 0.0) {
            // direction of zero curvature: the system is singular along p
            break;
        }
        let alpha = rs / curvature;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rs_new = r.norm_squared();
        let mut rel = rs_new.sqrt() / b_norm;
        if rel <= cfg.tol {
            // confirm against the true residual before stopping
            r = &b - sys.apply(&x);
            let rs_true = r.norm_squared();
            rel = rs_true.sqrt() / b_norm;
            objective_trace.push(sys.objective(&x, y));
            residual_trace.push(rel);
            if rel < best.0 {
                best = (rel, x.clone());
            }
            if rel <= cfg.tol {
                converged = true;
                break;
            }
            p = r.clone();
            rs = rs_true;
            continue;
        }
        objective_trace.push(sys.objective(&x, y));
        residual_trace.push(rel);
        if rel < best.0 {
            best = (rel, x.clone());
        }
        p = &r + &p * (rs_new / rs);
        rs = rs_new;
    }
    let x = if converged { x } else { best.1 };
    let obj = sys.objective(&x, y);
    Ok(finish(op, x, iterations, obj, objective_trace, residual_trace, converged))
}

fn finish(
    op: &SensingOperator,
    x: DVector<f64>,
    iterations: usize,
    final_objective: f64,
    objective_trace: Vec<f64>,
    residual_trace: Vec<f64>,
    converged: bool,
) -> ReconResult {
    ReconResult {
        x_hat: Scene {
            height: op.height(),
            width: op.width(),
            values: x,
        },
        iterations,
        final_objective,
        objective_trace,
        residual_trace,
        converged,
    }
}

/// Largest eigenvalue of `Phi^T Phi` by power iteration (no inflation).
pub fn power_iteration(op: &SensingOperator, max_iters: usize, tol: f64) -> f64 {
    let mut rng = SpxRng::new(0x504F_5745_52);
    let mut v = DVector::from_fn(op.n_pixels(), |_, _| rng.normal());
    v /= v.norm();
    let mut estimate = 0.0;
    for _ in 0..max_iters {
        let w = op.apply_transpose(&op.apply(&v));
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        let done = (next - estimate).abs() <= tol * next.abs();
        estimate = next;
        if done {
            break;
        }
    }
    estimate
}

/// Step-size bound used by TV: power-iteration estimate inflated by 1%.
pub fn lipschitz_bound(op: &SensingOperator) -> f64 {
    LIPSCHITZ_INFLATION * power_iteration(op, POWER_ITERATIONS, POWER_TOL)
}

fn tv_objective(op: &SensingOperator, d: &GradientOperator, x: &DVector<f64>, y: &DVector<f64>, lambda: f64) -> (f64, f64) {
    let res = (op.apply(x) - y).norm();
    let tv = if lambda > 0.0 { d.apply(x).lp_norm(1) } else { 0.0 };
    (0.5 * res * res + lambda * tv, res)
}

/// Approximate `argmin_z 1/2 ||z - v||^2 + tau ||D z||_1` via projected gradient
/// on the dual box `|p| <= tau`; `dual` carries the warm start.
fn tv_prox(d: &GradientOperator, v: &DVector<f64>, tau: f64, dual: &mut DVector<f64>) -> DVector<f64> {
    for _ in 0..TV_INNER_ITERATIONS {
        let z = v - d.apply_transpose(dual);
        let g = d.apply(&z);
        for (p, gi) in dual.iter_mut().zip(g.iter()) {
            *p = (*p + TV_DUAL_STEP * gi).clamp(-tau, tau);
        }
    }
    v - d.apply_transpose(dual)
}

/// Anisotropic TV estimate by monotone proximal gradient from `x = 0`.
pub fn reconstruct_tv(op: &SensingOperator, y: &DVector<f64>, cfg: &ReconConfig) -> Result<ReconResult> {
    cfg.validate()?;
    check_dims(op, None, y)?;
    let d = build_gradient_operator(op.height(), op.width())?;
    let lip = lipschitz_bound(op);
    let step = if lip > 0.0 { 1.0 / lip } else { 1.0 };
    let tau = cfg.lambda * step;

    let n = op.n_pixels();
    let mut x = DVector::zeros(n);
    let mut dual = DVector::zeros(d.nrows());
    let (mut f, mut res) = tv_objective(op, &d, &x, y, cfg.lambda);
    let mut objective_trace = Vec::new();
    let mut residual_trace = Vec::new();
    let mut converged = false;
    let mut rejections = 0;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let grad = op.apply_transpose(&(op.apply(&x) - y));
        let v = &x - grad * step;
        let z = if cfg.lambda > 0.0 { tv_prox(&d, &v, tau, &mut dual) } else { v };
        let (fz, rz) = tv_objective(op, &d, &z, y, cfg.lambda);
        if fz <= f {
            let change = (f - fz) / f.abs().max(f64::MIN_POSITIVE);
            x = z;
            f = fz;
            res = rz;
            rejections = 0;
            objective_trace.push(f);
            residual_trace.push(res);
            if change <= cfg.tol {
                converged = true;
                break;
            }
        } else {
            rejections += 1;
            objective_trace.push(f);
            residual_trace.push(res);
            if rejections >= TV_REJECT_PATIENCE {
                converged = true;
                break;
            }
        }
    }
    Ok(finish(op, x, iterations, f, objective_trace, residual_trace, converged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::{gen_hadamard, select, SelectionPolicy};
    use nalgebra::DMatrix;

    fn dense_op(rows: usize, cols: usize, data: &[f64]) -> SensingOperator {
        SensingOperator::from_dense(DMatrix::from_row_slice(rows, cols, data), 1, cols).unwrap()
    }

    fn gaussian_op(m: usize, n: usize, seed: u64) -> SensingOperator {
        let mut rng = SpxRng::new(seed);
        SensingOperator::from_dense(DMatrix::from_fn(m, n, |_, _| rng.normal()), 1, n).unwrap()
    }

    #[test]
    fn gradient_vanishes_at_solution() {
        let op = gaussian_op(4, 4, 1);
        let x = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        let y = op.apply(&x);
        assert!(data_gradient(&op, &x, &y).unwrap().amax() < 1e-14);
    }

    #[test]
    fn gradient_identity_example() {
        let op = dense_op(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let g = data_gradient(&op, &DVector::from_vec(vec![1.0, 0.0]), &DVector::zeros(2)).unwrap();
        assert_eq!(g.as_slice(), &[1.0, 0.0]);
        assert!(data_gradient(&op, &DVector::zeros(3), &DVector::zeros(2)).is_err());
    }

    #[test]
    fn ridge_identity_exact() {
        let op = SensingOperator::from_dense(DMatrix::identity(9, 9), 3, 3).unwrap();
        let y = DVector::from_fn(9, |i, _| i as f64 * 0.1);
        let r = reconstruct_ridge(&op, &y, &ReconConfig::ridge(0.0)).unwrap();
        assert!(r.converged);
        assert!((r.x_hat.values - &y).amax() < 1e-15);
    }

    #[test]
    fn ridge_hadamard_complete() {
        let op = select(&gen_hadamard(16, 4, 4).unwrap(), 16, SelectionPolicy::Prefix).unwrap();
        let mut rng = SpxRng::new(3);
        let x = DVector::from_fn(16, |_, _| rng.uniform());
        let y = op.apply(&x);
        let r = reconstruct_ridge(&op, &y, &ReconConfig::ridge(1e-12)).unwrap();
        assert!((r.x_hat.values - &x).norm() / x.norm() < 1e-8);
    }

    #[test]
    fn ridge_matches_dense_two_by_two() {
        let op = dense_op(2, 2, &[1.0, 0.0, 1.0, 1.0]);
        let y = DVector::from_vec(vec![1.0, 3.0]);
        let cfg = ReconConfig::ridge(0.1).with_regularizer(Regularizer::Identity);
        let r = reconstruct_ridge(&op, &y, &cfg).unwrap();
        // (A^T A + 0.1 I) = [[2.1, 1], [1, 1.1]], A^T y = [4, 3]; Cramer's rule
        let det = 2.1 * 1.1 - 1.0;
        let oracle = [(4.0 * 1.1 - 3.0) / det, (2.1 * 3.0 - 4.0) / det];
        assert!((r.x_hat.values[0] - oracle[0]).abs() < 1e-10);
        assert!((r.x_hat.values[1] - oracle[1]).abs() < 1e-10);
    }

    #[test]
    fn ridge_singular_and_limits() {
        let op = gaussian_op(3, 5, 2);
        let y = DVector::zeros(3);
        assert!(matches!(
            reconstruct_ridge(&op, &y, &ReconConfig::ridge(0.0)),
            Err(SpxError::SingularSystem(_))
        ));
        let op = gaussian_op(40, 40, 5);
        let y = DVector::from_element(40, 1.0);
        let r = reconstruct_ridge(&op, &y, &ReconConfig::ridge(0.0).with_max_iters(2)).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 2);
        assert!(reconstruct_ridge(&op, &y, &ReconConfig::ridge(-1.0)).is_err());
    }

    #[test]
    fn ridge_zero_data() {
        let op = gaussian_op(3, 5, 2);
        let r = reconstruct_ridge(&op, &DVector::zeros(3), &ReconConfig::ridge(0.5)).unwrap();
        assert!(r.converged && r.x_hat.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_operator_examples() {
        let d = build_gradient_operator(1, 2).unwrap();
        assert_eq!(d.nrows(), 4);
        // rows 0..2 vertical (all zero on a single row), rows 2..4 horizontal
        assert_eq!(d.row(2).collect::<Vec<_>>(), vec![(0, -1.0), (1, 1.0)]);
        assert_eq!(d.row(0).count(), 0);

        let d = build_gradient_operator(5, 4).unwrap();
        let c = d.apply(&DVector::from_element(20, 2.5));
        assert!(c.iter().all(|&v| v == 0.0));
        for r in 0..d.nrows() {
            assert!(d.row(r).count() <= 2);
        }

        let d = build_gradient_operator(3, 3).unwrap();
        let ramp = DVector::from_fn(9, |p, _| (p % 3) as f64);
        let g = d.apply(&ramp);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(g[i * 3 + j], 0.0, "vertical");
                let h = g[9 + i * 3 + j];
                assert_eq!(h, if j < 2 { 1.0 } else { 0.0 });
            }
        }
        assert!(build_gradient_operator(0, 3).is_err());
    }

    #[test]
    fn gradient_operator_adjoint() {
        let d = build_gradient_operator(4, 6).unwrap();
        let mut rng = SpxRng::new(1);
        let x = DVector::from_fn(24, |_, _| rng.normal());
        let p = DVector::from_fn(48, |_, _| rng.normal());
        assert!((d.apply(&x).dot(&p) - x.dot(&d.apply_transpose(&p))).abs() < 1e-12);
    }

    #[test]
    fn laplacian_symmetric_and_kills_constants() {
        let (h, w) = (4, 5);
        assert!(laplacian_apply(h, w, &DVector::from_element(20, 3.0)).amax() < 1e-15);
        let mut rng = SpxRng::new(2);
        let a = DVector::from_fn(20, |_, _| rng.normal());
        let b = DVector::from_fn(20, |_, _| rng.normal());
        let lhs = laplacian_apply(h, w, &a).dot(&b);
        let rhs = a.dot(&laplacian_apply(h, w, &b));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn power_iteration_hadamard() {
        let op = select(&gen_hadamard(16, 4, 4).unwrap(), 8, SelectionPolicy::Prefix).unwrap();
        // Phi^T Phi = 16 * projector, so the top eigenvalue is 16
        assert!((power_iteration(&op, 50, 1e-12) - 16.0).abs() < 1e-8);
    }

    #[test]
    fn tv_zero_data_gives_zero() {
        let op = select(&gen_hadamard(64, 8, 8).unwrap(), 20, SelectionPolicy::Prefix).unwrap();
        let r = reconstruct_tv(&op, &DVector::zeros(20), &ReconConfig::tv(0.3)).unwrap();
        assert!(r.x_hat.values.iter().all(|&v| v == 0.0));
        assert!(r.converged);
    }

    #[test]
    fn tv_trace_nonincreasing() {
        let op = select(&gen_hadamard(64, 8, 8).unwrap(), 32, SelectionPolicy::Prefix).unwrap();
        let mut rng = SpxRng::new(5);
        let y = DVector::from_fn(32, |_, _| rng.normal() * 4.0);
        let r = reconstruct_tv(&op, &y, &ReconConfig::tv(0.5).with_max_iters(300)).unwrap();
        for w in r.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-10);
        }
        assert_eq!(r.final_objective, *r.objective_trace.last().unwrap());
    }
}
