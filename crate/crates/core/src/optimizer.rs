//! Bound-constrained nonlinear least squares.
//!
//! A trust-region Levenberg-Marquardt iteration in box-normalized
//! coordinates `z = (x - lower) / (upper - lower)`. Trial steps are
//! projected onto the box and accepted only when the ratio of actual to
//! predicted reduction is positive, so every iterate is feasible and the
//! cost never increases. Variables sitting on a bound whose gradient points
//! outward are frozen for the step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative inward nudge applied to start points lying on a bound.
pub const BOUND_NUDGE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ParamBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::InvalidBounds(format!(
                "{} lower vs {} upper bounds",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite()) {
                return Err(Error::InvalidBounds(format!("bound {i} is not finite")));
            }
            if l >= u {
                return Err(Error::InvalidBounds(format!("lower {l} >= upper {u} for parameter {i}")));
            }
        }
        Ok(ParamBounds { lower, upper })
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.len() && x.iter().enumerate().all(|(i, v)| *v >= self.lower[i] && *v <= self.upper[i])
    }

    /// Clamps into the box, then moves points on a bound inward by
    /// `BOUND_NUDGE * width`.
    pub fn nudge_inside(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let margin = BOUND_NUDGE * self.width(i);
                v.clamp(self.lower[i] + margin, self.upper[i] - margin)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub ftol: f64,
    pub xtol: f64,
    pub gtol: f64,
    pub max_iterations: usize,
    /// Additional uniformly drawn start points; 0 disables multi-start.
    pub multi_start: usize,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            ftol: 1e-8,
            xtol: 1e-8,
            gtol: 1e-8,
            max_iterations: 400,
            multi_start: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    CostTolerance,
    StepTolerance,
    GradientTolerance,
    MaxIterations,
    /// Residuals became non-finite while differencing; the last feasible
    /// iterate is returned.
    NumericalFailure,
}

impl Termination {
    pub fn converged(self) -> bool {
        matches!(
            self,
            Termination::CostTolerance | Termination::StepTolerance | Termination::GradientTolerance
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: Vec<f64>,
    /// Mean of squared residuals at `params`.
    pub mse: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub termination: Termination,
}

/// A least-squares problem `min 0.5 * |r(x)|^2` subject to box bounds.
pub struct FitProblem<F> {
    residual: F,
    x0: Vec<f64>,
    bounds: ParamBounds,
    options: SolverOptions,
}

impl<F> FitProblem<F>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    pub fn new(residual: F, x0: Vec<f64>, bounds: ParamBounds) -> Result<Self> {
        if x0.len() != bounds.len() {
            return Err(Error::LengthMismatch {
                expected: bounds.len(),
                actual: x0.len(),
                context: "start point vs bounds",
            });
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("start point".into()));
        }
        let x0 = bounds.nudge_inside(&x0);
        Ok(FitProblem {
            residual,
            x0,
            bounds,
            options: SolverOptions::default(),
        })
    }

    pub fn with_options(mut self, options: SolverOptions) -> Self {
        self.options = options;
        self
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn bounds(&self) -> &ParamBounds {
        &self.bounds
    }

    pub fn residuals(&self, x: &[f64]) -> Vec<f64> {
        (self.residual)(x)
    }
}

/// Dense row-major `rows x cols` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Jacobian {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Jacobian {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn half_sum_sq(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

fn mean_sq(r: &[f64]) -> f64 {
    if r.is_empty() {
        0.0
    } else {
        r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64
    }
}

/// Forward-difference Jacobian with `h = sqrt(eps) * max(|x_i|, 1)`,
/// switching to a backward difference where `x_i + h` leaves the box.
pub fn jacobian<F>(problem: &FitProblem<F>, x: &[f64]) -> Result<Jacobian>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if !problem.bounds.contains(x) {
        return Err(Error::InvalidParameter {
            name: "x",
            value: f64::NAN,
            reason: "Jacobian requested outside the bounds".into(),
        });
    }
    let r0 = problem.residuals(x);
    if !all_finite(&r0) {
        return Err(Error::NonFinite("residuals at the Jacobian base point".into()));
    }
    jacobian_at(&problem.residual, x, &r0, &problem.bounds)
}

fn jacobian_at<F>(residual: &F, x: &[f64], r0: &[f64], bounds: &ParamBounds) -> Result<Jacobian>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let m = r0.len();
    let n = x.len();
    let mut data = vec![0.0; m * n];
    let sqrt_eps = f64::EPSILON.sqrt();
    let mut probe = x.to_vec();
    for j in 0..n {
        let mut h = sqrt_eps * x[j].abs().max(1.0);
        if x[j] + h > bounds.upper[j] {
            h = if x[j] - h >= bounds.lower[j] {
                -h
            } else if bounds.upper[j] - x[j] >= x[j] - bounds.lower[j] {
                0.5 * (bounds.upper[j] - x[j])
            } else {
                -0.5 * (x[j] - bounds.lower[j])
            };
        }
        probe[j] = x[j] + h;
        let step = probe[j] - x[j];
        let r = residual(&probe);
        probe[j] = x[j];
        if r.len() != m || !all_finite(&r) {
            return Err(Error::NonFinite(format!("residuals when perturbing parameter {j}")));
        }
        for i in 0..m {
            data[i * n + j] = (r[i] - r0[i]) / step;
        }
    }
    Ok(Jacobian { rows: m, cols: n, data })
}

/// Solves `(a + mu*I) p = b` for a symmetric positive semi-definite `a`.
fn solve_damped(a: &[f64], n: usize, mu: f64, b: &[f64]) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j] + if i == j { mu } else { 0.0 };
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut p = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * p[k];
        }
        p[i] = s / l[i * n + i];
    }
    Some(p)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs the solver from the problem's start point (and any multi-start draws)
/// and returns the lowest-cost result.
pub fn solve<F>(problem: &FitProblem<F>) -> Result<FitResult>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut best = solve_from(problem, &problem.x0)?;
    if problem.options.multi_start > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(problem.options.seed);
        for _ in 0..problem.options.multi_start {
            let start: Vec<f64> = (0..problem.bounds.len())
                .map(|i| rng.gen_range(problem.bounds.lower[i]..problem.bounds.upper[i]))
                .collect();
            let start = problem.bounds.nudge_inside(&start);
            // Draws where the residual is undefined are skipped.
            if let Ok(candidate) = solve_from(problem, &start) {
                if candidate.mse < best.mse {
                    best = candidate;
                }
            }
        }
    }
    Ok(best)
}

fn solve_from<F>(problem: &FitProblem<F>, start: &[f64]) -> Result<FitResult>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let bounds = &problem.bounds;
    let opts = &problem.options;
    let residual = &problem.residual;
    let n = start.len();
    let width: Vec<f64> = (0..n).map(|i| bounds.width(i)).collect();

    let mut x = start.to_vec();
    let mut r = residual(&x);
    let mut evaluations = 1;
    if !all_finite(&r) {
        return Err(Error::NonFinite("residuals at the start point".into()));
    }
    let m = r.len();
    let mut cost = half_sum_sq(&r);
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;
    let mut mu: Option<f64> = None;
    let mut nu = 2.0;

    let to_x = |z: &[f64]| -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(i, &zi)| {
                if zi <= 0.0 {
                    bounds.lower[i]
                } else if zi >= 1.0 {
                    bounds.upper[i]
                } else {
                    (bounds.lower[i] + zi * width[i]).clamp(bounds.lower[i], bounds.upper[i])
                }
            })
            .collect()
    };

    'outer: while iterations < opts.max_iterations {
        if n == 0 || cost == 0.0 {
            termination = Termination::GradientTolerance;
            break;
        }
        let jac = match jacobian_at(residual, &x, &r, bounds) {
            Ok(j) => j,
            Err(_) => {
                termination = Termination::NumericalFailure;
                break;
            }
        };
        evaluations += n;

        // Scaled Jacobian columns, gradient and Gauss-Newton matrix in z.
        let mut js = jac.data;
        for i in 0..m {
            for j in 0..n {
                js[i * n + j] *= width[j];
            }
        }
        let mut g = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                g[j] += js[i * n + j] * r[i];
            }
        }
        let z: Vec<f64> = (0..n).map(|i| (x[i] - bounds.lower[i]) / width[i]).collect();
        let free: Vec<usize> = (0..n)
            .filter(|&i| !((x[i] <= bounds.lower[i] && g[i] > 0.0) || (x[i] >= bounds.upper[i] && g[i] < 0.0)))
            .collect();
        let projected_grad = free.iter().map(|&i| g[i].abs()).fold(0.0, f64::max);
        if projected_grad <= opts.gtol {
            termination = Termination::GradientTolerance;
            break;
        }

        let nf = free.len();
        let mut h = vec![0.0; nf * nf];
        for (a, &ja) in free.iter().enumerate() {
            for (b, &jb) in free.iter().enumerate().take(a + 1) {
                let s: f64 = (0..m).map(|i| js[i * n + ja] * js[i * n + jb]).sum();
                h[a * nf + b] = s;
                h[b * nf + a] = s;
            }
        }
        let rhs: Vec<f64> = free.iter().map(|&i| -g[i]).collect();
        let mut damping = mu.unwrap_or_else(|| {
            let d = (0..nf).map(|a| h[a * nf + a]).fold(0.0, f64::max);
            if d > 0.0 {
                1e-3 * d
            } else {
                1e-3
            }
        });
        let z_norm = norm(&z);

        loop {
            if damping > 1e300 {
                termination = Termination::StepTolerance;
                break 'outer;
            }
            let Some(p_free) = solve_damped(&h, nf, damping, &rhs) else {
                damping *= nu;
                nu *= 2.0;
                continue;
            };
            let mut z_trial = z.clone();
            for (a, &i) in free.iter().enumerate() {
                z_trial[i] = (z[i] + p_free[a]).clamp(0.0, 1.0);
            }
            let x_trial = to_x(&z_trial);
            let p_eff: Vec<f64> = (0..n).map(|i| (x_trial[i] - x[i]) / width[i]).collect();
            let step_norm = norm(&p_eff);
            let tiny_step = step_norm <= opts.xtol * (opts.xtol + z_norm);
            if step_norm == 0.0 {
                termination = Termination::StepTolerance;
                break 'outer;
            }

            let lin: f64 = (0..n).map(|i| g[i] * p_eff[i]).sum();
            let quad: f64 = (0..m)
                .map(|i| {
                    let jp: f64 = (0..n).map(|j| js[i * n + j] * p_eff[j]).sum();
                    jp * jp
                })
                .sum();
            let predicted = -(lin + 0.5 * quad);
            if predicted <= 0.0 {
                if tiny_step {
                    termination = Termination::StepTolerance;
                    break 'outer;
                }
                damping *= nu;
                nu *= 2.0;
                continue;
            }

            let r_trial = residual(&x_trial);
            evaluations += 1;
            if r_trial.len() != m || !all_finite(&r_trial) {
                damping *= nu;
                nu *= 2.0;
                continue;
            }
            let cost_trial = half_sum_sq(&r_trial);
            let actual = cost - cost_trial;
            let rho = actual / predicted;
            if actual > 0.0 && rho > 1e-4 {
                let cost_old = cost;
                x = x_trial;
                r = r_trial;
                cost = cost_trial;
                iterations += 1;
                assert!(bounds.contains(&x), "solver iterate left the feasible box");
                damping *= (1.0_f64 / 3.0).max(1.0 - (2.0 * rho - 1.0).powi(3));
                nu = 2.0;
                mu = Some(damping);
                if actual <= opts.ftol * cost_old && rho > 0.25 {
                    termination = Termination::CostTolerance;
                    break 'outer;
                }
                if step_norm <= opts.xtol * (opts.xtol + norm(&p_eff_z(&x, bounds, &width))) {
                    termination = Termination::StepTolerance;
                    break 'outer;
                }
                continue 'outer;
            }
            if tiny_step {
                termination = Termination::StepTolerance;
                break 'outer;
            }
            damping *= nu;
            nu *= 2.0;
        }
    }

    let mse = mean_sq(&r);
    Ok(FitResult {
        params: x,
        mse,
        iterations,
        evaluations,
        converged: termination.converged(),
        termination,
    })
}

fn p_eff_z(x: &[f64], bounds: &ParamBounds, width: &[f64]) -> Vec<f64> {
    x.iter().enumerate().map(|(i, v)| (v - bounds.lower[i]) / width[i]).collect()
}
