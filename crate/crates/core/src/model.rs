//! Frame grids, time-activity curves and the irreversible two-compartment model.
//!
//! The tissue concentration is
//!
//! ```text
//! C(t)  = K1/(k2+k3) * [k3 + k2 * exp(-(k2+k3) t)] (*) A(t)
//! C'(t) = V_B * A(t) + (1 - V_B) * C(t)
//! ```
//!
//! evaluated on a uniform [`FineGrid`] and then averaged into the measured
//! acquisition frames with [`frame_average`]. [`solve_ode_reference`]
//! integrates the underlying ODE system directly and is kept as an
//! independent check on the convolution route.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seconds per minute. Rate constants are in 1/min, grids in seconds.
pub const SECONDS_PER_MINUTE: f64 = 60.0;

/// Smallest admissible k2 + k3 (1/min) before the kernel normalization is
/// considered singular.
pub const MIN_TOTAL_EFFLUX: f64 = 1e-9;

/// Default fine-grid step in seconds.
pub const DEFAULT_FINE_STEP_S: f64 = 0.5;

/// Dynamic acquisition protocol as `(count, duration_s)` blocks:
/// 2x10 s, 30x2 s, 4x10 s, 8x30 s, 4x60 s, 5x120 s, 9x300 s.
pub const PROTOCOL_SCHEDULE: [(usize, f64); 7] = [
    (2, 10.0),
    (30, 2.0),
    (4, 10.0),
    (8, 30.0),
    (4, 60.0),
    (5, 120.0),
    (9, 300.0),
];

const CONTIGUITY_TOL_S: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub start_s: f64,
    pub duration_s: f64,
}

impl Frame {
    pub fn end_s(&self) -> f64 {
        self.start_s + self.duration_s
    }

    pub fn midpoint_s(&self) -> f64 {
        self.start_s + 0.5 * self.duration_s
    }
}

/// Ordered, contiguous acquisition frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FrameGridRepr", into = "FrameGridRepr")]
pub struct FrameGrid {
    frames: Vec<Frame>,
}

#[derive(Serialize, Deserialize)]
struct FrameGridRepr {
    frames: Vec<Frame>,
}

impl TryFrom<FrameGridRepr> for FrameGrid {
    type Error = Error;

    fn try_from(repr: FrameGridRepr) -> Result<Self> {
        FrameGrid::new(repr.frames)
    }
}

impl From<FrameGrid> for FrameGridRepr {
    fn from(grid: FrameGrid) -> Self {
        FrameGridRepr {
            frames: grid.frames,
        }
    }
}

impl FrameGrid {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidGrid("no frames".into()));
        }
        for (i, f) in frames.iter().enumerate() {
            if !(f.start_s.is_finite() && f.duration_s.is_finite()) {
                return Err(Error::InvalidGrid(format!("frame {i} is not finite")));
            }
            if f.duration_s <= 0.0 {
                return Err(Error::InvalidGrid(format!(
                    "frame {i} has non-positive duration {}",
                    f.duration_s
                )));
            }
        }
        if frames[0].start_s < 0.0 {
            return Err(Error::InvalidGrid(format!(
                "first frame starts at {} s",
                frames[0].start_s
            )));
        }
        for (i, pair) in frames.windows(2).enumerate() {
            let gap = pair[1].start_s - pair[0].end_s();
            if gap.abs() > CONTIGUITY_TOL_S {
                return Err(Error::InvalidGrid(format!(
                    "frames {i} and {} are not contiguous (gap {gap} s)",
                    i + 1
                )));
            }
        }
        Ok(FrameGrid { frames })
    }

    /// Builds a contiguous grid starting at t = 0 from `(count, duration_s)` blocks.
    pub fn from_spec(spec: &[(usize, f64)]) -> Result<Self> {
        if spec.is_empty() {
            return Err(Error::InvalidGrid("empty frame specification".into()));
        }
        let mut frames = Vec::with_capacity(spec.iter().map(|(n, _)| n).sum());
        let mut start = 0.0;
        for &(count, duration) in spec {
            if count == 0 {
                return Err(Error::InvalidGrid("block with zero frames".into()));
            }
            if !(duration > 0.0 && duration.is_finite()) {
                return Err(Error::InvalidGrid(format!(
                    "non-positive frame duration {duration}"
                )));
            }
            for _ in 0..count {
                frames.push(Frame {
                    start_s: start,
                    duration_s: duration,
                });
                start += duration;
            }
        }
        FrameGrid::new(frames)
    }

    /// The 62-frame, 65-minute dynamic protocol.
    pub fn protocol() -> Self {
        FrameGrid::from_spec(&PROTOCOL_SCHEDULE).expect("protocol schedule is valid")
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn start_s(&self) -> f64 {
        self.frames[0].start_s
    }

    pub fn end_s(&self) -> f64 {
        self.frames[self.frames.len() - 1].end_s()
    }

    pub fn total_duration_s(&self) -> f64 {
        self.end_s() - self.start_s()
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.frames.iter().map(Frame::midpoint_s).collect()
    }

    pub fn durations(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.duration_s).collect()
    }
}

/// Activity concentration per frame (kBq/ml).
#[derive(Clone, Debug, PartialEq)]
pub struct Tac {
    grid: FrameGrid,
    values: Vec<f64>,
    raw: bool,
}

impl Tac {
    /// A curve whose values must all be finite and non-negative.
    pub fn new(grid: FrameGrid, values: Vec<f64>) -> Result<Self> {
        let tac = Self::raw(grid, values)?;
        if let Some((i, v)) = tac.values.iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(Error::InvalidTac(format!(
                "negative value {v} at frame {i}; use Tac::raw for uncorrected data"
            )));
        }
        Ok(Tac { raw: false, ..tac })
    }

    /// A curve flagged as raw input: negative values are allowed and kept as-is.
    pub fn raw(grid: FrameGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                actual: values.len(),
                context: "TAC values vs frames",
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidTac(format!("non-finite value at frame {i}")));
        }
        Ok(Tac {
            grid,
            values,
            raw: true,
        })
    }

    /// Picks [`Tac::new`] when all values are non-negative, [`Tac::raw`] otherwise.
    pub fn from_values(grid: FrameGrid, values: Vec<f64>) -> Result<Self> {
        if values.iter().all(|v| *v >= 0.0) {
            Self::new(grid, values)
        } else {
            Self::raw(grid, values)
        }
    }

    pub fn grid(&self) -> &FrameGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_raw(&self) -> bool {
        self.raw
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Kinetic parameters of the two-compartment model plus input mixing weights.
///
/// `k1`, `k2`, `k3` are in 1/min; `v_b` and the weights are dimensionless.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KineticParams {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub v_b: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl KineticParams {
    /// Rate constants and blood fraction with an aorta-only input (alpha = 1).
    pub fn with_aorta_input(k1: f64, k2: f64, k3: f64, v_b: f64) -> Self {
        KineticParams {
            k1,
            k2,
            k3,
            v_b,
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            delta: 0.0,
        }
    }

    pub fn weights(&self) -> crate::input::MixWeights {
        crate::input::MixWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            delta: self.delta,
        }
    }

    /// Net influx rate K1*k3/(k2+k3) in 1/min.
    pub fn influx_rate(&self) -> f64 {
        self.k1 * self.k3 / (self.k2 + self.k3)
    }

    fn check(&self) -> Result<()> {
        let fields = [
            ("K1", self.k1),
            ("k2", self.k2),
            ("k3", self.k3),
            ("V_B", self.v_b),
        ];
        for (name, value) in fields {
            if !value.is_finite() {
                return Err(Error::InvalidParameter {
                    name,
                    value,
                    reason: "not finite".into(),
                });
            }
        }
        let total = self.k2 + self.k3;
        if total < MIN_TOTAL_EFFLUX {
            return Err(Error::SingularKernel(total));
        }
        Ok(())
    }
}

/// Uniform sampling grid `0, step, 2*step, ..` up to and including `end_s`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineGrid {
    step_s: f64,
    end_s: f64,
}

impl FineGrid {
    pub fn new(step_s: f64, end_s: f64) -> Result<Self> {
        if !(step_s > 0.0 && step_s.is_finite()) {
            return Err(Error::InvalidGrid(format!("fine step {step_s} s")));
        }
        if !(end_s >= 0.0 && end_s.is_finite()) {
            return Err(Error::InvalidGrid(format!("fine grid end {end_s} s")));
        }
        Ok(FineGrid { step_s, end_s })
    }

    /// Smallest grid with the given step that reaches the end of `grid`.
    pub fn covering(grid: &FrameGrid, step_s: f64) -> Result<Self> {
        let fine = FineGrid::new(step_s, grid.end_s())?;
        if fine.last_time() + 1e-9 * step_s < grid.end_s() {
            FineGrid::new(step_s, fine.last_time() + step_s)
        } else {
            Ok(fine)
        }
    }

    pub fn step_s(&self) -> f64 {
        self.step_s
    }

    pub fn end_s(&self) -> f64 {
        self.end_s
    }

    pub fn len(&self) -> usize {
        (self.end_s / self.step_s + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.step_s
    }

    pub fn last_time(&self) -> f64 {
        self.time(self.len() - 1)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.time(i)).collect()
    }
}

/// Discretization of the convolution of the tissue kernel with the input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvolutionRule {
    /// Exact convolution of the kernel with the piecewise-linear interpolant
    /// of the input samples. Second-order accurate in the input sampling.
    #[default]
    PiecewiseLinear,
    /// `step * sum_{j=0..=n} h(j*step) * A[n-j]`, first-order accurate.
    LeftRectangle,
}

fn check_input(input: &[f64], fine: &FineGrid) -> Result<()> {
    if input.len() != fine.len() {
        return Err(Error::LengthMismatch {
            expected: fine.len(),
            actual: input.len(),
            context: "input samples vs fine grid",
        });
    }
    Ok(())
}

/// Model output `C'(t)` on the fine grid using the default convolution rule.
pub fn eval_tissue_model(params: &KineticParams, input: &[f64], fine: &FineGrid) -> Result<Vec<f64>> {
    eval_tissue_model_with(params, input, fine, ConvolutionRule::default())
}

pub fn eval_tissue_model_with(
    params: &KineticParams,
    input: &[f64],
    fine: &FineGrid,
    rule: ConvolutionRule,
) -> Result<Vec<f64>> {
    params.check()?;
    check_input(input, fine)?;

    let dt = fine.step_s();
    let k1 = params.k1 / SECONDS_PER_MINUTE;
    let k2 = params.k2 / SECONDS_PER_MINUTE;
    let k3 = params.k3 / SECONDS_PER_MINUTE;
    let lambda = k2 + k3;
    // 1 - exp(-lambda*dt); the recursion below is written in terms of it so
    // that slow kinetics (decay close to 1) do not amplify rounding
    let shrink = -(-lambda * dt).exp_m1();
    let scale = k1 / lambda;
    let v_b = params.v_b;

    let mut out = Vec::with_capacity(input.len());
    // `trapped` is the running integral of A (constant kernel part), `free`
    // the running integral of A against exp(-lambda*(t - s)).
    let mut trapped = CompensatedSum::default();
    let mut free = CompensatedSum::default();
    match rule {
        ConvolutionRule::PiecewiseLinear => {
            let (w_prev, w_next) = linear_exp_weights(lambda, dt);
            let half = 0.5 * dt;
            for (n, &a) in input.iter().enumerate() {
                if n > 0 {
                    let a_prev = input[n - 1];
                    trapped.add(half * (a_prev + a));
                    free.add(w_prev * a_prev + w_next * a - shrink * free.value());
                }
                let tissue = scale * (k3 * trapped.value() + k2 * free.value());
                out.push(v_b * a + (1.0 - v_b) * tissue);
            }
        }
        ConvolutionRule::LeftRectangle => {
            for &a in input {
                trapped.add(a);
                free.add(a - shrink * free.value());
                let tissue = dt * scale * (k3 * trapped.value() + k2 * free.value());
                out.push(v_b * a + (1.0 - v_b) * tissue);
            }
        }
    }
    Ok(out)
}

/// Neumaier summation; both running integrals span thousands of samples
/// and their rounding otherwise dominates finite-difference derivatives.
#[derive(Default)]
struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Weights of the end-point samples when integrating `exp(-lambda*(dt - u))`
/// against a linear segment over `[0, dt]`.
fn linear_exp_weights(lambda: f64, dt: f64) -> (f64, f64) {
    let x = lambda * dt;
    // older sample: int_0^1 v e^{-xv} dv = sum (-x)^n / (n! (n+2))
    // newer sample: int_0^1 (1-v) e^{-xv} dv = sum (-x)^n / (n! (n+1) (n+2))
    let (older, newer) = if x < 1.0 {
        let (mut older, mut newer) = (0.0, 0.0);
        let mut term = 1.0; // (-x)^n / n!
        for n in 0..40 {
            let nf = n as f64;
            older += term / (nf + 2.0);
            newer += term / ((nf + 1.0) * (nf + 2.0));
            term *= -x / (nf + 1.0);
            if term.abs() < 1e-18 {
                break;
            }
        }
        (older, newer)
    } else {
        let e = (-x).exp();
        let one_minus = -(-x).exp_m1();
        let older = (1.0 - e * (1.0 + x)) / (x * x);
        (older, one_minus / x - older)
    };
    (older * dt, newer * dt)
}

/// Fixed-step fourth-order Runge-Kutta integration of
/// `dF/dt = K1*A - (k2+k3)*F`, `dB/dt = k3*F` from `F(0) = B(0) = 0`.
///
/// The input is linearly interpolated between fine samples for the half-step
/// stages. Returns `V_B*A + (1 - V_B)*(F + B)` at every fine sample.
pub fn solve_ode_reference(params: &KineticParams, input: &[f64], fine: &FineGrid) -> Result<Vec<f64>> {
    params.check()?;
    check_input(input, fine)?;
    if let Some(i) = input.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("input sample {i}")));
    }

    let h = fine.step_s();
    let k1 = params.k1 / SECONDS_PER_MINUTE;
    let k2 = params.k2 / SECONDS_PER_MINUTE;
    let k3 = params.k3 / SECONDS_PER_MINUTE;
    let v_b = params.v_b;
    let rhs = |a: f64, f: f64| -> (f64, f64) { (k1 * a - (k2 + k3) * f, k3 * f) };

    let mut out = Vec::with_capacity(input.len());
    let (mut f, mut b) = (0.0_f64, 0.0_f64);
    out.push(v_b * input[0] + (1.0 - v_b) * (f + b));
    for n in 1..input.len() {
        let a0 = input[n - 1];
        let a1 = input[n];
        let am = 0.5 * (a0 + a1);
        let (df1, db1) = rhs(a0, f);
        let (df2, db2) = rhs(am, f + 0.5 * h * df1);
        let (df3, db3) = rhs(am, f + 0.5 * h * df2);
        let (df4, db4) = rhs(a1, f + h * df3);
        f += h / 6.0 * (df1 + 2.0 * df2 + 2.0 * df3 + df4);
        b += h / 6.0 * (db1 + 2.0 * db2 + 2.0 * db3 + db4);
        out.push(v_b * a1 + (1.0 - v_b) * (f + b));
    }
    Ok(out)
}

/// Quadrature weights that average the piecewise-linear interpolant of the
/// fine samples over one acquisition frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameWeights {
    pub first: usize,
    pub weights: Vec<f64>,
}

impl FrameWeights {
    pub fn apply(&self, curve: &[f64]) -> f64 {
        self.weights.iter().zip(&curve[self.first..]).map(|(w, v)| w * v).sum()
    }
}

/// Averaging weights for every frame. Boundaries need not fall on fine
/// samples; the partial cells at either end are integrated exactly.
pub fn frame_weights(fine: &FineGrid, grid: &FrameGrid) -> Result<Vec<FrameWeights>> {
    let step = fine.step_s();
    if fine.last_time() + 1e-9 * step < grid.end_s() {
        return Err(Error::InvalidGrid(format!(
            "fine grid ends at {} s before the last frame end {} s",
            fine.last_time(),
            grid.end_s()
        )));
    }
    let last_cell = fine.len() - 2;
    Ok(grid
        .frames()
        .iter()
        .map(|frame| {
            let (a, b) = (frame.start_s / step, frame.end_s() / step);
            let lo = (a.floor() as usize).min(last_cell);
            let hi = ((b.ceil() as usize).max(lo + 1)).min(last_cell + 1);
            let mut weights = vec![0.0; hi - lo + 1];
            for cell in lo..hi {
                // overlap of [a, b] with this cell in cell-local coordinates
                let u = (a - cell as f64).clamp(0.0, 1.0);
                let v = (b - cell as f64).clamp(0.0, 1.0);
                let len = v - u;
                let mid = 0.5 * (u + v);
                weights[cell - lo] += len * (1.0 - mid);
                weights[cell - lo + 1] += len * mid;
            }
            let width = b - a;
            weights.iter_mut().for_each(|w| *w /= width);
            FrameWeights { first: lo, weights }
        })
        .collect())
}

/// Averages a fine-grid curve over each acquisition frame.
pub fn frame_average(fine_curve: &[f64], fine: &FineGrid, grid: &FrameGrid) -> Result<Tac> {
    if fine_curve.len() != fine.len() {
        return Err(Error::LengthMismatch {
            expected: fine.len(),
            actual: fine_curve.len(),
            context: "fine curve vs fine grid",
        });
    }
    let weights = frame_weights(fine, grid)?;
    Tac::from_values(grid.clone(), average_frames(fine_curve, &weights))
}

pub(crate) fn average_frames(curve: &[f64], weights: &[FrameWeights]) -> Vec<f64> {
    weights.iter().map(|w| w.apply(curve)).collect()
}
