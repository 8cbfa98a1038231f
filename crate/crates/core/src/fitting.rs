//! Organ- and voxel-level fitting of the two-compartment model.
//!
//! The free parameter vector is always `[K1, k2, k3, V_B, w...]`, where the
//! weights present depend on the [`OrganPreset`], the [`FitMode`] and the
//! [`WeightScaling`]. Weights a preset fixes are held at exactly zero.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::input::{interp_to_fine, mix_values, InputFunctionSet, MixWeights, IDIF_NAMES};
use crate::model::{
    average_frames, eval_tissue_model_with, frame_weights, ConvolutionRule, FineGrid, FrameGrid,
    FrameWeights, KineticParams, Tac,
};
use crate::optimizer::{solve, FitProblem, FitResult, ParamBounds, SolverOptions};
use crate::volume::{LabelVolume, ScalarVolume};

pub const K1_BOUNDS: (f64, f64) = (0.01, 10.0);
pub const K2_BOUNDS: (f64, f64) = (0.01, 10.0);
pub const K3_BOUNDS: (f64, f64) = (0.001, 1.0);
pub const V_B_LOWER: f64 = 0.001;

/// Value written to parametric maps where no fit is available.
pub const NO_DATA: f32 = f32::NAN;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Organ {
    Liver,
    Lung,
    Kidney,
    Generic,
}

impl Organ {
    pub fn name(self) -> &'static str {
        match self {
            Organ::Liver => "liver",
            Organ::Lung => "lung",
            Organ::Kidney => "kidney",
            Organ::Generic => "generic",
        }
    }
}

impl std::str::FromStr for Organ {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "liver" => Ok(Organ::Liver),
            "lung" | "lungs" => Ok(Organ::Lung),
            "kidney" | "kidneys" => Ok(Organ::Kidney),
            "generic" => Ok(Organ::Generic),
            other => Err(Error::Unsupported(format!("unknown organ preset '{other}'"))),
        }
    }
}

/// Parameter bounds and the set of active input weights for one organ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganPreset {
    pub organ: Organ,
    pub k1: (f64, f64),
    pub k2: (f64, f64),
    pub k3: (f64, f64),
    pub v_b: (f64, f64),
    /// Bounds of alpha, beta, gamma, delta; `None` holds the weight at zero.
    pub weights: [Option<(f64, f64)>; 4],
}

impl OrganPreset {
    fn with(organ: Organ, v_b_upper: f64, weights: [Option<(f64, f64)>; 4]) -> Self {
        OrganPreset {
            organ,
            k1: K1_BOUNDS,
            k2: K2_BOUNDS,
            k3: K3_BOUNDS,
            v_b: (V_B_LOWER, v_b_upper),
            weights,
        }
    }

    /// Aorta and portal vein; V_B up to 0.25.
    pub fn liver() -> Self {
        Self::with(Organ::Liver, 0.25, [Some((0.0, 1.0)), Some((0.0, 1.0)), None, None])
    }

    /// Aorta and pulmonary artery; V_B up to 0.15.
    pub fn lung() -> Self {
        Self::with(Organ::Lung, 0.15, [Some((0.0, 1.0)), None, Some((0.0, 1.0)), None])
    }

    /// Aorta and ureter, the ureter weight may be negative; V_B up to 0.25.
    pub fn kidney() -> Self {
        Self::with(Organ::Kidney, 0.25, [Some((0.0, 1.0)), None, None, Some((-1.0, 1.0))])
    }

    /// All four inputs in [0, 1]; V_B up to 1.
    pub fn generic() -> Self {
        Self::with(Organ::Generic, 1.0, [Some((0.0, 1.0)); 4])
    }

    pub fn for_organ(organ: Organ) -> Self {
        match organ {
            Organ::Liver => Self::liver(),
            Organ::Lung => Self::lung(),
            Organ::Kidney => Self::kidney(),
            Organ::Generic => Self::generic(),
        }
    }

    /// Indices (0 = alpha .. 3 = delta) of the weights that are not held at zero.
    pub fn active_weights(&self) -> Vec<usize> {
        (0..4).filter(|&i| self.weights[i].is_some()).collect()
    }

    /// Whether `params` respects every bound and fixed-zero weight of the preset.
    pub fn contains(&self, params: &KineticParams) -> bool {
        let within = |v: f64, (l, u): (f64, f64)| v >= l && v <= u;
        let w = params.weights().as_array();
        within(params.k1, self.k1)
            && within(params.k2, self.k2)
            && within(params.k3, self.k3)
            && within(params.v_b, self.v_b)
            && (0..4).all(|i| match self.weights[i] {
                Some(b) => within(w[i], b),
                None => w[i] == 0.0,
            })
    }
}

/// Aorta-only baseline or the preset's multi-input model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    Baseline,
    Multi,
}

impl FitMode {
    pub fn name(self) -> &'static str {
        match self {
            FitMode::Baseline => "baseline",
            FitMode::Multi => "multi",
        }
    }
}

/// How the overall scale of the mixed input is fixed.
///
/// With [`WeightScaling::Free`] every active weight, alpha included, is a
/// box-bounded free parameter. Scaling all weights by `s` while replacing
/// `V_B` by `V_B/s` and `K1` by `K1*(1-V_B)/(1-V_B/s)/s` reproduces the same
/// curve, so K1, V_B and the weights are only determined up to that family.
///
/// [`WeightScaling::UnitSum`] removes the redundancy: alpha is derived as
/// `1 - sum(|other weights|)`. The baseline then uses the aorta curve as-is.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScaling {
    #[default]
    UnitSum,
    Free,
}

/// Starting point for the kinetic parameters; weights always start at zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialGuess {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub v_b: f64,
}

impl Default for InitialGuess {
    fn default() -> Self {
        InitialGuess {
            k1: 0.1,
            k2: 0.1,
            k3: 0.01,
            v_b: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub scaling: WeightScaling,
    pub rule: ConvolutionRule,
    pub solver: SolverOptions,
    pub init: InitialGuess,
}

const KINETIC_NAMES: [&str; 4] = ["K1", "k2", "k3", "V_B"];
const WEIGHT_NAMES: [&str; 4] = ["alpha", "beta", "gamma", "delta"];

/// Mapping between the optimizer's parameter vector and [`KineticParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    scaling: WeightScaling,
    /// Weight indices (0 = alpha) carried as free parameters, in order.
    free_weights: Vec<usize>,
}

impl ParamLayout {
    pub fn new(preset: &OrganPreset, mode: FitMode, scaling: WeightScaling) -> Result<Self> {
        let free_weights: Vec<usize> = match (mode, scaling) {
            (FitMode::Baseline, WeightScaling::Free) => vec![0],
            (FitMode::Baseline, WeightScaling::UnitSum) => vec![],
            (FitMode::Multi, WeightScaling::Free) => preset.active_weights(),
            (FitMode::Multi, WeightScaling::UnitSum) => {
                let others: Vec<usize> = preset.active_weights().into_iter().filter(|&i| i != 0).collect();
                if others.len() > 1 {
                    return Err(Error::Unsupported(format!(
                        "unit-sum weights need at most one non-aorta input, the {} preset has {}; use free weights",
                        preset.organ.name(),
                        others.len()
                    )));
                }
                others
            }
        };
        if preset.weights[0].is_none() {
            return Err(Error::Unsupported("presets must keep the aorta input active".into()));
        }
        Ok(ParamLayout { scaling, free_weights })
    }

    pub fn len(&self) -> usize {
        4 + self.free_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn free_weights(&self) -> &[usize] {
        &self.free_weights
    }

    pub fn scaling(&self) -> WeightScaling {
        self.scaling
    }

    /// Names of the free parameters in vector order.
    pub fn names(&self) -> Vec<&'static str> {
        KINETIC_NAMES
            .iter()
            .copied()
            .chain(self.free_weights.iter().map(|&i| WEIGHT_NAMES[i]))
            .collect()
    }

    /// Free parameters plus alpha when it is derived from the others.
    pub fn reported_names(&self) -> Vec<&'static str> {
        let mut names = self.names();
        if self.scaling == WeightScaling::UnitSum && !self.free_weights.is_empty() {
            names.insert(4, "alpha");
        }
        names
    }

    pub fn bounds(&self, preset: &OrganPreset) -> Result<ParamBounds> {
        let mut lower = vec![preset.k1.0, preset.k2.0, preset.k3.0, preset.v_b.0];
        let mut upper = vec![preset.k1.1, preset.k2.1, preset.k3.1, preset.v_b.1];
        for &i in &self.free_weights {
            let (l, u) = preset.weights[i].ok_or_else(|| {
                Error::InvalidBounds(format!("{} is fixed by the preset", WEIGHT_NAMES[i]))
            })?;
            lower.push(l);
            upper.push(u);
        }
        ParamBounds::new(lower, upper)
    }

    pub fn to_params(&self, theta: &[f64]) -> KineticParams {
        let mut w = [0.0; 4];
        for (k, &i) in self.free_weights.iter().enumerate() {
            w[i] = theta[4 + k];
        }
        if self.scaling == WeightScaling::UnitSum {
            w[0] = 1.0 - w[1..].iter().map(|v| v.abs()).sum::<f64>();
        }
        KineticParams {
            k1: theta[0],
            k2: theta[1],
            k3: theta[2],
            v_b: theta[3],
            alpha: w[0],
            beta: w[1],
            gamma: w[2],
            delta: w[3],
        }
    }

    pub fn to_vector(&self, params: &KineticParams) -> Vec<f64> {
        let w = params.weights().as_array();
        let mut theta = vec![params.k1, params.k2, params.k3, params.v_b];
        theta.extend(self.free_weights.iter().map(|&i| w[i]));
        theta
    }

    fn reported_value(name: &str, params: &KineticParams) -> f64 {
        match name {
            "K1" => params.k1,
            "k2" => params.k2,
            "k3" => params.k3,
            "V_B" => params.v_b,
            "alpha" => params.alpha,
            "beta" => params.beta,
            "gamma" => params.gamma,
            "delta" => params.delta,
            _ => f64::NAN,
        }
    }
}

/// Input functions resampled once onto the fine grid, shared by many fits.
#[derive(Clone, Debug)]
pub struct PreparedInputs {
    grid: FrameGrid,
    fine: FineGrid,
    frames: Vec<FrameWeights>,
    curves: [Vec<f64>; 4],
    rule: ConvolutionRule,
}

impl PreparedInputs {
    pub fn new(idifs: &InputFunctionSet, fine: &FineGrid, rule: ConvolutionRule) -> Result<Self> {
        let frames = frame_weights(fine, idifs.grid())?;
        let [a, b, c, d] = idifs.curves();
        Ok(PreparedInputs {
            grid: idifs.grid().clone(),
            fine: *fine,
            frames,
            curves: [
                interp_to_fine(a, fine)?,
                interp_to_fine(b, fine)?,
                interp_to_fine(c, fine)?,
                interp_to_fine(d, fine)?,
            ],
            rule,
        })
    }

    pub fn grid(&self) -> &FrameGrid {
        &self.grid
    }

    /// Mixed input on the fine grid.
    pub fn mixed(&self, weights: MixWeights) -> Vec<f64> {
        let [a, b, c, d] = &self.curves;
        mix_values([a, b, c, d], weights)
    }

    /// Frame-averaged model prediction.
    pub fn predict(&self, params: &KineticParams) -> Result<Vec<f64>> {
        let input = self.mixed(params.weights());
        let fine_curve = eval_tissue_model_with(params, &input, &self.fine, self.rule)?;
        Ok(average_frames(&fine_curve, &self.frames))
    }

    fn check_not_degenerate(&self, layout: &ParamLayout) -> Result<()> {
        let mut used = vec![0];
        used.extend(layout.free_weights.iter().copied());
        let all_zero = used.iter().all(|&i| self.curves[i].iter().all(|v| *v == 0.0));
        if all_zero {
            let names: Vec<&str> = used.iter().map(|&i| IDIF_NAMES[i]).collect();
            return Err(Error::DegenerateInput(format!(
                "input functions used by the fit ({}) are all zero",
                names.join(", ")
            )));
        }
        Ok(())
    }
}

/// A fitted curve: optimizer output plus the decoded parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TacFit {
    pub organ: Organ,
    pub mode: FitMode,
    pub scaling: WeightScaling,
    pub params: KineticParams,
    pub names: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub result: FitResult,
}

impl TacFit {
    /// Reported values (free parameters plus derived alpha) by name.
    pub fn reported(&self) -> Vec<(String, f64)> {
        let layout_names: Vec<&str> = self.names.iter().map(String::as_str).collect();
        let mut out: Vec<(String, f64)> = layout_names
            .iter()
            .map(|n| (n.to_string(), ParamLayout::reported_value(n, &self.params)))
            .collect();
        if self.scaling == WeightScaling::UnitSum && self.names.len() > 4 {
            out.insert(4, ("alpha".into(), self.params.alpha));
        }
        out
    }
}

fn check_same_grid(tac: &Tac, grid: &FrameGrid) -> Result<()> {
    if tac.grid() != grid {
        return Err(Error::GridMismatch("tissue curve and input functions use different frames".into()));
    }
    Ok(())
}

fn run_fit(
    measured: &[f64],
    prepared: &PreparedInputs,
    preset: &OrganPreset,
    mode: FitMode,
    config: &FitConfig,
    start: &KineticParams,
) -> Result<TacFit> {
    let layout = ParamLayout::new(preset, mode, config.scaling)?;
    prepared.check_not_degenerate(&layout)?;
    let bounds = layout.bounds(preset)?;
    let residual = |theta: &[f64]| -> Vec<f64> {
        match prepared.predict(&layout.to_params(theta)) {
            Ok(pred) => pred.iter().zip(measured).map(|(p, m)| p - m).collect(),
            Err(_) => vec![f64::NAN; measured.len()],
        }
    };
    let x0 = layout.to_vector(start);
    let mut result: Option<FitResult> = None;
    for branch in sign_branches(&layout, &bounds)? {
        let problem = FitProblem::new(&residual, x0.clone(), branch)?.with_options(config.solver);
        let r = solve(&problem)?;
        result = Some(match result {
            Some(best) if best.mse <= r.mse => FitResult {
                evaluations: best.evaluations + r.evaluations,
                ..best
            },
            Some(best) => FitResult {
                evaluations: best.evaluations + r.evaluations,
                ..r
            },
            None => r,
        });
    }
    let result = result.expect("at least one branch");
    Ok(TacFit {
        organ: preset.organ,
        mode,
        scaling: config.scaling,
        params: layout.to_params(&result.params),
        names: layout.names().into_iter().map(String::from).collect(),
        lower: bounds.lower().to_vec(),
        upper: bounds.upper().to_vec(),
        result,
    })
}

/// Under unit-sum scaling `alpha = 1 - |w|` has a kink at `w = 0`, which
/// finite differences cannot cross. A weight whose range spans zero is
/// fitted separately on each side and the better branch kept.
fn sign_branches(layout: &ParamLayout, bounds: &ParamBounds) -> Result<Vec<ParamBounds>> {
    let straddling = (4..layout.len()).find(|&k| {
        layout.scaling == WeightScaling::UnitSum && bounds.lower()[k] < 0.0 && bounds.upper()[k] > 0.0
    });
    let Some(k) = straddling else {
        return Ok(vec![bounds.clone()]);
    };
    let mut positive = (bounds.lower().to_vec(), bounds.upper().to_vec());
    let mut negative = positive.clone();
    positive.0[k] = 0.0;
    negative.1[k] = 0.0;
    Ok(vec![
        ParamBounds::new(positive.0, positive.1)?,
        ParamBounds::new(negative.0, negative.1)?,
    ])
}

fn default_start(config: &FitConfig) -> KineticParams {
    let g = config.init;
    KineticParams {
        k1: g.k1,
        k2: g.k2,
        k3: g.k3,
        v_b: g.v_b,
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        delta: 0.0,
    }
}

/// Fits one time-activity curve from the configured initial guess.
pub fn fit_tac(
    tac: &Tac,
    idifs: &InputFunctionSet,
    preset: &OrganPreset,
    mode: FitMode,
    fine: &FineGrid,
    config: &FitConfig,
) -> Result<TacFit> {
    check_same_grid(tac, idifs.grid())?;
    let prepared = PreparedInputs::new(idifs, fine, config.rule)?;
    run_fit(tac.values(), &prepared, preset, mode, config, &default_start(config))
}

/// Baseline and multi-input fits of the same curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmStartFits {
    pub baseline: TacFit,
    pub multi: TacFit,
    /// The multi fit ended above the baseline cost and was replaced by the
    /// baseline optimum embedded with zero extra weights.
    pub retained_baseline: bool,
}

impl WarmStartFits {
    /// `100 * (mse_multi - mse_baseline) / mse_baseline`.
    pub fn relative_mse_change(&self) -> Result<f64> {
        crate::stats::relative_change(self.baseline.result.mse, self.multi.result.mse)
    }
}

/// Fits the baseline, then starts the multi-input fit from the baseline
/// optimum with the extra weights at zero.
pub fn warm_start_chain(
    tac: &Tac,
    idifs: &InputFunctionSet,
    preset: &OrganPreset,
    fine: &FineGrid,
    config: &FitConfig,
) -> Result<WarmStartFits> {
    check_same_grid(tac, idifs.grid())?;
    let prepared = PreparedInputs::new(idifs, fine, config.rule)?;
    chain_prepared(tac.values(), &prepared, preset, config)
}

fn chain_prepared(
    measured: &[f64],
    prepared: &PreparedInputs,
    preset: &OrganPreset,
    config: &FitConfig,
) -> Result<WarmStartFits> {
    let baseline = run_fit(measured, prepared, preset, FitMode::Baseline, config, &default_start(config))?;
    let mut start = baseline.params;
    start.beta = 0.0;
    start.gamma = 0.0;
    start.delta = 0.0;
    let mut multi = run_fit(measured, prepared, preset, FitMode::Multi, config, &start)?;
    let mut retained_baseline = false;
    if multi.result.mse > baseline.result.mse {
        // The exact nested point: extra weights at zero reproduce the
        // baseline residuals bit for bit.
        let layout = ParamLayout::new(preset, FitMode::Multi, config.scaling)?;
        let theta = layout.to_vector(&start);
        let params = layout.to_params(&theta);
        let pred = prepared.predict(&params)?;
        let mse = pred.iter().zip(measured).map(|(p, m)| (p - m) * (p - m)).sum::<f64>() / measured.len() as f64;
        multi.params = params;
        multi.result.params = theta;
        multi.result.mse = mse;
        multi.result.termination = baseline.result.termination;
        multi.result.converged = baseline.result.converged;
        retained_baseline = true;
    }
    Ok(WarmStartFits {
        baseline,
        multi,
        retained_baseline,
    })
}

/// Named parametric volumes from a voxelwise fit.
#[derive(Clone, Debug, PartialEq)]
pub struct ParametricMaps {
    pub maps: Vec<(String, ScalarVolume)>,
    pub fitted: usize,
    pub failures: Vec<VoxelFailure>,
}

impl ParametricMaps {
    pub fn get(&self, name: &str) -> Option<&ScalarVolume> {
        self.maps.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelFailure {
    pub index: usize,
    pub message: String,
}

/// Baseline and multi maps from per-voxel warm-start chains.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainMaps {
    pub baseline: ParametricMaps,
    pub multi: ParametricMaps,
}

struct VoxelJob<'a> {
    dynamic: &'a [ScalarVolume],
    voxels: Vec<usize>,
    grid: FrameGrid,
}

impl<'a> VoxelJob<'a> {
    fn new(dynamic: &'a [ScalarVolume], mask: &LabelVolume, idifs: &InputFunctionSet) -> Result<Self> {
        let grid = idifs.grid().clone();
        if dynamic.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                actual: dynamic.len(),
                context: "dynamic volumes vs frames",
            });
        }
        for (f, vol) in dynamic.iter().enumerate() {
            if vol.dims() != mask.dims() {
                return Err(Error::DimensionMismatch(format!(
                    "frame {f} has dims {:?}, mask has {:?}",
                    vol.dims(),
                    mask.dims()
                )));
            }
        }
        let voxels = mask.indices();
        if voxels.is_empty() {
            return Err(Error::EmptyMask("organ mask has no voxels".into()));
        }
        Ok(VoxelJob { dynamic, voxels, grid })
    }

    fn series(&self, index: usize) -> Vec<f64> {
        self.dynamic.iter().map(|v| v.data()[index] as f64).collect()
    }

    fn run<T, F>(&self, threads: usize, fit: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&[f64]) -> T + Sync,
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Unsupported(format!("thread pool: {e}")))?;
        let total = self.voxels.len();
        let done = AtomicUsize::new(0);
        let tick = (total / 10).max(1);
        Ok(pool.install(|| {
            self.voxels
                .par_iter()
                .map(|&index| {
                    let out = fit(&self.series(index));
                    let n = done.fetch_add(1, Ordering::Relaxed) + 1;
                    if n.is_multiple_of(tick) || n == total {
                        log::info!("voxel fits: {n}/{total}");
                    }
                    out
                })
                .collect()
        }))
    }

    fn assemble(
        &self,
        names: &[&'static str],
        results: Vec<std::result::Result<TacFit, String>>,
        template: &ScalarVolume,
    ) -> ParametricMaps {
        let mut maps: Vec<(String, ScalarVolume)> = names
            .iter()
            .chain(std::iter::once(&"mse"))
            .map(|n| {
                let vol = ScalarVolume::filled(template.dims(), template.spacing(), NO_DATA)
                    .expect("template geometry is valid")
                    .with_origin(template.origin());
                (n.to_string(), vol)
            })
            .collect();
        let mut failures = Vec::new();
        let mut fitted = 0;
        for (&index, result) in self.voxels.iter().zip(results) {
            match result {
                Ok(fit) => {
                    fitted += 1;
                    for (slot, name) in names.iter().enumerate() {
                        maps[slot].1.data_mut()[index] = ParamLayout::reported_value(name, &fit.params) as f32;
                    }
                    let last = maps.len() - 1;
                    maps[last].1.data_mut()[index] = fit.result.mse as f32;
                }
                Err(message) => {
                    log::warn!("voxel {index}: {message}");
                    failures.push(VoxelFailure { index, message });
                }
            }
        }
        ParametricMaps { maps, fitted, failures }
    }
}

fn voxel_tac(grid: &FrameGrid, series: &[f64]) -> std::result::Result<Tac, String> {
    Tac::from_values(grid.clone(), series.to_vec()).map_err(|e| e.to_string())
}

/// Fits every masked voxel independently; failing voxels become no-data.
///
/// `threads = 0` uses the available parallelism. Output does not depend on
/// the thread count.
#[allow(clippy::too_many_arguments)]
pub fn fit_voxelwise(
    dynamic: &[ScalarVolume],
    mask: &LabelVolume,
    idifs: &InputFunctionSet,
    preset: &OrganPreset,
    mode: FitMode,
    fine: &FineGrid,
    config: &FitConfig,
    threads: usize,
) -> Result<ParametricMaps> {
    let job = VoxelJob::new(dynamic, mask, idifs)?;
    let prepared = PreparedInputs::new(idifs, fine, config.rule)?;
    let layout = ParamLayout::new(preset, mode, config.scaling)?;
    prepared.check_not_degenerate(&layout)?;
    let start = default_start(config);
    let results = job.run(threads, |series| {
        let tac = voxel_tac(&job.grid, series)?;
        run_fit(tac.values(), &prepared, preset, mode, config, &start).map_err(|e| e.to_string())
    })?;
    Ok(job.assemble(&layout.reported_names(), results, &dynamic[0]))
}

/// Voxelwise [`warm_start_chain`], producing baseline and multi maps.
#[allow(clippy::too_many_arguments)]
pub fn fit_voxelwise_chain(
    dynamic: &[ScalarVolume],
    mask: &LabelVolume,
    idifs: &InputFunctionSet,
    preset: &OrganPreset,
    fine: &FineGrid,
    config: &FitConfig,
    threads: usize,
) -> Result<ChainMaps> {
    let job = VoxelJob::new(dynamic, mask, idifs)?;
    let prepared = PreparedInputs::new(idifs, fine, config.rule)?;
    let base_layout = ParamLayout::new(preset, FitMode::Baseline, config.scaling)?;
    let multi_layout = ParamLayout::new(preset, FitMode::Multi, config.scaling)?;
    prepared.check_not_degenerate(&base_layout)?;
    let results = job.run(threads, |series| {
        let tac = voxel_tac(&job.grid, series)?;
        chain_prepared(tac.values(), &prepared, preset, config).map_err(|e| e.to_string())
    })?;
    let (base, multi): (Vec<_>, Vec<_>) = results
        .into_iter()
        .map(|r| match r {
            Ok(w) => (Ok(w.baseline), Ok(w.multi)),
            Err(e) => (Err(e.clone()), Err(e)),
        })
        .unzip();
    Ok(ChainMaps {
        baseline: job.assemble(&base_layout.reported_names(), base, &dynamic[0]),
        multi: job.assemble(&multi_layout.reported_names(), multi, &dynamic[0]),
    })
}
