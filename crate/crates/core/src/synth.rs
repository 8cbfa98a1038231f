//! Synthetic input functions, tissue curves and phantoms for testing.
//!
//! Tissue curves are generated with [`solve_ode_reference`], never with the
//! convolution used by the fitter, so round-trip tests compare two
//! independent discretizations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::OrganPreset;
use crate::input::{interp_to_fine, mix_input, InputFunctionSet};
use crate::model::{frame_average, solve_ode_reference, FineGrid, FrameGrid, KineticParams, Tac, DEFAULT_FINE_STEP_S};
use crate::volume::{LabelVolume, ScalarVolume, Spacing};

/// Gamma-variate bolus normalized to a peak of 1 at `t0 + shape*scale`.
fn gamma_variate(t: f64, t0: f64, shape: f64, scale: f64) -> f64 {
    if t <= t0 {
        return 0.0;
    }
    let x = (t - t0) / (shape * scale);
    (shape * (x.ln() + 1.0 - x)).exp()
}

/// Delays a fine-grid curve by `delay_s` (zero-filled, linear interpolation).
fn delay(curve: &[f64], step: f64, delay_s: f64) -> Vec<f64> {
    let shift = delay_s / step;
    (0..curve.len())
        .map(|i| {
            let src = i as f64 - shift;
            if src <= 0.0 {
                return if src == 0.0 { curve[0] } else { 0.0 };
            }
            let j = src.floor() as usize;
            let w = src - j as f64;
            if j + 1 >= curve.len() {
                curve[curve.len() - 1]
            } else {
                (1.0 - w) * curve[j] + w * curve[j + 1]
            }
        })
        .collect()
}

/// First-order (exponential) dispersion with unit gain.
fn disperse(curve: &[f64], step: f64, tau_s: f64) -> Vec<f64> {
    let decay = (-step / tau_s).exp();
    let mut y = 0.0;
    curve
        .iter()
        .map(|&x| {
            y = decay * y + (1.0 - decay) * x;
            y
        })
        .collect()
}

/// Continuous-time (fine-grid) versions of the four synthetic inputs.
#[derive(Clone, Debug)]
pub struct BolusCurves {
    pub fine: FineGrid,
    pub pa: Vec<f64>,
    pub aorta: Vec<f64>,
    pub pv: Vec<f64>,
    pub ureter: Vec<f64>,
}

/// Bolus curves on a fine grid reaching `end_s`.
pub fn synth_bolus_curves(end_s: f64, seed: u64) -> BolusCurves {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fine = FineGrid::new(DEFAULT_FINE_STEP_S, end_s).expect("positive step");
    let step = fine.step_s();

    let t0 = 20.0 + rng.gen_range(0.0..4.0);
    let shape = rng.gen_range(2.5..3.5);
    let scale = rng.gen_range(2.5..4.0);
    let peak = rng.gen_range(250.0..350.0);
    let tail = rng.gen_range(15.0..25.0);
    let pa: Vec<f64> = fine
        .times()
        .into_iter()
        .map(|t| {
            let bolus = peak * gamma_variate(t, t0, shape, scale);
            let since = (t - t0).max(0.0);
            let plasma = tail * (1.0 - (-since / 30.0).exp()) * (0.6 * (-since / 600.0).exp() + 0.4 * (-since / 6000.0).exp());
            bolus + plasma
        })
        .collect();

    let aorta = disperse(&delay(&pa, step, rng.gen_range(6.0..9.0)), step, rng.gen_range(3.0..6.0));
    let pv = disperse(&delay(&aorta, step, rng.gen_range(8.0..14.0)), step, rng.gen_range(25.0..45.0));

    let onset = rng.gen_range(120.0..180.0);
    let rise = rng.gen_range(600.0..1000.0);
    let level = rng.gen_range(30.0..60.0);
    let ureter = fine
        .times()
        .into_iter()
        .map(|t| {
            let x = ((t - onset).max(0.0)) / rise;
            level * (1.0 - (-x).exp()).powi(2)
        })
        .collect();

    BolusCurves { fine, pa, aorta, pv, ureter }
}

/// Frame-averaged synthetic input functions: a gamma-variate bolus in the
/// pulmonary artery, delayed and dispersed copies for the aorta and the
/// portal vein, and a late, monotonically rising ureter curve.
pub fn synth_bolus_idifs(grid: &FrameGrid, seed: u64) -> InputFunctionSet {
    let curves = synth_bolus_curves(grid.end_s(), seed);
    let fine = FineGrid::covering(grid, curves.fine.step_s()).expect("positive step");
    let avg = |c: &Vec<f64>| -> Tac {
        let mut c = c.clone();
        c.resize(fine.len(), *c.last().unwrap_or(&0.0));
        frame_average(&c, &fine, grid).expect("fine grid covers the frames")
    };
    InputFunctionSet::new(avg(&curves.aorta), avg(&curves.pv), avg(&curves.pa), avg(&curves.ureter))
        .expect("all curves share the grid")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseModel {
    /// Same standard deviation in every frame.
    #[default]
    Additive,
    /// Standard deviation scaled by `sqrt(mean duration / frame duration)`.
    DurationScaled,
}

/// A synthetic tissue curve together with the parameters that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTac {
    pub tac: Tac,
    pub truth: KineticParams,
    pub noise_sd: f64,
    pub seed: u64,
}

/// JSON sidecar recording the generating parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub truth: KineticParams,
    pub organ: crate::fitting::Organ,
    pub noise_sd: f64,
    pub noise_model: NoiseModel,
    pub seed: u64,
}

/// Generates a tissue curve by ODE integration, frame averaging and
/// seeded Gaussian noise.
pub fn synth_tac(
    truth: &KineticParams,
    idifs: &InputFunctionSet,
    preset: &OrganPreset,
    noise_sd: f64,
    seed: u64,
) -> Result<SynthTac> {
    synth_tac_with(truth, idifs, preset, noise_sd, NoiseModel::Additive, seed)
}

pub fn synth_tac_with(
    truth: &KineticParams,
    idifs: &InputFunctionSet,
    preset: &OrganPreset,
    noise_sd: f64,
    noise_model: NoiseModel,
    seed: u64,
) -> Result<SynthTac> {
    if !preset.contains(truth) {
        return Err(Error::InvalidParameter {
            name: "truth",
            value: f64::NAN,
            reason: format!("{truth:?} violates the {} preset bounds", preset.organ.name()),
        });
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "noise_sd",
            value: noise_sd,
            reason: "must be finite and non-negative".into(),
        });
    }
    let grid = idifs.grid();
    let fine = FineGrid::covering(grid, DEFAULT_FINE_STEP_S)?;
    let input = interp_to_fine(&mix_input(idifs, truth.weights())?, &fine)?;
    let curve = solve_ode_reference(truth, &input, &fine)?;
    let clean = frame_average(&curve, &fine, grid)?;
    if noise_sd == 0.0 {
        return Ok(SynthTac {
            tac: clean,
            truth: *truth,
            noise_sd,
            seed,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mean_duration = grid.total_duration_s() / grid.len() as f64;
    let values = clean
        .values()
        .iter()
        .zip(grid.frames())
        .map(|(v, frame)| {
            let sd = match noise_model {
                NoiseModel::Additive => noise_sd,
                NoiseModel::DurationScaled => noise_sd * (mean_duration / frame.duration_s).sqrt(),
            };
            v + sd * normal.sample(&mut rng)
        })
        .collect();
    Ok(SynthTac {
        tac: Tac::from_values(grid.clone(), values)?,
        truth: *truth,
        noise_sd,
        seed,
    })
}

/// Dynamic phantom split into two regions along x (labels 1 and 2).
#[derive(Clone, Debug)]
pub struct Phantom {
    pub frames: Vec<ScalarVolume>,
    pub mask: LabelVolume,
    pub truths: [KineticParams; 2],
}

/// Builds a phantom whose voxels in region `r` follow `truths[r]`, with
/// independent seeded noise per voxel when `noise_sd > 0`.
pub fn two_region_phantom(
    dims: [usize; 3],
    spacing: Spacing,
    idifs: &InputFunctionSet,
    preset: &OrganPreset,
    truths: [KineticParams; 2],
    noise_sd: f64,
    seed: u64,
) -> Result<Phantom> {
    let n: usize = dims.iter().product();
    let mut mask = LabelVolume::empty(dims, spacing)?;
    let half = dims[0].div_ceil(2);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                mask.set(x, y, z, if x < half { 1 } else { 2 });
            }
        }
    }
    let clean = [
        synth_tac(&truths[0], idifs, preset, 0.0, 0)?.tac,
        synth_tac(&truths[1], idifs, preset, 0.0, 0)?.tac,
    ];
    let grid = idifs.grid();
    let mut data = vec![vec![0f32; n]; grid.len()];
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for (i, &label) in mask.labels().iter().enumerate() {
        let base = clean[label as usize - 1].values();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        for (f, frame) in data.iter_mut().enumerate() {
            let noise = if noise_sd > 0.0 { noise_sd * normal.sample(&mut rng) } else { 0.0 };
            frame[i] = (base[f] + noise) as f32;
        }
    }
    let frames = data
        .into_iter()
        .map(|d| ScalarVolume::new(dims, spacing, d))
        .collect::<Result<Vec<_>>>()?;
    Ok(Phantom { frames, mask, truths })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argmax(v: &[f64]) -> usize {
        v.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
            .0
    }

    #[test]
    fn peak_order_and_non_negativity() {
        let grid = FrameGrid::protocol();
        for seed in 0..100 {
            let set = synth_bolus_idifs(&grid, seed);
            let peaks = [&set.pa, &set.aorta, &set.pv, &set.ureter].map(|t| argmax(t.values()));
            assert!(peaks[0] < peaks[1] && peaks[1] < peaks[2] && peaks[2] < peaks[3], "seed {seed}: {peaks:?}");
            for t in set.curves() {
                assert!(t.values().iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn dispersion_conserves_area() {
        for seed in 0..20 {
            let c = synth_bolus_curves(3900.0, seed);
            let trapz = |v: &[f64]| {
                v.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum::<f64>() * c.fine.step_s()
            };
            let (pa, ao) = (trapz(&c.pa), trapz(&c.aorta));
            assert!((ao - pa).abs() / pa < 0.05, "seed {seed}: {ao} vs {pa}");
        }
    }

    #[test]
    fn blood_only_tac_is_the_frame_averaged_input() {
        let grid = FrameGrid::protocol();
        let idifs = synth_bolus_idifs(&grid, 1);
        let truth = KineticParams { v_b: 1.0, ..KineticParams::with_aorta_input(0.5, 0.5, 0.05, 1.0) };
        let out = synth_tac(&truth, &idifs, &OrganPreset::generic(), 0.0, 0).unwrap();
        let fine = FineGrid::covering(&grid, DEFAULT_FINE_STEP_S).unwrap();
        let a = interp_to_fine(&idifs.aorta, &fine).unwrap();
        let expected = frame_average(&a, &fine, &grid).unwrap();
        assert_eq!(out.tac, expected);
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let grid = FrameGrid::protocol();
        let idifs = synth_bolus_idifs(&grid, 3);
        let truth = KineticParams { beta: 0.3, alpha: 0.7, ..KineticParams::with_aorta_input(0.5, 0.5, 0.05, 0.1) };
        let a = synth_tac(&truth, &idifs, &OrganPreset::liver(), 0.5, 42).unwrap();
        let b = synth_tac(&truth, &idifs, &OrganPreset::liver(), 0.5, 42).unwrap();
        let c = synth_tac(&truth, &idifs, &OrganPreset::liver(), 0.5, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.tac, c.tac);
        let scaled = synth_tac_with(&truth, &idifs, &OrganPreset::liver(), 0.5, NoiseModel::DurationScaled, 42).unwrap();
        assert_ne!(scaled.tac, a.tac);
    }

    #[test]
    fn out_of_preset_truth_is_rejected() {
        let idifs = synth_bolus_idifs(&FrameGrid::protocol(), 0);
        let lung_weights = KineticParams { gamma: 0.2, ..KineticParams::with_aorta_input(0.5, 0.5, 0.05, 0.1) };
        assert!(synth_tac(&lung_weights, &idifs, &OrganPreset::liver(), 0.0, 0).is_err());
        let big_vb = KineticParams::with_aorta_input(0.5, 0.5, 0.05, 0.2);
        assert!(synth_tac(&big_vb, &idifs, &OrganPreset::lung(), 0.0, 0).is_err());
    }
}
