//! Image-derived input functions: extraction from masked dynamic volumes,
//! mixing into a single input A(t), and resampling onto the fine grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FineGrid, FrameGrid, Tac};
use crate::volume::{LabelVolume, ScalarVolume};

/// The four blood-pool curves on one shared frame grid.
#[derive(Clone, Debug, PartialEq)]
pub struct InputFunctionSet {
    pub aorta: Tac,
    pub pv: Tac,
    pub pa: Tac,
    pub ureter: Tac,
}

/// Names in the order of [`InputFunctionSet::curves`].
pub const IDIF_NAMES: [&str; 4] = ["aorta", "pv", "pa", "ureter"];

impl InputFunctionSet {
    pub fn new(aorta: Tac, pv: Tac, pa: Tac, ureter: Tac) -> Result<Self> {
        for (name, tac) in IDIF_NAMES[1..].iter().zip([&pv, &pa, &ureter]) {
            if tac.grid() != aorta.grid() {
                return Err(Error::GridMismatch(format!(
                    "{name} input function is not on the aorta frame grid"
                )));
            }
        }
        Ok(InputFunctionSet { aorta, pv, pa, ureter })
    }

    /// A set where only the aorta curve is populated; the others are zero.
    pub fn aorta_only(aorta: Tac) -> Self {
        let zero = Tac::new(aorta.grid().clone(), vec![0.0; aorta.len()]).expect("zero curve is valid");
        InputFunctionSet {
            pv: zero.clone(),
            pa: zero.clone(),
            ureter: zero,
            aorta,
        }
    }

    pub fn grid(&self) -> &FrameGrid {
        self.aorta.grid()
    }

    pub fn curves(&self) -> [&Tac; 4] {
        [&self.aorta, &self.pv, &self.pa, &self.ureter]
    }
}

/// Mixing weights of the aorta, portal vein, pulmonary artery and ureter curves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl MixWeights {
    pub const AORTA_ONLY: MixWeights = MixWeights {
        alpha: 1.0,
        beta: 0.0,
        gamma: 0.0,
        delta: 0.0,
    };

    pub fn as_array(&self) -> [f64; 4] {
        [self.alpha, self.beta, self.gamma, self.delta]
    }
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Mean activity over the mask's non-zero voxels, per frame.
///
/// Frames are processed in parallel; each frame's mean uses compensated
/// summation, so the result does not depend on scheduling.
pub fn extract_idif(dynamic: &[ScalarVolume], mask: &LabelVolume, grid: &FrameGrid) -> Result<Tac> {
    if dynamic.len() != grid.len() {
        return Err(Error::LengthMismatch {
            expected: grid.len(),
            actual: dynamic.len(),
            context: "dynamic volumes vs frames",
        });
    }
    let voxels = mask.indices();
    if voxels.is_empty() {
        return Err(Error::EmptyMask("input-function mask has no voxels".into()));
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
    let values: Vec<f64> = dynamic
        .par_iter()
        .map(|vol| masked_mean(vol.data(), &voxels))
        .collect();
    Tac::from_values(grid.clone(), values)
}

pub(crate) fn masked_mean(data: &[f32], voxels: &[usize]) -> f64 {
    let mut acc = CompensatedSum::default();
    for &i in voxels {
        acc.add(data[i] as f64);
    }
    acc.total() / voxels.len() as f64
}

/// `A = alpha*aorta + beta*pv + gamma*pa + delta*ureter`, frame by frame.
pub fn mix_input(set: &InputFunctionSet, weights: MixWeights) -> Result<Tac> {
    for (name, w) in IDIF_NAMES.iter().zip(weights.as_array()) {
        if !w.is_finite() {
            return Err(Error::InvalidParameter {
                name,
                value: w,
                reason: "weight is not finite".into(),
            });
        }
    }
    let curves = set.curves();
    if curves.iter().any(|c| c.grid() != set.grid()) {
        return Err(Error::GridMismatch("input functions are not on one frame grid".into()));
    }
    let values = mix_values(
        [curves[0].values(), curves[1].values(), curves[2].values(), curves[3].values()],
        weights,
    );
    Tac::from_values(set.grid().clone(), values)
}

/// Weighted sum of four equally long sample vectors.
pub(crate) fn mix_values(curves: [&[f64]; 4], weights: MixWeights) -> Vec<f64> {
    let w = weights.as_array();
    (0..curves[0].len())
        .map(|i| w[0] * curves[0][i] + w[1] * curves[1][i] + w[2] * curves[2][i] + w[3] * curves[3][i])
        .collect()
}

/// Piecewise-linear interpolation through `(frame midpoint, value)` with
/// constant extrapolation on both sides.
pub fn interp_to_fine(tac: &Tac, fine: &FineGrid) -> Result<Vec<f64>> {
    if tac.is_empty() {
        return Err(Error::InvalidTac("empty curve".into()));
    }
    let nodes = tac.grid().midpoints();
    Ok(interp_nodes(&nodes, tac.values(), fine))
}

pub(crate) fn interp_nodes(nodes: &[f64], values: &[f64], fine: &FineGrid) -> Vec<f64> {
    let last = nodes.len() - 1;
    let mut seg = 0;
    (0..fine.len())
        .map(|i| {
            let t = fine.time(i);
            if t <= nodes[0] {
                return values[0];
            }
            if t >= nodes[last] {
                return values[last];
            }
            while nodes[seg + 1] < t {
                seg += 1;
            }
            let (t0, t1) = (nodes[seg], nodes[seg + 1]);
            let w = (t - t0) / (t1 - t0);
            values[seg] + w * (values[seg + 1] - values[seg])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(n: usize) -> FrameGrid {
        FrameGrid::from_spec(&[(n, 10.0)]).unwrap()
    }

    fn constant(grid: &FrameGrid, v: f64) -> Tac {
        Tac::new(grid.clone(), vec![v; grid.len()]).unwrap()
    }

    #[test]
    fn uniform_volume_gives_constant_idif() {
        let g = grid(3);
        let frames = vec![ScalarVolume::filled([3, 3, 2], [1.0; 3], 5.0).unwrap(); 3];
        let mut mask = LabelVolume::empty([3, 3, 2], [1.0; 3]).unwrap();
        mask.set(1, 1, 0, 1);
        mask.set(2, 0, 1, 4);
        let tac = extract_idif(&frames, &mask, &g).unwrap();
        assert_eq!(tac.values(), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn two_voxel_mean() {
        let g = grid(1);
        let mut vol = ScalarVolume::filled([2, 1, 1], [1.0; 3], 0.0).unwrap();
        vol.set(0, 0, 0, 2.0);
        vol.set(1, 0, 0, 4.0);
        let mask = LabelVolume::new([2, 1, 1], [1.0; 3], vec![1, 1]).unwrap();
        assert_eq!(extract_idif(&[vol], &mask, &g).unwrap().values(), &[3.0]);
    }

    #[test]
    fn single_voxel_mask_returns_its_time_course() {
        let g = grid(4);
        let frames: Vec<ScalarVolume> = (0..4)
            .map(|f| {
                let data = (0..8).map(|i| (i * 10 + f) as f32).collect();
                ScalarVolume::new([2, 2, 2], [1.0; 3], data).unwrap()
            })
            .collect();
        let mut mask = LabelVolume::empty([2, 2, 2], [1.0; 3]).unwrap();
        mask.set(1, 0, 1, 1); // linear index 5
        let tac = extract_idif(&frames, &mask, &g).unwrap();
        assert_eq!(tac.values(), &[50.0, 51.0, 52.0, 53.0]);
    }

    #[test]
    fn extraction_errors() {
        let g = grid(2);
        let frames = vec![ScalarVolume::filled([2, 2, 2], [1.0; 3], 1.0).unwrap(); 2];
        let empty = LabelVolume::empty([2, 2, 2], [1.0; 3]).unwrap();
        assert!(matches!(extract_idif(&frames, &empty, &g), Err(Error::EmptyMask(_))));
        let other = LabelVolume::new([1, 1, 1], [1.0; 3], vec![1]).unwrap();
        assert!(matches!(extract_idif(&frames, &other, &g), Err(Error::DimensionMismatch(_))));
        let mut ok = empty.clone();
        ok.set(0, 0, 0, 1);
        assert!(matches!(extract_idif(&frames[..1], &ok, &g), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn mixing_examples() {
        let g = grid(5);
        let aorta = Tac::new(g.clone(), vec![0.0, 30.0, 20.0, 10.0, 5.0]).unwrap();
        let set = InputFunctionSet::new(aorta.clone(), constant(&g, 7.0), constant(&g, 9.0), constant(&g, 11.0)).unwrap();
        assert_eq!(mix_input(&set, MixWeights::AORTA_ONLY).unwrap(), aorta);

        let same = InputFunctionSet::new(aorta.clone(), aorta.clone(), constant(&g, 0.0), constant(&g, 0.0)).unwrap();
        let half = MixWeights { alpha: 0.5, beta: 0.5, gamma: 0.0, delta: 0.0 };
        assert_eq!(mix_input(&same, half).unwrap().values(), aorta.values());

        let set = InputFunctionSet::new(constant(&g, 10.0), constant(&g, 20.0), constant(&g, 0.0), constant(&g, 0.0)).unwrap();
        let w = MixWeights { alpha: 0.7, beta: 0.3, gamma: 0.0, delta: 0.0 };
        for v in mix_input(&set, w).unwrap().values() {
            assert!((v - 13.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_grids_are_rejected() {
        let a = constant(&grid(3), 1.0);
        let b = constant(&FrameGrid::from_spec(&[(3, 5.0)]).unwrap(), 1.0);
        assert!(matches!(
            InputFunctionSet::new(a.clone(), b, a.clone(), a.clone()),
            Err(Error::GridMismatch(_))
        ));
        let set = InputFunctionSet::aorta_only(a);
        let w = MixWeights { alpha: f64::NAN, ..MixWeights::AORTA_ONLY };
        assert!(mix_input(&set, w).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let g = grid(2); // midpoints 5, 15
        let fine = FineGrid::new(1.0, 20.0).unwrap();
        let c = interp_to_fine(&constant(&g, 2.5), &fine).unwrap();
        assert!(c.iter().all(|v| *v == 2.5));

        let tac = Tac::new(g, vec![0.0, 10.0]).unwrap();
        let s = interp_to_fine(&tac, &fine).unwrap();
        assert_eq!(s[10], 5.0);
        assert_eq!(s[5], 0.0);
        assert_eq!(s[15], 10.0);
        assert_eq!(s[0], 0.0);
        assert_eq!(s[20], 10.0);
    }

    proptest! {
        #[test]
        fn mix_is_linear_in_each_weight(
            vals in prop::collection::vec(0.0f64..100.0, 16),
            alpha in 0.0f64..1.0, beta in 0.0f64..1.0, eps in -0.5f64..0.5,
        ) {
            let g = grid(4);
            let tac = |k: usize| Tac::new(g.clone(), vals[4 * k..4 * k + 4].to_vec()).unwrap();
            let set = InputFunctionSet::new(tac(0), tac(1), tac(2), tac(3)).unwrap();
            let w = MixWeights { alpha, beta, gamma: 0.2, delta: -0.1 };
            let base = mix_input(&set, w).unwrap();
            let bumped = mix_input(&set, MixWeights { alpha: alpha + eps, ..w }).unwrap();
            for i in 0..4 {
                let diff = bumped.values()[i] - base.values()[i];
                prop_assert!((diff - eps * set.aorta.values()[i]).abs() < 1e-10);
            }
        }

        #[test]
        fn interpolation_does_not_overshoot(vals in prop::collection::vec(-50.0f64..50.0, 1..12)) {
            let g = FrameGrid::from_spec(&[(vals.len(), 7.0)]).unwrap();
            let tac = Tac::raw(g.clone(), vals.clone()).unwrap();
            let fine = FineGrid::covering(&g, 0.5).unwrap();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in interp_to_fine(&tac, &fine).unwrap() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }

        #[test]
        fn extraction_is_count_weighted_over_partitions(
            data in prop::collection::vec(-1000.0f32..1000.0, 27),
            split in prop::collection::vec(0u16..3, 27),
        ) {
            let g = grid(1);
            let vol = ScalarVolume::new([3, 3, 3], [1.0; 3], data).unwrap();
            let labels: Vec<u16> = split.iter().map(|&s| s + 1).collect();
            let whole = LabelVolume::new([3, 3, 3], [1.0; 3], vec![1; 27]).unwrap();
            let parts = LabelVolume::new([3, 3, 3], [1.0; 3], labels).unwrap();
            let total = extract_idif(std::slice::from_ref(&vol), &whole, &g).unwrap().values()[0];
            let mut weighted = 0.0;
            for label in parts.distinct_labels() {
                let m = parts.select(label).unwrap();
                let n = m.count_nonzero() as f64;
                weighted += n * extract_idif(std::slice::from_ref(&vol), &m, &g).unwrap().values()[0];
            }
            prop_assert!((weighted / 27.0 - total).abs() < 1e-10 * total.abs().max(1.0));
        }
    }
}
