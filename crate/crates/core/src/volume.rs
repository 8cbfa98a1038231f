//! Dense 3-D voxel grids. Storage order is x fastest, then y, then z.

use crate::error::{Error, Result};

pub type Dims = [usize; 3];
pub type Spacing = [f64; 3];

fn check_geometry(dims: Dims, spacing: Spacing) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::DimensionMismatch(format!("zero-sized axis in {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::DimensionMismatch(format!("non-positive spacing {spacing:?}")));
    }
    Ok(())
}

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

#[inline]
pub fn voxel_coords(dims: Dims, index: usize) -> [usize; 3] {
    let x = index % dims[0];
    let y = (index / dims[0]) % dims[1];
    let z = index / (dims[0] * dims[1]);
    [x, y, z]
}

/// Voxel-center position in mm, with the grid corner at the origin.
#[inline]
pub fn voxel_center_mm(spacing: Spacing, coords: [usize; 3]) -> [f64; 3] {
    [
        (coords[0] as f64 + 0.5) * spacing[0],
        (coords[1] as f64 + 0.5) * spacing[1],
        (coords[2] as f64 + 0.5) * spacing[2],
    ]
}

/// Continuous-valued volume: a PET frame (kBq/ml), a CT (HU) or a parametric map.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume {
    dims: Dims,
    spacing: Spacing,
    origin: Option<[f64; 3]>,
    data: Vec<f32>,
}

impl ScalarVolume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        check_geometry(dims, spacing)?;
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} values for dims {dims:?} ({n} voxels)",
                data.len()
            )));
        }
        Ok(ScalarVolume {
            dims,
            spacing,
            origin: None,
            data,
        })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f32) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.iter().product()])
    }

    pub fn with_origin(mut self, origin: Option<[f64; 3]>) -> Self {
        self.origin = origin;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn origin(&self) -> Option<[f64; 3]> {
        self.origin
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[linear_index(self.dims, x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f32) {
        let i = linear_index(self.dims, x, y, z);
        self.data[i] = value;
    }
}

/// Integer label volume; label 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    spacing: Spacing,
    labels: Vec<u16>,
}

impl LabelVolume {
    pub fn new(dims: Dims, spacing: Spacing, labels: Vec<u16>) -> Result<Self> {
        check_geometry(dims, spacing)?;
        let n = dims.iter().product::<usize>();
        if labels.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for dims {dims:?} ({n} voxels)",
                labels.len()
            )));
        }
        Ok(LabelVolume {
            dims,
            spacing,
            labels,
        })
    }

    pub fn empty(dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::new(dims, spacing, vec![0; dims.iter().product()])
    }

    /// An empty volume on the same grid.
    pub fn blank_like(&self) -> Self {
        LabelVolume {
            dims: self.dims,
            spacing: self.spacing,
            labels: vec![0; self.labels.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u16] {
        &mut self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.labels[linear_index(self.dims, x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u16) {
        let i = linear_index(self.dims, x, y, z);
        self.labels[i] = label;
    }

    pub fn count_nonzero(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn count_label(&self, label: u16) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Sorted distinct non-zero labels.
    pub fn distinct_labels(&self) -> Vec<u16> {
        let mut seen = vec![false; u16::MAX as usize + 1];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..=u16::MAX).filter(|&l| seen[l as usize]).collect()
    }

    /// Binary mask (label 1) of the voxels carrying `label`.
    pub fn select(&self, label: u16) -> Result<LabelVolume> {
        if label == 0 || !self.labels.contains(&label) {
            return Err(Error::LabelAbsent(label));
        }
        Ok(self.map_labels(|l| u16::from(l == label)))
    }

    /// Binary mask (label 1) of all non-zero voxels.
    pub fn binarize(&self) -> LabelVolume {
        self.map_labels(|l| u16::from(l != 0))
    }

    fn map_labels(&self, f: impl Fn(u16) -> u16) -> LabelVolume {
        LabelVolume {
            dims: self.dims,
            spacing: self.spacing,
            labels: self.labels.iter().map(|&l| f(l)).collect(),
        }
    }

    /// Linear indices of all non-zero voxels, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != 0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn same_geometry(&self, dims: Dims, spacing: Spacing) -> bool {
        self.dims == dims
            && self
                .spacing
                .iter()
                .zip(spacing.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-6 * a.abs().max(1.0))
    }

    pub fn to_scalar(&self) -> ScalarVolume {
        ScalarVolume {
            dims: self.dims,
            spacing: self.spacing,
            origin: None,
            data: self.labels.iter().map(|&l| l as f32).collect(),
        }
    }

    /// Converts a scalar volume holding integral values in `0..=65535`.
    pub fn from_scalar(volume: &ScalarVolume) -> Result<Self> {
        let labels = volume
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v.fract() == 0.0 && (0.0..=u16::MAX as f32).contains(&v) {
                    Ok(v as u16)
                } else {
                    Err(Error::DimensionMismatch(format!(
                        "voxel {i} holds {v}, not a label value"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        LabelVolume::new(volume.dims(), volume.spacing(), labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip() {
        let dims = [3, 4, 5];
        for i in 0..60 {
            let [x, y, z] = voxel_coords(dims, i);
            assert_eq!(linear_index(dims, x, y, z), i);
        }
    }

    #[test]
    fn geometry_is_validated() {
        assert!(ScalarVolume::new([2, 2, 2], [1.0; 3], vec![0.0; 7]).is_err());
        assert!(ScalarVolume::new([2, 0, 2], [1.0; 3], vec![]).is_err());
        assert!(LabelVolume::new([1, 1, 1], [1.0, 0.0, 1.0], vec![0]).is_err());
    }

    #[test]
    fn select_and_distinct_labels() {
        let v = LabelVolume::new([4, 1, 1], [1.0; 3], vec![0, 3, 7, 3]).unwrap();
        assert_eq!(v.distinct_labels(), vec![3, 7]);
        assert_eq!(v.select(3).unwrap().labels(), &[0, 1, 0, 1]);
        assert!(matches!(v.select(5), Err(Error::LabelAbsent(5))));
        assert!(LabelVolume::from_scalar(&ScalarVolume::new([1, 1, 1], [1.0; 3], vec![1.5]).unwrap()).is_err());
    }
}
