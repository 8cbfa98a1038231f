//! Mask post-processing for input-function regions.
//!
//! Two operations derive blood-pool masks from organ segmentations:
//! [`nearest_component`] keeps the part of a combined portal/splenic vein
//! label closest to the liver, and [`renal_pelvis_surrogate`] carves a
//! renal-pelvis mask out of an ellipsoid around each kidney.
//!
//! Coordinates are in mm with voxel centers at `(i + 0.5) * spacing`.
//! 3-D components use 26-connectivity, in-slice components 8-connectivity.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{linear_index, voxel_center_mm, voxel_coords, Dims, LabelVolume, Spacing};

pub const DEFAULT_RADII_MM: [f64; 3] = [40.0, 40.0, 40.0];

/// A connected set of voxels, in ascending linear-index order.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub voxels: Vec<usize>,
    pub centroid_mm: [f64; 3],
}

impl Component {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }
}

fn centroid(voxels: &[usize], dims: Dims, spacing: Spacing) -> [f64; 3] {
    let mut sum = [0.0; 3];
    for &i in voxels {
        let c = voxel_center_mm(spacing, voxel_coords(dims, i));
        for k in 0..3 {
            sum[k] += c[k];
        }
    }
    let n = voxels.len() as f64;
    [sum[0] / n, sum[1] / n, sum[2] / n]
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Spacing-weighted centroid of the voxels carrying `label`.
pub fn center_of_mass(mask: &LabelVolume, label: u16) -> Result<[f64; 3]> {
    let voxels: Vec<usize> = mask
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == label)
        .map(|(i, _)| i)
        .collect();
    if voxels.is_empty() || label == 0 {
        return Err(Error::LabelAbsent(label));
    }
    Ok(centroid(&voxels, mask.dims(), mask.spacing()))
}

/// Voxels whose centers satisfy `sum(((c - center) / r)^2) <= 1`, as label 1.
pub fn ellipsoid_mask(center: [f64; 3], radii: [f64; 3], template: &LabelVolume) -> Result<LabelVolume> {
    for (name, r) in ["rx", "ry", "rz"].into_iter().zip(radii) {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::InvalidParameter {
                name,
                value: r,
                reason: "ellipsoid radius must be positive".into(),
            });
        }
    }
    let dims = template.dims();
    let spacing = template.spacing();
    let mut out = template.blank_like();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let c = voxel_center_mm(spacing, [x, y, z]);
                let q: f64 = (0..3).map(|k| ((c[k] - center[k]) / radii[k]).powi(2)).sum();
                if q <= 1.0 {
                    out.set(x, y, z, 1);
                }
            }
        }
    }
    Ok(out)
}

/// 26-connected components of the non-zero voxels, ordered by their first voxel.
pub fn connected_components(mask: &LabelVolume) -> Vec<Component> {
    let dims = mask.dims();
    let set: Vec<bool> = mask.labels().iter().map(|&l| l != 0).collect();
    components_3d(&set, dims)
        .into_iter()
        .map(|voxels| Component {
            centroid_mm: centroid(&voxels, dims, mask.spacing()),
            voxels,
        })
        .collect()
}

fn components_3d(set: &[bool], dims: Dims) -> Vec<Vec<usize>> {
    let mut seen = vec![false; set.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..set.len() {
        if !set[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut voxels = Vec::new();
        while let Some(i) = queue.pop_front() {
            voxels.push(i);
            let [x, y, z] = voxel_coords(dims, i);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if nx < 0 || ny < 0 || nz < 0 {
                            continue;
                        }
                        let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                        if nx >= dims[0] || ny >= dims[1] || nz >= dims[2] {
                            continue;
                        }
                        let j = linear_index(dims, nx, ny, nz);
                        if set[j] && !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        voxels.sort_unstable();
        out.push(voxels);
    }
    out
}

/// 8-connected components within axial slice `z`, as linear volume indices.
fn components_in_slice(set: &[bool], dims: Dims, z: usize) -> Vec<Vec<usize>> {
    let (nx, ny) = (dims[0], dims[1]);
    let mut seen = vec![false; nx * ny];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..nx * ny {
        if seen[start] || !set[start + nx * ny * z] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut voxels = Vec::new();
        while let Some(p) = queue.pop_front() {
            voxels.push(p + nx * ny * z);
            let (x, y) = ((p % nx) as i64, (p / nx) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (qx, qy) = (x + dx, y + dy);
                    if qx < 0 || qy < 0 || qx >= nx as i64 || qy >= ny as i64 {
                        continue;
                    }
                    let q = qx as usize + nx * qy as usize;
                    if !seen[q] && set[q + nx * ny * z] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        voxels.sort_unstable();
        out.push(voxels);
    }
    out
}

/// The 26-connected component whose centroid is closest to `reference_mm`;
/// ties go to the larger component, then to the one found first.
pub fn nearest_component(mask: &LabelVolume, reference_mm: [f64; 3]) -> Result<LabelVolume> {
    let comps = connected_components(mask);
    let best = comps
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| {
            distance(a.centroid_mm, reference_mm)
                .total_cmp(&distance(b.centroid_mm, reference_mm))
                .then(b.len().cmp(&a.len()))
                .then(ia.cmp(ib))
        })
        .map(|(_, c)| c)
        .ok_or_else(|| Error::EmptyMask("no voxels to select a component from".into()))?;
    let mut out = mask.blank_like();
    for &i in &best.voxels {
        out.labels_mut()[i] = mask.labels()[i];
    }
    Ok(out)
}

/// Per-kidney summary of the surrogate construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KidneyReport {
    /// Source label, or the component ordinal for single-label masks.
    pub id: u16,
    pub kidney_voxels: usize,
    pub centroid_mm: [f64; 3],
    pub ellipsoid_voxels: usize,
    pub surrogate_voxels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenalPelvisReport {
    pub radii_mm: [f64; 3],
    pub kidneys: Vec<KidneyReport>,
    pub surrogate_voxels: usize,
}

/// Splits a kidney mask into individual kidneys: by label when several
/// labels are present, otherwise by 3-D connected components.
fn split_kidneys(mask: &LabelVolume) -> Vec<(u16, Vec<usize>)> {
    let labels = mask.distinct_labels();
    if labels.len() > 1 {
        labels
            .into_iter()
            .map(|l| {
                let voxels = mask
                    .labels()
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v == l)
                    .map(|(i, _)| i)
                    .collect();
                (l, voxels)
            })
            .collect()
    } else {
        connected_components(mask)
            .into_iter()
            .enumerate()
            .map(|(k, c)| ((k + 1) as u16, c.voxels))
            .collect()
    }
}

/// Renal-pelvis surrogate (label 1) derived from a kidney mask.
pub fn renal_pelvis_surrogate(kidney_mask: &LabelVolume, radii_mm: [f64; 3]) -> Result<LabelVolume> {
    renal_pelvis_surrogate_report(kidney_mask, radii_mm).map(|(m, _)| m)
}

/// For each kidney: an ellipsoid around its centroid minus all kidney
/// voxels; in every axial slice the largest 8-connected remainder is kept
/// (equal sizes resolved by centroid distance to the kidney, then scan
/// order). The union over slices and kidneys forms the surrogate.
pub fn renal_pelvis_surrogate_report(
    kidney_mask: &LabelVolume,
    radii_mm: [f64; 3],
) -> Result<(LabelVolume, RenalPelvisReport)> {
    let kidneys = split_kidneys(kidney_mask);
    if kidneys.is_empty() {
        return Err(Error::EmptyMask("kidney mask has no voxels".into()));
    }
    let dims = kidney_mask.dims();
    let spacing = kidney_mask.spacing();
    let mut out = kidney_mask.blank_like();
    let mut reports = Vec::with_capacity(kidneys.len());

    for (id, voxels) in kidneys {
        let center = centroid(&voxels, dims, spacing);
        let ellipsoid = ellipsoid_mask(center, radii_mm, kidney_mask)?;
        let candidates: Vec<bool> = ellipsoid
            .labels()
            .iter()
            .zip(kidney_mask.labels())
            .map(|(&e, &k)| e != 0 && k == 0)
            .collect();
        let mut kept = 0;
        for z in 0..dims[2] {
            let comps = components_in_slice(&candidates, dims, z);
            let best = comps
                .iter()
                .map(|c| (c, distance(centroid(c, dims, spacing), center)))
                .enumerate()
                .min_by(|(ia, (a, da)), (ib, (b, db))| {
                    b.len().cmp(&a.len()).then(da.total_cmp(db)).then(ia.cmp(ib))
                })
                .map(|(_, (c, _))| c);
            if let Some(c) = best {
                for &i in c {
                    if out.labels()[i] == 0 {
                        out.labels_mut()[i] = 1;
                    }
                }
                kept += c.len();
            }
        }
        reports.push(KidneyReport {
            id,
            kidney_voxels: voxels.len(),
            centroid_mm: center,
            ellipsoid_voxels: ellipsoid.count_nonzero(),
            surrogate_voxels: kept,
        });
    }

    let total = out.count_nonzero();
    if total == 0 {
        return Err(Error::EmptyMask(format!(
            "renal pelvis surrogate is empty; radii {radii_mm:?} mm are too small or the kidney fills the ellipsoid"
        )));
    }
    Ok((
        out,
        RenalPelvisReport {
            radii_mm,
            kidneys: reports,
            surrogate_voxels: total,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(dims: Dims) -> LabelVolume {
        LabelVolume::empty(dims, [1.0; 3]).unwrap()
    }

    #[test]
    fn single_voxel_centroid() {
        let mut m = vol([5, 5, 6]);
        m.set(2, 3, 4, 7);
        assert_eq!(center_of_mass(&m, 7).unwrap(), [2.5, 3.5, 4.5]);
        assert!(matches!(center_of_mass(&m, 1), Err(Error::LabelAbsent(1))));
    }

    #[test]
    fn symmetric_and_l_shaped_centroids() {
        let mut m = vol([6, 6, 6]);
        m.set(1, 2, 3, 1);
        m.set(4, 2, 3, 1);
        assert_eq!(center_of_mass(&m, 1).unwrap()[0], 3.0);

        let mut l = LabelVolume::empty([4, 4, 4], [1.5, 2.0, 0.5]).unwrap();
        let pts = [[0, 0, 0], [1, 0, 0], [0, 1, 0]];
        for p in pts {
            l.set(p[0], p[1], p[2], 1);
        }
        let mut expected = [0.0; 3];
        for p in pts {
            let c = voxel_center_mm([1.5, 2.0, 0.5], p);
            for k in 0..3 {
                expected[k] += c[k] / 3.0;
            }
        }
        let got = center_of_mass(&l, 1).unwrap();
        for k in 0..3 {
            assert!((got[k] - expected[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn ellipsoid_extremes() {
        let t = vol([4, 5, 6]);
        let all = ellipsoid_mask([2.0, 2.0, 2.0], [1e3; 3], &t).unwrap();
        assert_eq!(all.count_nonzero(), 120);
        let none = ellipsoid_mask([1.0, 1.0, 1.0], [0.4; 3], &t).unwrap();
        assert_eq!(none.count_nonzero(), 0);
        assert!(ellipsoid_mask([1.0; 3], [1.0, 0.0, 1.0], &t).is_err());
    }

    #[test]
    fn ellipsoid_matches_brute_force_ball() {
        let t = vol([9, 9, 9]);
        let center = voxel_center_mm([1.0; 3], [4, 4, 4]);
        let got = ellipsoid_mask(center, [2.0; 3], &t).unwrap();
        let mut count = 0;
        for z in 0..9i32 {
            for y in 0..9i32 {
                for x in 0..9i32 {
                    if (x - 4).pow(2) + (y - 4).pow(2) + (z - 4).pow(2) <= 4 {
                        count += 1;
                    }
                }
            }
        }
        assert_eq!(count, 33);
        assert_eq!(got.count_nonzero(), count);
    }

    #[test]
    fn solid_ball_kidney_leaves_no_surrogate() {
        let t = vol([15, 15, 15]);
        let center = voxel_center_mm([1.0; 3], [7, 7, 7]);
        let kidney = ellipsoid_mask(center, [6.0; 3], &t).unwrap();
        let err = renal_pelvis_surrogate(&kidney, [3.0; 3]);
        assert!(matches!(err, Err(Error::EmptyMask(_))));
    }

    #[test]
    fn larger_blob_is_kept_per_slice() {
        // A kidney wall at x = 4 splits the ellipsoid remainder into two
        // parts per slice; the volume edge clips the left side, so the
        // right side (x > 4) is larger and must be kept.
        let dims = [14, 12, 3];
        let mut kidney = vol(dims);
        for z in 0..3 {
            for y in 0..12 {
                kidney.set(4, y, z, 1);
            }
        }
        let (surrogate, _) = renal_pelvis_surrogate_report(&kidney, [5.6, 5.6, 5.6]).unwrap();
        let center = center_of_mass(&kidney, 1).unwrap();
        let ell = ellipsoid_mask(center, [5.6; 3], &kidney).unwrap();
        for z in 0..3 {
            for y in 0..12 {
                for x in 0..14 {
                    let expected = ell.get(x, y, z) != 0 && x > 4;
                    assert_eq!(surrogate.get(x, y, z) != 0, expected, "({x},{y},{z})");
                }
            }
        }
    }

    #[test]
    fn nearest_component_examples() {
        let mut m = vol([60, 3, 3]);
        m.set(5, 1, 1, 1);
        m.set(50, 1, 1, 1);
        let reference = [0.5, 1.5, 1.5];
        let kept = nearest_component(&m, reference).unwrap();
        assert_eq!(kept.indices(), vec![linear_index([60, 3, 3], 5, 1, 1)]);

        let mut single = vol([4, 4, 4]);
        single.set(1, 1, 1, 3);
        single.set(2, 2, 2, 3);
        assert_eq!(nearest_component(&single, [100.0; 3]).unwrap(), single);
        assert!(nearest_component(&vol([2, 2, 2]), [0.0; 3]).is_err());
    }

    #[test]
    fn nearest_component_tie_prefers_larger() {
        let mut m = vol([11, 3, 3]);
        m.set(0, 1, 1, 1); // centroid x = 0.5
        m.set(10, 0, 1, 1); // two voxels, centroid x = 10.5
        m.set(10, 1, 1, 1);
        // reference equidistant in x, y chosen so both distances are equal
        let a = [0.5, 1.5, 1.5];
        let b = [10.5, 1.0, 1.5];
        let reference = [5.5, 1.25, 1.5];
        assert!((distance(a, reference) - distance(b, reference)).abs() < 1e-12);
        assert_eq!(nearest_component(&m, reference).unwrap().count_nonzero(), 2);
    }

    fn blob_volume(seeds: &[(usize, usize, usize, usize)], dims: Dims) -> LabelVolume {
        let mut m = vol(dims);
        for &(x, y, z, r) in seeds {
            for dz in 0..=r {
                for dy in 0..=r {
                    for dx in 0..=r {
                        let (px, py, pz) = (x + dx, y + dy, z + dz);
                        if px < dims[0] && py < dims[1] && pz < dims[2] {
                            m.set(px, py, pz, 1);
                        }
                    }
                }
            }
        }
        m
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn nearest_component_matches_exhaustive_search(
            seeds in prop::collection::vec((0usize..14, 0usize..14, 0usize..6, 0usize..3), 3),
            reference in (0.0f64..16.0, 0.0f64..16.0, 0.0f64..8.0),
        ) {
            let m = blob_volume(&seeds, [16, 16, 8]);
            let reference = [reference.0, reference.1, reference.2];
            let kept = nearest_component(&m, reference).unwrap();
            // the result is one 26-connected component
            prop_assert_eq!(connected_components(&kept).len(), 1);
            // no other component is strictly closer
            let d_kept = distance(connected_components(&kept)[0].centroid_mm, reference);
            for c in connected_components(&m) {
                prop_assert!(distance(c.centroid_mm, reference) >= d_kept - 1e-12);
            }
        }

        #[test]
        fn surrogate_disjoint_contained_and_translation_equivariant(
            seeds in prop::collection::vec((8usize..14, 8usize..14, 3usize..6, 0usize..3), 1..3),
            shift in (0usize..4, 0usize..4, 0usize..2),
        ) {
            let dims = [28, 28, 12];
            let radii = [4.0, 4.0, 2.5];
            let kidney = blob_volume(&seeds, dims);
            let moved: Vec<_> = seeds.iter().map(|&(x, y, z, r)| (x + shift.0, y + shift.1, z + shift.2, r)).collect();
            let kidney_moved = blob_volume(&moved, dims);
            let a = renal_pelvis_surrogate_report(&kidney, radii);
            let b = renal_pelvis_surrogate_report(&kidney_moved, radii);
            match (a, b) {
                (Ok((sa, ra)), Ok((sb, rb))) => {
                    for i in sa.indices() {
                        prop_assert_eq!(kidney.labels()[i], 0);
                        let inside = ra.kidneys.iter().any(|k| {
                            let c = voxel_center_mm([1.0; 3], voxel_coords(dims, i));
                            (0..3).map(|d| ((c[d] - k.centroid_mm[d]) / radii[d]).powi(2)).sum::<f64>() <= 1.0
                        });
                        prop_assert!(inside);
                    }
                    let shifted: Vec<usize> = sa
                        .indices()
                        .into_iter()
                        .map(|i| {
                            let [x, y, z] = voxel_coords(dims, i);
                            linear_index(dims, x + shift.0, y + shift.1, z + shift.2)
                        })
                        .collect();
                    prop_assert_eq!(shifted, sb.indices());
                    for (ka, kb) in ra.kidneys.iter().zip(&rb.kidneys) {
                        prop_assert!((kb.centroid_mm[0] - ka.centroid_mm[0] - shift.0 as f64).abs() < 1e-9);
                        prop_assert!((kb.centroid_mm[2] - ka.centroid_mm[2] - shift.2 as f64).abs() < 1e-9);
                    }
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "translation changed success"),
            }
        }
    }
}
