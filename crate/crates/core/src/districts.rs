//! Four-district body partition and district-restricted volumes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::dataset::PatientRecord;
use crate::error::{Error, Result};
use crate::volume::{
    mask_apply, voxel_count, BinaryMask, Dims, District, DistrictLabelMask, MaskScope, Volume,
};

/// Maps an external segmentation vocabulary onto district ids (0 = background).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelCollapseMap {
    table: BTreeMap<i64, u8>,
}

impl LabelCollapseMap {
    pub fn new(entries: impl IntoIterator<Item = (i64, u8)>) -> Result<Self> {
        let mut table = BTreeMap::new();
        for (src, dst) in entries {
            if dst > 4 {
                return Err(Error::Parameter(format!(
                    "label {src} maps to {dst}, outside 0..=4"
                )));
            }
            table.insert(src, dst);
        }
        Ok(Self { table })
    }

    /// Vocabulary of the built-in phantom segmenter: labels are district ids.
    pub fn phantom_default() -> Self {
        Self {
            table: (0..=4).map(|i| (i as i64, i as u8)).collect(),
        }
    }

    pub fn get(&self, source: i64) -> Option<u8> {
        self.table.get(&source).copied()
    }

    /// Parses `source_label = district_id` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let bad = || {
                Error::Config(format!(
                    "line {}: expected `source_label = district_id`, got {line:?}",
                    no + 1
                ))
            };
            let (k, v) = line.split_once('=').ok_or_else(bad)?;
            let src: i64 = k.trim().parse().map_err(|_| bad())?;
            let dst: u8 = match v.trim().parse::<u8>() {
                Ok(d) => d,
                Err(_) => District::from_name(v.trim())
                    .map(District::id)
                    .ok_or_else(bad)?,
            };
            if dst > 4 {
                return Err(Error::Config(format!(
                    "line {}: district id {dst} outside 0..=4",
                    no + 1
                )));
            }
            entries.push((src, dst));
        }
        Self::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

fn unmapped(raw: &[i64], map: &LabelCollapseMap) -> Vec<i64> {
    raw.iter()
        .filter(|l| map.get(**l).is_none())
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Collapses a raw integer label grid into district labels.
pub fn collapse_labels(
    dims: Dims,
    raw: &[i64],
    map: &LabelCollapseMap,
) -> Result<DistrictLabelMask> {
    if raw.len() != voxel_count(dims) {
        return Err(Error::Shape(format!(
            "raw labels have {} voxels, dims {dims:?}",
            raw.len()
        )));
    }
    let missing = unmapped(raw, map);
    if !missing.is_empty() {
        return Err(Error::Mapping(missing));
    }
    DistrictLabelMask::new(dims, raw.iter().map(|&l| map.get(l).unwrap()).collect())
}

/// Merges several raw label grids (e.g. one per segmentation task) whose
/// structures may overlap. A voxel claimed by several districts goes to the
/// first in head > trunk > arms > legs order.
pub fn collapse_overlapping(
    dims: Dims,
    layers: &[&[i64]],
    map: &LabelCollapseMap,
) -> Result<DistrictLabelMask> {
    let n = voxel_count(dims);
    let mut missing = BTreeSet::new();
    for layer in layers {
        if layer.len() != n {
            return Err(Error::Shape(format!(
                "raw labels have {} voxels, dims {dims:?}",
                layer.len()
            )));
        }
        missing.extend(unmapped(layer, map));
    }
    if !missing.is_empty() {
        return Err(Error::Mapping(missing.into_iter().collect()));
    }
    let labels = (0..n)
        .map(|i| {
            layers
                .iter()
                .map(|layer| map.get(layer[i]).unwrap())
                .filter(|&d| d != 0)
                .min()
                .unwrap_or(0)
        })
        .collect();
    DistrictLabelMask::new(dims, labels)
}

/// Per-district indicators, in [`District::ALL`] order.
pub fn binary_masks(m: &DistrictLabelMask) -> [BinaryMask; 4] {
    District::ALL.map(|d| district_mask(m, d))
}

pub fn district_mask(m: &DistrictLabelMask, d: District) -> BinaryMask {
    let id = d.id();
    BinaryMask::from_parts_unchecked(
        m.dims(),
        MaskScope::District(d),
        m.labels().iter().map(|&l| l == id).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PartitionReport {
    /// Voxels set in more than one mask.
    pub overlap_voxels: usize,
    /// Labelled voxels set in no mask.
    pub coverage_deficit: usize,
    /// Background voxels set in some mask.
    pub spurious_voxels: usize,
}

impl PartitionReport {
    pub fn passed(&self) -> bool {
        self.overlap_voxels == 0 && self.coverage_deficit == 0 && self.spurious_voxels == 0
    }
}

/// Checks that `masks` are pairwise disjoint and that their union is
/// exactly the non-background part of `m`.
pub fn partition_check(masks: &[BinaryMask], m: &DistrictLabelMask) -> Result<PartitionReport> {
    for mask in masks {
        if mask.dims() != m.dims() {
            return Err(Error::Shape(format!(
                "mask {:?} vs labels {:?}",
                mask.dims(),
                m.dims()
            )));
        }
    }
    let mut report = PartitionReport::default();
    for (i, &label) in m.labels().iter().enumerate() {
        let hits = masks.iter().filter(|mask| mask.indicator()[i]).count();
        if hits > 1 {
            report.overlap_voxels += 1;
        }
        if label != 0 && hits == 0 {
            report.coverage_deficit += 1;
        }
        if label == 0 && hits > 0 {
            report.spurious_voxels += 1;
        }
    }
    Ok(report)
}

/// Count of voxels set in more than one of `masks`.
pub fn overlap_count(masks: &[&BinaryMask]) -> Result<usize> {
    let Some(first) = masks.first() else {
        return Ok(0);
    };
    for m in masks {
        if m.dims() != first.dims() {
            return Err(Error::Shape(format!(
                "mask {:?} vs {:?}",
                m.dims(),
                first.dims()
            )));
        }
    }
    Ok((0..voxel_count(first.dims()))
        .filter(|&i| masks.iter().filter(|m| m.indicator()[i]).count() > 1)
        .count())
}

/// CT (and PET, when available) restricted to one region.
#[derive(Debug, Clone, PartialEq)]
pub struct DistrictBundle {
    pub scope: MaskScope,
    pub ct: Volume,
    pub pet: Option<Volume>,
    pub mask: BinaryMask,
}

impl DistrictBundle {
    pub fn from_mask(ct: &Volume, pet: Option<&Volume>, mask: BinaryMask) -> Result<Self> {
        if let Some(p) = pet {
            if p.dims() != ct.dims() {
                return Err(Error::Shape(format!(
                    "ct {:?} vs pet {:?}",
                    ct.dims(),
                    p.dims()
                )));
            }
        }
        Ok(Self {
            scope: mask.scope(),
            ct: mask_apply(ct, &mask)?,
            pet: pet.map(|p| mask_apply(p, &mask)).transpose()?,
            mask,
        })
    }

    pub fn district(&self) -> Option<District> {
        match self.scope {
            MaskScope::District(d) => Some(d),
            _ => None,
        }
    }
}

/// One bundle per district, in [`District::ALL`] order.
pub fn extract_bundles(p: &PatientRecord) -> Result<Vec<DistrictBundle>> {
    if p.district_mask.dims() != p.ct.dims() {
        return Err(Error::Shape(format!(
            "district mask {:?} vs ct {:?}",
            p.district_mask.dims(),
            p.ct.dims()
        )));
    }
    binary_masks(&p.district_mask)
        .into_iter()
        .map(|m| DistrictBundle::from_mask(&p.ct, p.pet.as_ref(), m))
        .collect()
}

/// Whole-body bundle: the body mask is the union of the four districts.
pub fn whole_body_bundle(p: &PatientRecord) -> Result<DistrictBundle> {
    if p.district_mask.dims() != p.ct.dims() {
        return Err(Error::Shape(format!(
            "district mask {:?} vs ct {:?}",
            p.district_mask.dims(),
            p.ct.dims()
        )));
    }
    DistrictBundle::from_mask(&p.ct, p.pet.as_ref(), p.district_mask.body_mask())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Condition, Split};
    use crate::preprocess::SuvParams;
    use crate::volume::{Geometry, IntensityUnit, Modality};
    use rand::{Rng, SeedableRng};

    #[test]
    fn collapse_background_only() {
        let map = LabelCollapseMap::new([(0, 0)]).unwrap();
        let m = collapse_labels([2, 2, 2], &[0; 8], &map).unwrap();
        assert_eq!(m.count(0), 8);
    }

    #[test]
    fn collapse_preserves_histogram() {
        let raw = [10, 11, 11, 10, 11, 10, 10, 10];
        let map = LabelCollapseMap::new([(10, 1), (11, 2)]).unwrap();
        let m = collapse_labels([2, 2, 2], &raw, &map).unwrap();
        assert_eq!(m.count(1), 5);
        assert_eq!(m.count(2), 3);
    }

    #[test]
    fn collapse_names_unmapped_labels() {
        let map = LabelCollapseMap::new([(0, 0), (1, 1)]).unwrap();
        match collapse_labels([3, 1, 1], &[0, 99, 1], &map) {
            Err(Error::Mapping(labels)) => assert_eq!(labels, vec![99]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overlapping_structures_resolve_by_priority() {
        // legs (4) and trunk (2) claim voxel 0; arms (3) and head (1) voxel 1.
        let map = LabelCollapseMap::new([(0, 0), (5, 4), (6, 2), (7, 3), (8, 1)]).unwrap();
        let a = [5i64, 7, 0];
        let b = [6i64, 8, 0];
        let m = collapse_overlapping([3, 1, 1], &[&a, &b], &map).unwrap();
        assert_eq!(m.labels(), &[2, 1, 0]);
    }

    #[test]
    fn map_file_parsing() {
        let text = "# moose organs\n1 = 1\n 2=trunk # lungs\n\n7 = 0\n";
        let map = LabelCollapseMap::parse(text).unwrap();
        assert_eq!(map.get(2), Some(2));
        assert_eq!(map.get(7), Some(0));
        let err = LabelCollapseMap::parse("1 = 1\noops\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
        assert!(LabelCollapseMap::parse("3 = 9").is_err());
    }

    #[test]
    fn binary_masks_cases() {
        let all_trunk = DistrictLabelMask::new([2, 2, 1], vec![2; 4]).unwrap();
        let masks = binary_masks(&all_trunk);
        assert_eq!(
            masks.iter().map(BinaryMask::count).collect::<Vec<_>>(),
            vec![0, 4, 0, 0]
        );

        let one_each = DistrictLabelMask::new([4, 1, 1], vec![1, 2, 3, 4]).unwrap();
        assert!(binary_masks(&one_each).iter().all(|m| m.count() == 1));

        let empty = DistrictLabelMask::new([4, 1, 1], vec![0; 4]).unwrap();
        assert!(binary_masks(&empty).iter().all(BinaryMask::is_empty));
    }

    #[test]
    fn partition_check_detects_violations() {
        let m = DistrictLabelMask::new([4, 1, 1], vec![1, 2, 3, 0]).unwrap();
        let good = binary_masks(&m);
        assert!(partition_check(&good, &m).unwrap().passed());

        let mut overlapping = good.clone();
        overlapping[1] = BinaryMask::new(
            [4, 1, 1],
            MaskScope::District(District::Trunk),
            vec![true, true, false, false],
        )
        .unwrap();
        let r = partition_check(&overlapping, &m).unwrap();
        assert!(!r.passed());
        assert_eq!(r.overlap_voxels, 1);

        let mut short = good.clone();
        short[2] = BinaryMask::filled([4, 1, 1], MaskScope::District(District::Arms), false);
        let r = partition_check(&short, &m).unwrap();
        assert_eq!(r.coverage_deficit, 1);
        assert!(!r.passed());
    }

    fn random_patient(seed: u64, with_arms: bool) -> PatientRecord {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dims = [6, 5, 4];
        let n = voxel_count(dims);
        let g = Geometry::unit(dims);
        let labels: Vec<u8> = (0..n)
            .map(|_| {
                let l = rng.random_range(0..5u8);
                if !with_arms && l == 3 {
                    2
                } else {
                    l
                }
            })
            .collect();
        let ct = Volume::new(
            g,
            Modality::Ct,
            IntensityUnit::Normalized,
            (0..n).map(|_| rng.random::<f32>()).collect(),
        )
        .unwrap();
        let pet = Volume::new(
            g,
            Modality::Pet,
            IntensityUnit::Normalized,
            (0..n).map(|_| rng.random::<f32>()).collect(),
        )
        .unwrap();
        PatientRecord {
            patient_id: format!("r{seed}"),
            ct,
            pet: Some(pet),
            district_mask: DistrictLabelMask::new(dims, labels).unwrap(),
            lesion_mask: None,
            condition: Condition::NegativeControl,
            suv: SuvParams::new(70.0, 3e8).unwrap(),
            split: Split::Train,
        }
    }

    #[test]
    fn empty_district_gives_zero_bundle() {
        let p = random_patient(3, false);
        let bundles = extract_bundles(&p).unwrap();
        let arms = &bundles[2];
        assert!(arms.mask.is_empty());
        assert!(arms.ct.data().iter().all(|&x| x == 0.0));
        assert!(arms.pet.as_ref().unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bundles_reconstruct_and_are_disjoint() {
        for seed in 0..10 {
            let p = random_patient(seed, true);
            let bundles = extract_bundles(&p).unwrap();
            let background = BinaryMask::new(
                p.ct.dims(),
                MaskScope::WholeBody,
                p.district_mask.labels().iter().map(|&l| l == 0).collect(),
            )
            .unwrap();
            let mut sum = mask_apply(&p.ct, &background).unwrap().into_data();
            for b in &bundles {
                for (s, x) in sum.iter_mut().zip(b.ct.data()) {
                    *s += x;
                }
            }
            assert_eq!(&sum[..], p.ct.data());
            for i in 0..sum.len() {
                let owners = bundles.iter().filter(|b| b.mask.indicator()[i]).count();
                assert!(owners <= 1);
            }
            for b in &bundles {
                assert_eq!(mask_apply(&b.ct, &b.mask).unwrap(), b.ct);
            }
        }
    }
}
