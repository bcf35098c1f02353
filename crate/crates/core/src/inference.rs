//! Sliding-window translation of districts and whole patients.

use crate::dataset::PatientRecord;
use crate::districts::{extract_bundles, whole_body_bundle, DistrictBundle};
use crate::error::{Error, Result};
use crate::models::{ModelBundle, ModelScope};
use crate::patches::{
    assemble, extract_patch, pad_mask_to_min, pad_to_min, patch_grid, unpad, Stitcher,
    DEFAULT_OVERLAP, DEFAULT_PATCH_SIZE,
};
use crate::volume::{mask_apply, District, MaskScope, Modality, Volume};

/// Anything that maps a CT patch to a synthetic PET patch.
///
/// Implemented by trained [`ModelBundle`]s; tests use analytic doubles.
pub trait PatchTranslator {
    fn scope(&self) -> ModelScope;
    fn patch_size(&self) -> usize;
    fn translate(&self, ct_patch: &[f32]) -> Result<Vec<f32>>;
}

impl PatchTranslator for ModelBundle {
    fn scope(&self) -> ModelScope {
        self.spec.scope
    }

    fn patch_size(&self) -> usize {
        ModelBundle::patch_size(self)
    }

    fn translate(&self, ct_patch: &[f32]) -> Result<Vec<f32>> {
        self.generate(ct_patch)
    }
}

impl<T: PatchTranslator + ?Sized> PatchTranslator for &T {
    fn scope(&self) -> ModelScope {
        (**self).scope()
    }

    fn patch_size(&self) -> usize {
        (**self).patch_size()
    }

    fn translate(&self, ct_patch: &[f32]) -> Result<Vec<f32>> {
        (**self).translate(ct_patch)
    }
}

/// Translates one bundle with an `s`-window sliding grid.
///
/// District bundles skip windows containing no district voxel (their output
/// would be masked away); the whole-body scope visits every window.
pub fn translate_district(g: &dyn PatchTranslator, b: &DistrictBundle) -> Result<Volume> {
    if g.scope().mask_scope() != b.scope {
        return Err(Error::Orchestration(format!(
            "model trained for '{}' applied to a '{}' bundle",
            g.scope(),
            b.scope
        )));
    }
    let s = g.patch_size();
    let (ct, rec) = pad_to_min(&b.ct, s)?;
    let (mask, _) = pad_mask_to_min(&b.mask, s);
    let dims = ct.dims();
    // 32-voxel windows overlap by 16; other sizes keep the same half-window ratio.
    let grid = patch_grid(dims, s, s * DEFAULT_OVERLAP / DEFAULT_PATCH_SIZE)?;
    let skip_empty = b.scope != MaskScope::WholeBody;
    let mut stitcher = Stitcher::new(dims, s);
    for &origin in &grid.starts {
        if skip_empty && !extract_patch(mask.indicator(), dims, origin, s).contains(&true) {
            continue;
        }
        let x = extract_patch(ct.data(), dims, origin, s);
        let y = g.translate(&x)?;
        stitcher.add(origin, &y)?;
    }
    let stitched = ct.with_data(stitcher.finish_with(Some(0.0))?)?;
    let out = unpad(&stitched, &rec)?;
    Ok(mask_apply(&out, &b.mask)?.with_modality(Modality::SynthPet))
}

fn find_model<'a>(
    models: &'a [&'a dyn PatchTranslator],
    scope: ModelScope,
) -> Result<&'a dyn PatchTranslator> {
    models
        .iter()
        .copied()
        .find(|m| m.scope() == scope)
        .ok_or_else(|| Error::Orchestration(format!("no model for scope '{scope}'")))
}

/// Proposed pipeline: each district through its own model, then assembled
/// with a zero background.
pub fn translate_patient(models: &[&dyn PatchTranslator], p: &PatientRecord) -> Result<Volume> {
    let bundles = extract_bundles(p)?;
    let mut outputs = Vec::with_capacity(bundles.len());
    for (d, b) in District::ALL.into_iter().zip(&bundles) {
        let g = find_model(models, ModelScope::District(d))?;
        let out = if b.mask.is_empty() {
            mask_apply(&b.ct, &b.mask)?.with_modality(Modality::SynthPet)
        } else {
            translate_district(g, b)?
        };
        outputs.push(out);
    }
    let parts: Vec<(&Volume, &_)> = outputs
        .iter()
        .zip(bundles.iter().map(|b| &b.mask))
        .collect();
    Ok(assemble(&parts, &p.ct)?.with_modality(Modality::SynthPet))
}

/// Competitor: one model over the whole body, background zeroed.
pub fn translate_patient_wholebody(g: &dyn PatchTranslator, p: &PatientRecord) -> Result<Volume> {
    if g.scope() != ModelScope::WholeBody {
        return Err(Error::Orchestration(format!(
            "whole-body translation needs a whole-body model, got '{}'",
            g.scope()
        )));
    }
    translate_district(g, &whole_body_bundle(p)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Condition, Split};
    use crate::preprocess::SuvParams;
    use crate::volume::{DistrictLabelMask, Geometry, IntensityUnit};
    use std::cell::Cell;

    /// Test double with a configurable per-patch map and an invocation count.
    struct Double {
        scope: ModelScope,
        s: usize,
        f: fn(f32) -> f32,
        calls: Cell<usize>,
    }

    impl Double {
        fn new(scope: ModelScope, s: usize, f: fn(f32) -> f32) -> Self {
            Self {
                scope,
                s,
                f,
                calls: Cell::new(0),
            }
        }
    }

    impl PatchTranslator for Double {
        fn scope(&self) -> ModelScope {
            self.scope
        }
        fn patch_size(&self) -> usize {
            self.s
        }
        fn translate(&self, x: &[f32]) -> Result<Vec<f32>> {
            self.calls.set(self.calls.get() + 1);
            Ok(x.iter().map(|&v| (self.f)(v)).collect())
        }
    }

    fn patient(dims: [usize; 3]) -> PatientRecord {
        let n = dims.iter().product::<usize>();
        let g = Geometry::unit(dims);
        let ct: Vec<f32> = (0..n).map(|i| ((i * 31) % 97) as f32 / 97.0).collect();
        // Slabs along z: legs, trunk(+arms at the x edges), head; a background margin.
        let labels: Vec<u8> = (0..n)
            .map(|i| {
                let [x, _, z] = crate::volume::voxel_coords(dims, i);
                if x == 0 {
                    0
                } else if z < dims[2] / 3 {
                    4
                } else if z < 2 * dims[2] / 3 {
                    if x >= dims[0] - 3 {
                        3
                    } else {
                        2
                    }
                } else {
                    1
                }
            })
            .collect();
        PatientRecord {
            patient_id: "p".into(),
            ct: Volume::new(g, Modality::Ct, IntensityUnit::Normalized, ct).unwrap(),
            pet: None,
            district_mask: DistrictLabelMask::new(dims, labels).unwrap(),
            lesion_mask: None,
            condition: Condition::NegativeControl,
            suv: SuvParams::new(70.0, 3.7e8).unwrap(),
            split: Split::Test,
        }
    }

    fn identity(v: f32) -> f32 {
        v
    }

    fn district_doubles(s: usize, f: fn(f32) -> f32) -> Vec<Double> {
        District::ALL
            .iter()
            .map(|&d| Double::new(ModelScope::District(d), s, f))
            .collect()
    }

    #[test]
    fn identity_doubles_reproduce_in_body_ct() {
        let p = patient([20, 18, 40]);
        let doubles = district_doubles(16, identity);
        let refs: Vec<&dyn PatchTranslator> =
            doubles.iter().map(|d| d as &dyn PatchTranslator).collect();
        let out = translate_patient(&refs, &p).unwrap();
        let body = p.district_mask.body_mask();
        for i in 0..out.data().len() {
            let want = if body.indicator()[i] {
                p.ct.data()[i]
            } else {
                0.0
            };
            assert!((out.data()[i] - want).abs() <= 1e-6);
        }
        let wb = Double::new(ModelScope::WholeBody, 16, identity);
        let out_wb = translate_patient_wholebody(&wb, &p).unwrap();
        assert_eq!(out.data(), out_wb.data());
        assert_eq!(out.modality(), Modality::SynthPet);
    }

    #[test]
    fn constant_generator_is_masked() {
        let p = patient([20, 20, 36]);
        let b = &extract_bundles(&p).unwrap()[1];
        let g = Double::new(ModelScope::District(District::Trunk), 16, |_| 0.7);
        let out = translate_district(&g, b).unwrap();
        for (v, &m) in out.data().iter().zip(b.mask.indicator()) {
            assert_eq!(*v, if m { 0.7 } else { 0.0 });
        }
    }

    #[test]
    fn whole_body_visits_full_grid() {
        let p = patient([64, 64, 64]);
        let g = Double::new(ModelScope::WholeBody, 32, identity);
        translate_patient_wholebody(&g, &p).unwrap();
        assert_eq!(g.calls.get(), 27);
    }

    #[test]
    fn scope_mismatch_and_missing_model() {
        let p = patient([20, 20, 36]);
        let b = &extract_bundles(&p).unwrap()[0];
        let g = Double::new(ModelScope::District(District::Legs), 16, identity);
        assert!(matches!(
            translate_district(&g, b),
            Err(Error::Orchestration(_))
        ));
        let doubles = district_doubles(16, identity);
        let refs: Vec<&dyn PatchTranslator> = doubles[..3]
            .iter()
            .map(|d| d as &dyn PatchTranslator)
            .collect();
        assert!(matches!(
            translate_patient(&refs, &p),
            Err(Error::Orchestration(_))
        ));
        assert!(matches!(
            translate_patient_wholebody(&doubles[0], &p),
            Err(Error::Orchestration(_))
        ));
    }

    #[test]
    fn small_volumes_are_padded_without_leaking() {
        // Smaller than the window along every axis.
        let p = patient([9, 7, 12]);
        let doubles = district_doubles(16, identity);
        let refs: Vec<&dyn PatchTranslator> =
            doubles.iter().map(|d| d as &dyn PatchTranslator).collect();
        let out = translate_patient(&refs, &p).unwrap();
        let body = p.district_mask.body_mask();
        for i in 0..out.data().len() {
            let want = if body.indicator()[i] {
                p.ct.data()[i]
            } else {
                0.0
            };
            assert_eq!(out.data()[i], want);
        }
    }

    #[test]
    fn empty_district_contributes_zeros() {
        let mut p = patient([20, 18, 40]);
        let labels: Vec<u8> = p
            .district_mask
            .labels()
            .iter()
            .map(|&l| if l == 3 { 2 } else { l })
            .collect();
        p.district_mask = DistrictLabelMask::new(p.ct.dims(), labels).unwrap();
        let doubles = district_doubles(16, |_| 0.5);
        let refs: Vec<&dyn PatchTranslator> =
            doubles.iter().map(|d| d as &dyn PatchTranslator).collect();
        let out = translate_patient(&refs, &p).unwrap();
        assert_eq!(doubles[2].calls.get(), 0);
        let body = p.district_mask.body_mask();
        for (v, &m) in out.data().iter().zip(body.indicator()) {
            assert_eq!(*v, if m { 0.5 } else { 0.0 });
        }
    }
}
