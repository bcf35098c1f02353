//! Patient records and the JSON-lines manifest that indexes them on disk.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::SuvParams;
use crate::volume::{
    read_labels, read_volume, write_labels, write_volume, BinaryMask, DistrictLabelMask, Geometry,
    MaskScope, Volume,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Lymphoma,
    Nsclc,
    Melanoma,
    NegativeControl,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Lymphoma,
        Condition::Nsclc,
        Condition::Melanoma,
        Condition::NegativeControl,
    ];
    pub const MALIGNANT: [Condition; 3] =
        [Condition::Lymphoma, Condition::Nsclc, Condition::Melanoma];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Lymphoma => "lymphoma",
            Condition::Nsclc => "nsclc",
            Condition::Melanoma => "melanoma",
            Condition::NegativeControl => "negative_control",
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One preprocessed, spatially aligned CT/PET pair plus its annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub ct: Volume,
    pub pet: Option<Volume>,
    pub district_mask: DistrictLabelMask,
    pub lesion_mask: Option<BinaryMask>,
    pub condition: Condition,
    pub suv: SuvParams,
    pub split: Split,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        let dims = self.ct.dims();
        if let Some(pet) = &self.pet {
            if pet.dims() != dims {
                return Err(Error::Shape(format!(
                    "{}: pet {:?} vs ct {dims:?}",
                    self.patient_id,
                    pet.dims()
                )));
            }
        }
        if self.district_mask.dims() != dims {
            return Err(Error::Shape(format!(
                "{}: district mask {:?} vs ct {dims:?}",
                self.patient_id,
                self.district_mask.dims()
            )));
        }
        if let Some(l) = &self.lesion_mask {
            if l.dims() != dims {
                return Err(Error::Shape(format!(
                    "{}: lesion mask {:?} vs ct {dims:?}",
                    self.patient_id,
                    l.dims()
                )));
            }
        }
        SuvParams::new(self.suv.body_weight_kg, self.suv.injected_dose_bq)?;
        Ok(())
    }
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub split: Split,
    pub condition: Condition,
    pub body_weight_kg: f64,
    pub injected_dose_bq: f64,
    pub ct: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pet: Option<String>,
    pub district_mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lesion_mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| Error::format(format!("manifest line {}", no + 1), e.to_string()))?;
            entries.push(entry);
        }
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { dir, entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).expect("manifest entry serializes");
            out.write_all(b"\n").unwrap();
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<PatientRecord> {
        let ct = read_volume(self.dir.join(&entry.ct))?;
        let pet = entry
            .pet
            .as_ref()
            .map(|p| read_volume(self.dir.join(p)))
            .transpose()?;
        let (_, labels) = read_labels(self.dir.join(&entry.district_mask))?;
        let district_mask = DistrictLabelMask::new(ct.dims(), labels)?;
        let lesion_mask = match &entry.lesion_mask {
            Some(p) => {
                let (_, bits) = read_labels(self.dir.join(p))?;
                Some(BinaryMask::new(
                    ct.dims(),
                    MaskScope::Lesion,
                    bits.iter().map(|&b| b != 0).collect(),
                )?)
            }
            None => None,
        };
        let record = PatientRecord {
            patient_id: entry.patient_id.clone(),
            ct,
            pet,
            district_mask,
            lesion_mask,
            condition: entry.condition,
            suv: SuvParams::new(entry.body_weight_kg, entry.injected_dose_bq)?,
            split: entry.split,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<PatientRecord>> {
        self.split(split).map(|e| self.load(e)).collect()
    }
}

/// Writes a patient's volumes under `dir/<patient_id>/` and returns the
/// manifest entry describing them (relative to `dir`).
pub fn save_patient(dir: impl AsRef<Path>, p: &PatientRecord) -> Result<ManifestEntry> {
    let dir = dir.as_ref();
    let rel = |name: &str| format!("{}/{name}", p.patient_id);
    let geometry: Geometry = *p.ct.geometry();
    write_volume(&p.ct, dir.join(rel("ct.vvol")))?;
    if let Some(pet) = &p.pet {
        write_volume(pet, dir.join(rel("pet.vvol")))?;
    }
    write_labels(
        &geometry,
        p.district_mask.labels(),
        dir.join(rel("districts.vvol")),
    )?;
    if let Some(l) = &p.lesion_mask {
        let bits: Vec<u8> = l.indicator().iter().map(|&b| b as u8).collect();
        write_labels(&geometry, &bits, dir.join(rel("lesions.vvol")))?;
    }
    Ok(ManifestEntry {
        patient_id: p.patient_id.clone(),
        split: p.split,
        condition: p.condition,
        body_weight_kg: p.suv.body_weight_kg,
        injected_dose_bq: p.suv.injected_dose_bq,
        ct: rel("ct.vvol"),
        pet: p.pet.as_ref().map(|_| rel("pet.vvol")),
        district_mask: rel("districts.vvol"),
        lesion_mask: p.lesion_mask.as_ref().map(|_| rel("lesions.vvol")),
    })
}
