//! End-to-end commands: phantom generation, preprocessing, training,
//! translation and evaluation. The CLI is a thin wrapper over these.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::{save_patient, Condition, Manifest, PatientRecord, Split, MANIFEST_FILE};
use crate::districts::{collapse_labels, LabelCollapseMap};
use crate::error::{Error, Result};
use crate::evaluation::{build_report, emit_report, evaluate_patient, Method, Report};
use crate::inference::{translate_patient, translate_patient_wholebody, PatchTranslator};
use crate::models::{load_checkpoint, Arch, ModelBundle, ModelScope};
use crate::phantom::phantom_dataset;
use crate::preprocess::{clamp_normalize_pet, normalize_ct, resample_trilinear, suv_convert, SuvParams};
use crate::training::{train_model, Resume, RunDir};
use crate::volume::{
    read_nifti, read_nifti_labels, read_volume, write_nifti_f32, write_volume, BinaryMask,
    IntensityUnit, MaskScope, Modality,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSummary {
    pub manifest: PathBuf,
    /// Train, validation, test.
    pub counts: [usize; 3],
}

fn summarize(m: &Manifest, path: PathBuf) -> DatasetSummary {
    let count = |s| m.split(s).count();
    DatasetSummary {
        manifest: path,
        counts: [count(Split::Train), count(Split::Val), count(Split::Test)],
    }
}

pub fn cmd_phantom(cfg: &ExperimentConfig, out_dir: &Path) -> Result<DatasetSummary> {
    cfg.validate()?;
    let m = phantom_dataset(&cfg.phantom, cfg.dataset.n_patients, cfg.dataset.split_fractions, out_dir)?;
    Ok(summarize(&m, out_dir.join(MANIFEST_FILE)))
}

/// One line of a raw-data manifest (JSON lines). Paths are relative to the
/// raw manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawEntry {
    pub patient_id: String,
    pub split: Split,
    pub condition: Condition,
    pub body_weight_kg: f64,
    pub injected_dose_bq: f64,
    /// CT in HU.
    pub ct: String,
    /// PET activity concentration in Bq/mL; resampled onto the CT grid.
    pub pet: String,
    /// Integer segmentation on the CT grid.
    pub labels: String,
    /// Source label → district id (0 background, 1 head, 2 trunk, 3 arms,
    /// 4 legs). Defaults to the identity on 0..=4.
    #[serde(default)]
    pub label_map: Option<Vec<(i64, u8)>>,
    /// Lesion mask on the CT grid (nonzero = lesion).
    #[serde(default)]
    pub lesion: Option<String>,
}

/// Converts one raw NIfTI study into a normalized patient record.
pub fn preprocess_entry(e: &RawEntry, raw_dir: &Path) -> Result<PatientRecord> {
    let ct = read_nifti(raw_dir.join(&e.ct), Modality::Ct, IntensityUnit::Hu)?;
    let pet = read_nifti(raw_dir.join(&e.pet), Modality::Pet, IntensityUnit::BqPerMl)?;
    let pet = if pet.geometry() == ct.geometry() {
        pet
    } else {
        resample_trilinear(&pet, ct.geometry())?
    };
    let suv = SuvParams::new(e.body_weight_kg, e.injected_dose_bq)?;
    let pet = clamp_normalize_pet(&suv_convert(&pet, &suv)?)?;
    let ct = normalize_ct(&ct)?;
    let (lg, raw) = read_nifti_labels(raw_dir.join(&e.labels))?;
    if lg.dims != ct.dims() {
        return Err(Error::Shape(format!("{}: labels {:?} vs ct {:?}", e.patient_id, lg.dims, ct.dims())));
    }
    let map = match &e.label_map {
        Some(pairs) => LabelCollapseMap::new(pairs.iter().copied())?,
        None => LabelCollapseMap::phantom_default(),
    };
    let district_mask = collapse_labels(ct.dims(), &raw, &map)?;
    let lesion_mask = match &e.lesion {
        Some(p) => {
            let (g, raw) = read_nifti_labels(raw_dir.join(p))?;
            if g.dims != ct.dims() {
                return Err(Error::Shape(format!("{}: lesion {:?} vs ct {:?}", e.patient_id, g.dims, ct.dims())));
            }
            Some(BinaryMask::new(g.dims, MaskScope::Lesion, raw.iter().map(|&v| v != 0).collect())?)
        }
        None => None,
    };
    let p = PatientRecord {
        patient_id: e.patient_id.clone(),
        ct,
        pet: Some(pet),
        district_mask,
        lesion_mask,
        condition: e.condition,
        suv,
        split: e.split,
    };
    p.validate()?;
    Ok(p)
}

pub fn cmd_preprocess(raw_manifest: &Path, out_dir: &Path) -> Result<DatasetSummary> {
    let text = fs::read_to_string(raw_manifest).map_err(|e| Error::io(raw_manifest, e))?;
    let raw_dir = raw_manifest.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: RawEntry = serde_json::from_str(line)
            .map_err(|err| Error::format(format!("raw manifest line {}", no + 1), err.to_string()))?;
        let p = preprocess_entry(&e, raw_dir)?;
        entries.push(save_patient(out_dir, &p)?);
    }
    let m = Manifest {
        dir: out_dir.to_path_buf(),
        entries,
    };
    let path = out_dir.join(MANIFEST_FILE);
    m.write(&path)?;
    Ok(summarize(&m, path))
}

/// Which models `train` builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTarget {
    One(ModelScope),
    /// The four district models and the whole-body competitor.
    All,
}

impl TrainTarget {
    pub fn scopes(self) -> Vec<ModelScope> {
        match self {
            TrainTarget::One(s) => vec![s],
            TrainTarget::All => ModelScope::ALL.to_vec(),
        }
    }
}

impl FromStr for TrainTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            Ok(TrainTarget::All)
        } else {
            s.parse().map(TrainTarget::One)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub scope: ModelScope,
    pub dir: PathBuf,
    pub epoch: usize,
    pub best_val_mae: Option<f64>,
    pub checksum: u64,
}

/// Trains every scope in `target` with the same configuration. With
/// `parallel`, the jobs run on separate threads; results are identical
/// either way since each job owns its random stream.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    manifest_path: &Path,
    target: TrainTarget,
    models_dir: &Path,
    resume: Resume,
    parallel: bool,
) -> Result<Vec<TrainedModel>> {
    cfg.validate()?;
    let m = Manifest::read(manifest_path)?;
    let train = m.load_split(Split::Train)?;
    if train.is_empty() {
        return Err(Error::Config(format!("{} has no training patients", manifest_path.display())));
    }
    let val = m.load_split(Split::Val)?;
    let job = |scope: ModelScope| -> Result<TrainedModel> {
        let dir = RunDir::new(models_dir, cfg.model.arch, scope);
        let out = train_model(cfg.model.spec(scope), &train, &val, &cfg.train, Some((&dir, resume)))?;
        fs::write(dir.root.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(&dir.root, e))?;
        Ok(TrainedModel {
            scope,
            epoch: out.model.epoch,
            best_val_mae: out.model.best_val_mae,
            checksum: out.model.checksum(),
            dir: dir.root,
        })
    };
    let scopes = target.scopes();
    if parallel && scopes.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = scopes.iter().map(|&sc| s.spawn(move || job(sc))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect()
        })
    } else {
        scopes.into_iter().map(job).collect()
    }
}

/// Loads the best checkpoint of a model, falling back to the last one.
pub fn load_model(models_dir: &Path, arch: Arch, scope: ModelScope) -> Result<ModelBundle> {
    let dir = RunDir::new(models_dir, arch, scope);
    let path = [dir.best(), dir.last()]
        .into_iter()
        .find(|p| p.exists())
        .ok_or_else(|| {
            Error::Orchestration(format!(
                "no {arch} checkpoint for scope '{scope}' under {}",
                dir.root.display()
            ))
        })?;
    let m = load_checkpoint(&path)?;
    if m.spec.scope != scope || m.spec.arch != arch {
        return Err(Error::Orchestration(format!(
            "{} holds a {} {} model, expected {arch} {scope}",
            path.display(),
            m.spec.arch,
            m.spec.scope
        )));
    }
    Ok(m)
}

pub const PREDICTIONS_FILE: &str = "predictions.json";

/// Describes a directory of synthetic PET volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub method: Method,
    pub arch: Arch,
    /// Checkpoint checksums by scope name.
    pub models: Vec<(String, u64)>,
    pub patients: Vec<String>,
}

pub fn prediction_path(dir: &Path, patient_id: &str) -> PathBuf {
    dir.join(format!("{patient_id}.vvol"))
}

/// Writes one synthetic PET per test patient into `out_dir`, plus
/// `predictions.json`. With `nifti`, also writes `<id>.nii` copies.
pub fn cmd_translate(
    manifest_path: &Path,
    models_dir: &Path,
    method: Method,
    arch: Arch,
    out_dir: &Path,
    nifti: bool,
) -> Result<PredictionMeta> {
    let m = Manifest::read(manifest_path)?;
    let scopes: Vec<ModelScope> = match method {
        Method::Proposed => ModelScope::ALL[..4].to_vec(),
        Method::Competitor => vec![ModelScope::WholeBody],
    };
    let models: Vec<ModelBundle> = scopes
        .iter()
        .map(|&s| load_model(models_dir, arch, s))
        .collect::<Result<_>>()?;
    let test = m.load_split(Split::Test)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut patients = Vec::with_capacity(test.len());
    for p in &test {
        let out = match method {
            Method::Proposed => {
                let refs: Vec<&dyn PatchTranslator> = models.iter().map(|m| m as &dyn PatchTranslator).collect();
                translate_patient(&refs, p)?
            }
            Method::Competitor => translate_patient_wholebody(&models[0], p)?,
        };
        write_volume(&out, prediction_path(out_dir, &p.patient_id))?;
        if nifti {
            write_nifti_f32(out.geometry(), out.data(), out_dir.join(format!("{}.nii", p.patient_id)))?;
        }
        log::info!("{}: translated ({method:?})", p.patient_id);
        patients.push(p.patient_id.clone());
    }
    let meta = PredictionMeta {
        method,
        arch,
        models: scopes.iter().zip(&models).map(|(s, m)| (s.name().to_string(), m.checksum())).collect(),
        patients,
    };
    let path = out_dir.join(PREDICTIONS_FILE);
    fs::write(&path, serde_json::to_string_pretty(&meta).expect("meta serializes")).map_err(|e| Error::io(&path, e))?;
    Ok(meta)
}

pub fn read_prediction_meta(dir: &Path) -> Result<PredictionMeta> {
    let path = dir.join(PREDICTIONS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(PREDICTIONS_FILE, e.to_string()))
}

/// Scores every prediction directory against the test split and writes the
/// report. Paired t-tests compare proposed and competitor predictions of the
/// same architecture.
pub fn cmd_evaluate(manifest_path: &Path, pred_dirs: &[PathBuf], out_dir: &Path) -> Result<Report> {
    if pred_dirs.is_empty() {
        return Err(Error::Report("no prediction directories given".into()));
    }
    let m = Manifest::read(manifest_path)?;
    let test = m.load_split(Split::Test)?;
    if test.is_empty() {
        return Err(Error::Report(format!("{} has an empty test split", manifest_path.display())));
    }
    let mut labels = Vec::new();
    let mut records = Vec::new();
    for dir in pred_dirs {
        let meta = read_prediction_meta(dir)?;
        if labels.contains(&(meta.method, meta.arch)) {
            return Err(Error::Report(format!(
                "two prediction directories are both {:?} {}",
                meta.method, meta.arch
            )));
        }
        labels.push((meta.method, meta.arch));
        for p in &test {
            let path = prediction_path(dir, &p.patient_id);
            if !path.exists() {
                return Err(Error::Report(format!(
                    "missing prediction for patient {} in {}",
                    p.patient_id,
                    dir.display()
                )));
            }
            let pred = read_volume(&path)?;
            if pred.geometry() != p.ct.geometry() {
                return Err(Error::Shape(format!(
                    "prediction for {} is on {:?}, CT on {:?}",
                    p.patient_id,
                    pred.dims(),
                    p.ct.dims()
                )));
            }
            records.extend(evaluate_patient(&pred, p, meta.arch, meta.method)?);
        }
    }
    let report = build_report(&records)?;
    emit_report(&report, &records, out_dir)?;
    Ok(report)
}
