//! Region-restricted image metrics, cohort aggregation, paired t-tests and
//! report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::{Condition, PatientRecord};
use crate::districts::binary_masks;
use crate::error::{Error, Result};
use crate::models::Arch;
use crate::volume::{BinaryMask, Dims, MaskScope, Volume};

pub const PSNR_MAX: f64 = 1.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// p-values below this are printed as `<1e-12`.
pub const P_FLOOR: f64 = 1e-12;

fn check_region(pred: &Volume, reference: &Volume, region: &BinaryMask) -> Result<usize> {
    if pred.dims() != reference.dims() || region.dims() != pred.dims() {
        return Err(Error::Shape(format!(
            "pred {:?}, ref {:?}, region {:?}",
            pred.dims(),
            reference.dims(),
            region.dims()
        )));
    }
    let n = region.count();
    if n == 0 {
        return Err(Error::Region(format!("{} region is empty", region.scope())));
    }
    Ok(n)
}

fn region_values<'a>(
    pred: &'a Volume,
    reference: &'a Volume,
    region: &'a BinaryMask,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.data()
        .iter()
        .zip(reference.data())
        .zip(region.indicator())
        .filter(|(_, &m)| m)
        .map(|((&a, &b), _)| (a as f64, b as f64))
}

/// Mean absolute error over the region.
pub fn mae(pred: &Volume, reference: &Volume, region: &BinaryMask) -> Result<f64> {
    let n = check_region(pred, reference, region)?;
    Ok(region_values(pred, reference, region).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64)
}

/// PSNR in dB with a peak of 1; `+∞` when the region matches exactly.
pub fn psnr(pred: &Volume, reference: &Volume, region: &BinaryMask) -> Result<f64> {
    let n = check_region(pred, reference, region)?;
    let mse = region_values(pred, reference, region).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PSNR_MAX * PSNR_MAX / mse).log10()
    })
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    std::array::from_fn(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
}

/// Truncated 1D Gaussian filter along `axis` of a box-shaped buffer,
/// unnormalized (taps falling outside `valid` are dropped).
fn filter_axis(data: &[f64], dims: Dims, axis: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = SSIM_WINDOW / 2;
    let stride = [1, dims[0], dims[0] * dims[1]][axis];
    let len = dims[axis];
    let mut out = vec![0.0; data.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let pos = (i / stride) % len;
        let lo = pos.saturating_sub(r);
        let hi = (pos + r).min(len - 1);
        let mut acc = 0.0;
        for q in lo..=hi {
            acc += taps[q + r - pos] * data[i - pos * stride + q * stride];
        }
        *o = acc;
    }
    out
}

/// 3D SSIM with a 7³ Gaussian window (σ = 1.5), averaged over region voxels.
/// Windows are truncated at the volume border and their weights renormalized.
pub fn ssim3d(pred: &Volume, reference: &Volume, region: &BinaryMask) -> Result<f64> {
    let n_region = check_region(pred, reference, region)?;
    let (lo, hi) = region.bounding_box().expect("nonempty region has a bounding box");
    if (0..3).any(|a| hi[a] - lo[a] + 1 < SSIM_WINDOW) {
        return Err(Error::Region(format!(
            "{} region bounding box {:?} is smaller than the {SSIM_WINDOW}³ window",
            region.scope(),
            [0, 1, 2].map(|a| hi[a] - lo[a] + 1)
        )));
    }
    let dims = pred.dims();
    let r = SSIM_WINDOW / 2;
    // Work on the region's box plus the window radius; windows never reach
    // further, and the volume border still truncates them correctly.
    let b0 = lo.map(|v| v.saturating_sub(r));
    let b1 = [0, 1, 2].map(|a| (hi[a] + r).min(dims[a] - 1));
    let bd = [0, 1, 2].map(|a| b1[a] - b0[a] + 1);
    let bn = bd.iter().product::<usize>();
    let mut fields = vec![vec![0.0; bn]; 5];
    let mut ones = vec![0.0; bn];
    let mut i = 0;
    for z in b0[2]..=b1[2] {
        for y in b0[1]..=b1[1] {
            for x in b0[0]..=b1[0] {
                let a = pred.get(x, y, z) as f64;
                let b = reference.get(x, y, z) as f64;
                fields[0][i] = a;
                fields[1][i] = b;
                fields[2][i] = a * a;
                fields[3][i] = b * b;
                fields[4][i] = a * b;
                ones[i] = 1.0;
                i += 1;
            }
        }
    }
    // Truncation happens at the volume border, not the working box border:
    // the box only stops short of the volume where no window reaches anyway.
    let taps = gaussian_taps();
    let smooth = |f: &[f64]| -> Vec<f64> {
        let f = filter_axis(f, bd, 0, &taps);
        let f = filter_axis(&f, bd, 1, &taps);
        filter_axis(&f, bd, 2, &taps)
    };
    let norm = smooth(&ones);
    let moments: Vec<Vec<f64>> = fields.iter().map(|f| smooth(f)).collect();
    let c1 = (SSIM_K1 * PSNR_MAX).powi(2);
    let c2 = (SSIM_K2 * PSNR_MAX).powi(2);
    let mut total = 0.0;
    let mut i = 0;
    for z in b0[2]..=b1[2] {
        for y in b0[1]..=b1[1] {
            for x in b0[0]..=b1[0] {
                if region.get(x, y, z) {
                    let w = norm[i];
                    let mx = moments[0][i] / w;
                    let my = moments[1][i] / w;
                    let vx = moments[2][i] / w - mx * mx;
                    let vy = moments[3][i] / w - my * my;
                    let cxy = moments[4][i] / w - mx * my;
                    total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                }
                i += 1;
            }
        }
    }
    Ok(total / n_region as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Proposed,
    Competitor,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Competitor => "competitor",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Proposed => "District-specific",
            Method::Competitor => "Whole-body",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mae,
    Psnr,
    Ssim,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Mae, Metric::Psnr, Metric::Ssim];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mae => "MAE",
            Metric::Psnr => "PSNR",
            Metric::Ssim => "SSIM",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub patient_id: String,
    /// `head`/`trunk`/`arms`/`legs`/`whole_body`/`lesion`.
    pub scope: String,
    pub condition: Condition,
    pub arch: Arch,
    pub method: Method,
    pub mae: f64,
    /// `+∞` on an exact match.
    pub psnr: f64,
    /// `None` when the region is too thin for the SSIM window.
    pub ssim: Option<f64>,
}

impl MetricRecord {
    pub fn value(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Mae => Some(self.mae),
            Metric::Psnr => Some(self.psnr),
            Metric::Ssim => self.ssim,
        }
    }
}

fn record(
    pred: &Volume,
    p: &PatientRecord,
    reference: &Volume,
    region: &BinaryMask,
    arch: Arch,
    method: Method,
) -> Result<MetricRecord> {
    let ssim = match ssim3d(pred, reference, region) {
        Ok(v) => Some(v),
        Err(Error::Region(msg)) => {
            log::info!("{}: SSIM skipped: {msg}", p.patient_id);
            None
        }
        Err(e) => return Err(e),
    };
    Ok(MetricRecord {
        patient_id: p.patient_id.clone(),
        scope: region.scope().to_string(),
        condition: p.condition,
        arch,
        method,
        mae: mae(pred, reference, region)?,
        psnr: psnr(pred, reference, region)?,
        ssim,
    })
}

/// Metrics for every nonempty district, the whole body (union of
/// districts) and the lesion mask when present.
pub fn evaluate_patient(pred: &Volume, p: &PatientRecord, arch: Arch, method: Method) -> Result<Vec<MetricRecord>> {
    let reference = p
        .pet
        .as_ref()
        .ok_or_else(|| Error::Report(format!("{} has no reference PET", p.patient_id)))?;
    let mut masks: Vec<BinaryMask> = binary_masks(&p.district_mask).into_iter().collect();
    masks.push(p.district_mask.body_mask());
    if let Some(l) = &p.lesion_mask {
        masks.push(l.clone());
    }
    let mut out = Vec::new();
    for m in &masks {
        if m.is_empty() {
            log::info!("{}: {} mask is empty, no metrics", p.patient_id, m.scope());
            continue;
        }
        out.push(record(pred, p, reference, m, arch, method)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Scope,
    /// Whole-body records grouped by oncological condition.
    Condition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group: String,
    pub metric: Metric,
    pub method: Method,
    pub arch: Arch,
    pub n: usize,
    pub mean: f64,
    pub se: f64,
    /// Infinite values (exact PSNR matches) left out of the mean.
    pub n_infinite: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestRow {
    pub group: String,
    pub metric: Metric,
    pub arch: Arch,
    pub n: usize,
    pub t: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub rows: Vec<SummaryRow>,
    pub ttests: Vec<TTestRow>,
}

/// Mean and standard error (sample std with n − 1, over √n); SE = 0 for n = 1.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub n: usize,
}

/// Paired two-tailed Student's t-test on `a − b`.
///
/// All-zero differences give `t = 0, p = 1`; zero spread with a nonzero
/// mean gives `t = ±∞, p = 0`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Pairing(format!("{} vs {} values", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Pairing(format!("need at least 2 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    if sd == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0, n }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                p: 0.0,
                n,
            }
        });
    }
    let t = mean / (sd / nf.sqrt());
    let dist = StudentsT::new(0.0, 1.0, nf - 1.0).expect("positive degrees of freedom");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, n })
}

fn group_key(r: &MetricRecord, by: GroupBy) -> Option<String> {
    match by {
        GroupBy::Scope => Some(r.scope.clone()),
        GroupBy::Condition => (r.scope == MaskScope::WholeBody.to_string()).then(|| r.condition.name().to_string()),
    }
}

/// Mean ± SE per (group, metric, method, arch), plus proposed-vs-competitor
/// paired t-tests per (group, metric, arch) matched by patient.
pub fn aggregate(records: &[MetricRecord], by: GroupBy) -> Result<CohortReport> {
    type Key = (String, Metric, Method, Arch);
    let mut groups: BTreeMap<Key, Vec<(String, f64)>> = BTreeMap::new();
    for r in records {
        let Some(g) = group_key(r, by) else { continue };
        for m in Metric::ALL {
            if let Some(v) = r.value(m) {
                groups.entry((g.clone(), m, r.method, r.arch)).or_default().push((r.patient_id.clone(), v));
            }
        }
    }
    if groups.is_empty() {
        return Err(Error::Report("no records to aggregate".into()));
    }
    let mut rows = Vec::new();
    for ((group, metric, method, arch), vals) in &groups {
        let finite: Vec<f64> = vals.iter().map(|(_, v)| *v).filter(|v| v.is_finite()).collect();
        let n_infinite = vals.len() - finite.len();
        if n_infinite > 0 {
            log::info!("{group}/{}/{}: {n_infinite} infinite values excluded", metric.name(), method.name());
        }
        let (mean, se) = if finite.is_empty() {
            (f64::INFINITY, 0.0)
        } else {
            mean_se(&finite)
        };
        rows.push(SummaryRow {
            group: group.clone(),
            metric: *metric,
            method: *method,
            arch: *arch,
            n: finite.len(),
            mean,
            se,
            n_infinite,
        });
    }
    let mut ttests = Vec::new();
    for ((group, metric, method, arch), proposed) in &groups {
        if *method != Method::Proposed {
            continue;
        }
        let Some(competitor) = groups.get(&(group.clone(), *metric, Method::Competitor, *arch)) else {
            continue;
        };
        let theirs: BTreeMap<&str, f64> = competitor.iter().map(|(p, v)| (p.as_str(), *v)).collect();
        let (a, b): (Vec<f64>, Vec<f64>) = proposed
            .iter()
            .filter_map(|(p, v)| theirs.get(p.as_str()).map(|w| (*v, *w)))
            .filter(|(v, w)| v.is_finite() && w.is_finite())
            .unzip();
        if a.len() < 2 {
            continue;
        }
        let tt = paired_ttest(&a, &b)?;
        ttests.push(TTestRow {
            group: group.clone(),
            metric: *metric,
            arch: *arch,
            n: tt.n,
            t: tt.t,
            p: tt.p,
        });
    }
    Ok(CohortReport { rows, ttests })
}

/// Report sections in the order they are written.
pub const LEVELS: [&str; 3] = ["district", "lesion", "condition"];

fn level_groups(level: &str) -> Vec<String> {
    match level {
        "district" => ["head", "trunk", "arms", "legs", "whole_body"].map(String::from).to_vec(),
        "lesion" => vec!["lesion".into()],
        _ => Condition::ALL.iter().map(|c| c.name().to_string()).collect(),
    }
}

/// The three cohort tables: per district and whole body, lesions, and
/// whole-body metrics per condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub district: CohortReport,
    pub lesion: Option<CohortReport>,
    pub condition: CohortReport,
}

pub fn build_report(records: &[MetricRecord]) -> Result<Report> {
    let by_scope = aggregate(records, GroupBy::Scope)?;
    let split = |keep: &dyn Fn(&str) -> bool| CohortReport {
        rows: by_scope.rows.iter().filter(|r| keep(&r.group)).cloned().collect(),
        ttests: by_scope.ttests.iter().filter(|r| keep(&r.group)).cloned().collect(),
    };
    let district = split(&|g| g != "lesion");
    let lesion = split(&|g| g == "lesion");
    Ok(Report {
        district,
        lesion: (!lesion.rows.is_empty()).then_some(lesion),
        condition: aggregate(records, GroupBy::Condition)?,
    })
}

fn fmt_p(p: f64) -> String {
    if p < P_FLOOR {
        format!("<{P_FLOOR:e}")
    } else {
        format!("{p:.6e}")
    }
}

fn fmt_num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.6}")
    }
}

fn summary_csv(level: &str, r: &CohortReport, out: &mut String) {
    for row in &r.rows {
        let _ = writeln!(
            out,
            "{level},{},{},{},{},{},{},{},{}",
            row.group,
            row.metric.name(),
            row.method.name(),
            row.arch,
            row.n,
            fmt_num(row.mean),
            fmt_num(row.se),
            row.n_infinite
        );
    }
}

fn ttest_csv(level: &str, r: &CohortReport, out: &mut String) {
    for t in &r.ttests {
        let _ = writeln!(
            out,
            "{level},{},{},{},{},{},{}",
            t.group,
            t.metric.name(),
            t.arch,
            t.n,
            fmt_num(t.t),
            fmt_p(t.p)
        );
    }
}

/// Plain-text table: one row-group per region/condition, one row per
/// metric, one column per (method, arch).
pub fn render_table(title: &str, level: &str, r: &CohortReport) -> String {
    let mut cols: Vec<(Method, Arch)> = r.rows.iter().map(|x| (x.method, x.arch)).collect();
    cols.sort_by_key(|(m, a)| (*m, a.name()));
    cols.dedup();
    let mut out = format!("{title}\n");
    let _ = write!(out, "{:<18} {:<6}", "group", "metric");
    for (m, a) in &cols {
        let _ = write!(out, " {:>26}", format!("{} {}", m.label(), a));
    }
    out.push('\n');
    for g in level_groups(level) {
        if !r.rows.iter().any(|x| x.group == g) {
            continue;
        }
        for metric in Metric::ALL {
            let _ = write!(out, "{:<18} {:<6}", g, metric.name());
            for (m, a) in &cols {
                let cell = r
                    .rows
                    .iter()
                    .find(|x| x.group == g && x.metric == metric && x.method == *m && x.arch == *a)
                    .map(|x| format!("{:.4} ± {:.4}", x.mean, x.se))
                    .unwrap_or_else(|| "-".into());
                let _ = write!(out, " {cell:>26}");
            }
            out.push('\n');
        }
    }
    out
}

pub const SUMMARY_HEADER: &str = "level,group,metric,method,arch,n,mean,se,n_infinite";
pub const TTEST_HEADER: &str = "level,group,metric,arch,n,t,p";

/// Writes `summary.csv`, `ttests.csv`, `records.jsonl` and one text table
/// per level into `dir`.
pub fn emit_report(report: &Report, records: &[MetricRecord], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut summary = format!("{SUMMARY_HEADER}\n");
    let mut ttests = format!("{TTEST_HEADER}\n");
    let mut text = String::new();
    let levels: [(&str, &str, Option<&CohortReport>); 3] = [
        ("district", "District and whole-body performance", Some(&report.district)),
        ("lesion", "Lesion-level performance", report.lesion.as_ref()),
        ("condition", "Oncological condition performance (whole body)", Some(&report.condition)),
    ];
    for (level, title, r) in levels {
        let Some(r) = r else { continue };
        summary_csv(level, r, &mut summary);
        ttest_csv(level, r, &mut ttests);
        let table = render_table(title, level, r);
        let path = dir.join(format!("{level}_table.txt"));
        fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
        text.push_str(&table);
        text.push('\n');
    }
    let mut lines = String::new();
    for r in records {
        lines.push_str(&serde_json::to_string(r).expect("record serializes"));
        lines.push('\n');
    }
    for (name, body) in [("summary.csv", summary), ("ttests.csv", ttests), ("records.jsonl", lines), ("report.txt", text)] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
