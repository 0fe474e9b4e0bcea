//! Synthetic cohort: parametric phantom volumes, severity-driven EHR vectors,
//! a miniature concept catalog and a seeded train/test split.
//!
//! Every generator is a pure function of its inputs. Per-patient randomness
//! comes from `derive_seed(root, patient_id)`, so records can be produced in
//! any order.
//!
//! ## Phantom geometry
//!
//! On an `H×W×D` grid with centre `c = (H/2, W/2, D/2) + j` (`j` an integer
//! jitter in `{-1,0,1}³`), voxel `(i,k,l)` sits at `(i+½, k+½, l+½)`:
//!
//! * brain: ellipsoid with radii `(0.40H, 0.36W, 0.38D)·(1 + 0.05u)`, an inner
//!   white-matter core at 0.7 of those radii;
//! * two hippocampal spheres at `c ± 0.25W` (second axis), `−0.12D` (third
//!   axis), radius `0.07H`, intensity `0.95 − 0.55·severity`;
//! * ventricle: ellipsoid at `c` with radii
//!   `(0.07 + 0.14s)H, (0.05 + 0.10s)W, (0.06 + 0.10s)D` and intensity
//!   [`VENTRICLE_INTENSITY`], painted last.
//!
//! The integer jitter leaves the ventricle's voxel count a function of
//! severity alone.
//!
//! ## EHR vector
//!
//! Coordinate `k < informative` is `β_k (s − ½) + σ ε_k` with
//! `β_k = 1.5 + 0.25 (k mod 4)`; every other coordinate is `ε_k`, with
//! `ε ~ N(0,1)`. In a cohort, informative entries are independently missing
//! (`NaN`) with probability `missing_rate`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};
use crate::rng::{derive_seed, rng_for, Rng as SeededRng};
use crate::tensor::Tensor;

/// A rank-3 `(H, W, D)` tensor with intensities in `[0, 1]`.
pub type Volume = Tensor;

pub const VENTRICLE_INTENSITY: f64 = 0.12;
pub const MIN_SIDE: usize = 16;
/// Severity threshold separating CN (label 0) from AD (label 1).
pub const SEVERITY_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub shape: [usize; 3],
    pub severity: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

struct Anatomy {
    center: [f64; 3],
    brain: [f64; 3],
    grey: f64,
    white: f64,
}

fn anatomy(p: &PhantomParams) -> Anatomy {
    let mut rng = rng_for(p.seed, "anatomy");
    let [h, w, d] = p.shape.map(|v| v as f64);
    let jitter = |rng: &mut SeededRng| rng.random_range(-1i32..=1) as f64;
    let center = [h / 2.0 + jitter(&mut rng), w / 2.0 + jitter(&mut rng), d / 2.0 + jitter(&mut rng)];
    let mut scale = || 1.0 + 0.05 * rng.random_range(-1.0..1.0);
    let brain = [0.40 * h * scale(), 0.36 * w * scale(), 0.38 * d * scale()];
    let grey = 0.50 + 0.05 * rng.random_range(-1.0..1.0);
    let white = 0.75 + 0.05 * rng.random_range(-1.0..1.0);
    Anatomy { center, brain, grey, white }
}

fn ventricle_radii(shape: [usize; 3], s: f64) -> [f64; 3] {
    let [h, w, d] = shape.map(|v| v as f64);
    [(0.07 + 0.14 * s) * h, (0.05 + 0.10 * s) * w, (0.06 + 0.10 * s) * d]
}

fn inside(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|k| ((p[k] - c[k]) / r[k]).powi(2)).sum::<f64>() <= 1.0
}

fn validate(p: &PhantomParams) -> Result<()> {
    if p.shape.iter().any(|&s| s < MIN_SIDE) {
        return param_err(format!("phantom shape {:?} too small: every side must be at least {MIN_SIDE}", p.shape));
    }
    if !(0.0..=1.0).contains(&p.severity) {
        return param_err(format!("severity {} outside [0, 1]", p.severity));
    }
    if !(p.noise_sigma >= 0.0) {
        return param_err(format!("noise_sigma {} must be non-negative", p.noise_sigma));
    }
    Ok(())
}

/// Render a phantom volume.
pub fn generate_phantom(p: &PhantomParams) -> Result<Volume> {
    validate(p)?;
    let a = anatomy(p);
    let [h, w, d] = p.shape;
    let vr = ventricle_radii(p.shape, p.severity);
    let hr = 0.07 * h as f64;
    let hip = [-1.0, 1.0].map(|side| [a.center[0], a.center[1] + side * 0.25 * w as f64, a.center[2] - 0.12 * d as f64]);
    let hip_val = 0.95 - 0.55 * p.severity;
    let core = a.brain.map(|r| 0.7 * r);
    let mut data = vec![0.0; h * w * d];
    let noise = Normal::new(0.0, p.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let mut rng = rng_for(p.seed, "noise");
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let q = [i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5];
                let mut v = 0.0;
                if inside(q, a.center, a.brain) {
                    v = if inside(q, a.center, core) { a.white } else { a.grey };
                }
                if hip.iter().any(|c| inside(q, *c, [hr; 3])) {
                    v = hip_val;
                }
                if inside(q, a.center, vr) {
                    v = VENTRICLE_INTENSITY;
                }
                if p.noise_sigma > 0.0 {
                    v = (v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
                data[(i * w + j) * d + k] = v;
            }
        }
    }
    Ok(Tensor::new(&p.shape, data))
}

/// Number of voxels inside the noise-free ventricle mask.
pub fn ventricle_voxel_count(shape: [usize; 3], severity: f64) -> usize {
    let [h, w, d] = shape;
    let c = [h as f64 / 2.0, w as f64 / 2.0, d as f64 / 2.0];
    let r = ventricle_radii(shape, severity);
    let mut n = 0;
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                if inside([i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5], c, r) {
                    n += 1;
                }
            }
        }
    }
    n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EhrParams {
    pub features: usize,
    pub informative: usize,
    /// Noise on informative coordinates.
    pub noise_sigma: f64,
    /// Probability that an informative entry is missing in a cohort.
    pub missing_rate: f64,
}

impl Default for EhrParams {
    fn default() -> Self {
        EhrParams { features: 88, informative: 8, noise_sigma: 0.7, missing_rate: 0.0 }
    }
}

pub fn informative_slope(k: usize) -> f64 {
    1.5 + 0.25 * (k % 4) as f64
}

/// One EHR vector (no missingness applied).
pub fn generate_ehr(severity: f64, seed: u64, params: &EhrParams) -> Result<Vec<f64>> {
    if params.features < 4 {
        return param_err(format!("need at least 4 EHR features, got {}", params.features));
    }
    if params.informative == 0 || params.informative > params.features {
        return param_err(format!("informative count {} invalid for {} features", params.informative, params.features));
    }
    if !(params.noise_sigma >= 0.0) {
        return param_err("EHR noise_sigma must be non-negative");
    }
    let mut rng = rng_for(seed, "ehr");
    let std = Normal::new(0.0, 1.0).unwrap();
    Ok((0..params.features)
        .map(|k| {
            let e: f64 = std.sample(&mut rng);
            if k < params.informative {
                informative_slope(k) * (severity - 0.5) + params.noise_sigma * e
            } else {
                e
            }
        })
        .collect())
}

const CLINICAL_NAMES: [&str; 12] = [
    "memory recall",
    "word finding",
    "spatial orientation",
    "executive planning",
    "daily living",
    "attention span",
    "apathy mood",
    "sleep rhythm",
    "gait balance",
    "visual construction",
    "semantic fluency",
    "delayed retrieval",
];

/// Column names: clinical phrases for informative features, single-token lab
/// identifiers for the rest.
pub fn feature_names(params: &EhrParams) -> Vec<String> {
    (0..params.features)
        .map(|k| {
            if k < params.informative {
                if k < CLINICAL_NAMES.len() {
                    CLINICAL_NAMES[k].to_string()
                } else {
                    format!("clinical{k} score")
                }
            } else {
                format!("lab{k}")
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptCategory {
    Symptom,
    Assessment,
    Drug,
    Comorbidity,
}

impl ConceptCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConceptCategory::Symptom => "symptom",
            ConceptCategory::Assessment => "assessment",
            ConceptCategory::Drug => "drug",
            ConceptCategory::Comorbidity => "comorbidity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "symptom" => ConceptCategory::Symptom,
            "assessment" => ConceptCategory::Assessment,
            "drug" => ConceptCategory::Drug,
            "comorbidity" => ConceptCategory::Comorbidity,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub description: String,
    pub category: ConceptCategory,
    /// EHR column the concept describes, if any.
    pub feature: Option<usize>,
}

/// Graded severity words used in concept descriptions and patient texts.
pub const LEVELS: [&str; 3] = ["severe", "moderate", "mild"];

/// Build a catalog of `m` concepts. Informative features get graded concepts
/// (`"<name> severe"`, then `moderate`, then `mild`, round-robin so small
/// catalogs still cover every informative feature); the remainder describe a
/// seeded selection of noise columns, then unrelated filler terms.
pub fn generate_concept_catalog(m: usize, seed: u64, params: &EhrParams) -> Result<Vec<Concept>> {
    if m < 10 {
        return param_err(format!("concept catalog needs at least 10 entries, got {m}"));
    }
    let names = feature_names(params);
    let mut out = Vec::with_capacity(m);
    'levels: for level in LEVELS {
        for k in 0..params.informative {
            if out.len() == m {
                break 'levels;
            }
            let category = if k % 2 == 0 { ConceptCategory::Symptom } else { ConceptCategory::Assessment };
            out.push((format!("{} {}", names[k], level), category, Some(k)));
        }
    }
    let mut noise_cols: Vec<usize> = (params.informative..params.features).collect();
    noise_cols.shuffle(&mut rng_for(seed, "catalog"));
    for (i, &k) in noise_cols.iter().enumerate() {
        if out.len() == m {
            break;
        }
        let category = if i % 2 == 0 { ConceptCategory::Drug } else { ConceptCategory::Comorbidity };
        out.push((names[k].clone(), category, Some(k)));
    }
    let mut filler = 0;
    while out.len() < m {
        out.push((format!("unrelated{filler} finding{filler}"), ConceptCategory::Comorbidity, None));
        filler += 1;
    }
    Ok(out
        .into_iter()
        .enumerate()
        .map(|(i, (description, category, feature))| Concept { id: format!("C{i:04}"), description, category, feature })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub ehr: Vec<f64>,
    /// 0 = CN, 1 = AD.
    pub label: u8,
    pub volume: Option<Volume>,
    pub split: Split,
    /// Set for test patients: the volume is stored but must not be used.
    pub masked: bool,
}

impl PatientRecord {
    /// The volume, unless it is absent or masked.
    pub fn visible_volume(&self) -> Option<&Volume> {
        if self.masked {
            None
        } else {
            self.volume.as_ref()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortParams {
    pub shape: [usize; 3],
    pub volume_noise: f64,
    pub ehr: EhrParams,
}

impl Default for CohortParams {
    fn default() -> Self {
        CohortParams { shape: [32, 32, 32], volume_noise: 0.03, ehr: EhrParams::default() }
    }
}

pub fn patient_id(i: usize) -> String {
    format!("P{i:04}")
}

/// Draw a severity from the class-conditional Beta components: CN on
/// `[0, 0.45]`, AD on `[0.55, 1]`.
pub fn draw_severity(label: u8, rng: &mut impl Rng) -> f64 {
    if label == 1 {
        0.55 + 0.45 * Beta::new(3.0, 2.0).unwrap().sample(rng)
    } else {
        0.45 * Beta::new(2.0, 3.0).unwrap().sample(rng)
    }
}

/// Generate `n` patients, label them by severity threshold and split them
/// `ratio : 1 − ratio` into train and test; test volumes are masked.
pub fn make_cohort(n: usize, prevalence: f64, ratio: f64, seed: u64, params: &CohortParams) -> Result<(Vec<PatientRecord>, CohortSplit)> {
    if n < 20 {
        return param_err(format!("cohort needs at least 20 patients, got {n}"));
    }
    if !(prevalence > 0.0 && prevalence < 1.0) {
        return param_err(format!("prevalence {prevalence} must lie strictly between 0 and 1"));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return param_err(format!("split ratio {ratio} must lie strictly between 0 and 1"));
    }
    if !(0.0..=1.0).contains(&params.ehr.missing_rate) {
        return param_err("missing_rate must lie in [0, 1]");
    }
    let ids: Vec<String> = (0..n).map(patient_id).collect();
    let labels: Vec<u8> = ids.iter().map(|id| u8::from(rng_for(derive_seed(seed, id), "label").random::<f64>() < prevalence)).collect();
    if labels.iter().all(|&y| y == labels[0]) {
        return param_err("degenerate cohort: every patient drew the same class");
    }
    let mut order = ids.clone();
    order.shuffle(&mut rng_for(seed, "split"));
    let n_train = ((n as f64) * ratio).round() as usize;
    let n_train = n_train.clamp(1, n - 1);
    let mut train_ids = order[..n_train].to_vec();
    let mut test_ids = order[n_train..].to_vec();
    train_ids.sort();
    test_ids.sort();
    let mut records = Vec::with_capacity(n);
    for (id, &label) in ids.iter().zip(&labels) {
        let pseed = derive_seed(seed, id);
        let severity = draw_severity(label, &mut rng_for(pseed, "severity"));
        let volume = generate_phantom(&PhantomParams { shape: params.shape, severity, noise_sigma: params.volume_noise, seed: pseed })?;
        let mut ehr = generate_ehr(severity, pseed, &params.ehr)?;
        let mut miss = rng_for(pseed, "missing");
        for v in ehr.iter_mut().take(params.ehr.informative) {
            if miss.random::<f64>() < params.ehr.missing_rate {
                *v = f64::NAN;
            }
        }
        let split = if test_ids.binary_search(id).is_ok() { Split::Test } else { Split::Train };
        records.push(PatientRecord { id: id.clone(), ehr, label, volume: Some(volume), split, masked: split == Split::Test });
    }
    Ok((records, CohortSplit { train_ids, test_ids, ratio }))
}

/// Ground-truth severity of a generated patient (for analysis only; the
/// pipeline never reads it).
pub fn patient_severity(seed: u64, id: &str, label: u8) -> f64 {
    draw_severity(label, &mut rng_for(derive_seed(seed, id), "severity"))
}
