//! Pipeline configuration and its flat `key = value` file format.
//!
//! Every field has a default. Keys are dotted paths into the structure
//! (`ae.epochs`, `gat.heads`, `cohort.missing_rate`). Lines starting with
//! `#` are comments. Values are written as JSON scalars or arrays; string
//! values may be left unquoted. The environment variable `MIRAGE_SEED`
//! overrides `seed`.
//!
//! Per-stage seeds, the autoencoder volume shape and the GAT width are
//! derived from `seed`, `cohort.shape` and `ae.latent_dim` respectively and
//! are not written.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::alignment::{JointConfig, WC_EPSILON};
use crate::autoencoder::AEConfig;
use crate::classifiers::{CnnConfig, EhrConfig};
use crate::cohort::{CohortParams, EhrParams};
use crate::dataset::DatasetMeta;
use crate::error::{param_err, Error, Result};
use crate::gat::GatConfig;
use crate::rng::derive_seed;

pub const SEED_ENV: &str = "MIRAGE_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    None,
    NoKg,
    NoGat,
    NoAe,
    NoAdapter,
}

impl Variant {
    pub const ABLATIONS: [Variant; 4] = [Variant::NoKg, Variant::NoGat, Variant::NoAe, Variant::NoAdapter];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::NoKg => "no_kg",
            Variant::NoGat => "no_gat",
            Variant::NoAe => "no_ae",
            Variant::NoAdapter => "no_adapter",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" | "full" => Ok(Variant::None),
            "no_kg" => Ok(Variant::NoKg),
            "no_gat" => Ok(Variant::NoGat),
            "no_ae" => Ok(Variant::NoAe),
            "no_adapter" => Ok(Variant::NoAdapter),
            _ => param_err(format!("unknown ablation variant {s:?} (expected none, no_kg, no_gat, no_ae or no_adapter)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n: usize,
    pub prevalence: f64,
    pub ratio: f64,
    pub concepts: usize,
    pub shape: [usize; 3],
    pub volume_noise: f64,
    pub features: usize,
    pub informative: usize,
    pub ehr_noise: f64,
    pub missing_rate: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        let p = CohortParams::default();
        CohortConfig {
            n: 200,
            prevalence: 0.5,
            ratio: 0.7,
            concepts: 60,
            shape: p.shape,
            volume_noise: p.volume_noise,
            features: p.ehr.features,
            informative: p.ehr.informative,
            ehr_noise: p.ehr.noise_sigma,
            // Without missingness the EHR baselines saturate at BAcc 1.0 and
            // there is nothing left for an imaging path to add.
            missing_rate: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KgConfig {
    /// Concepts linked per patient.
    pub top_m: usize,
    /// Minimum cosine similarity for a patient-concept link.
    pub threshold: f64,
}

impl Default for KgConfig {
    fn default() -> Self {
        KgConfig { top_m: 5, threshold: 0.3 }
    }
}

/// Feed-forward networks used by the ablations: the EHR → latent regressor
/// (`no_kg`) and the latent → volume generator (`no_ae`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub regressor_hidden: usize,
    pub regressor_epochs: usize,
    pub regressor_learning_rate: f64,
    pub generator_hidden: usize,
    pub generator_epochs: usize,
    pub generator_learning_rate: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            regressor_hidden: 128,
            regressor_epochs: 200,
            regressor_learning_rate: 1e-3,
            generator_hidden: 256,
            generator_epochs: 60,
            generator_learning_rate: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Output directory for every artifact.
    pub out: String,
    /// Existing dataset directory; empty means `<out>/data`, generated on demand.
    pub data: String,
    pub seed: u64,
    pub ablation: Variant,
    /// Fraction of the training split held out to fit the fusion model.
    pub calibration_fraction: f64,
    pub wc_epsilon: f64,
    pub cohort: CohortConfig,
    pub ae: AEConfig,
    pub kg: KgConfig,
    pub gat: GatConfig,
    pub joint: JointConfig,
    pub cnn: CnnConfig,
    pub ehr: EhrConfig,
    pub ablations: AblationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            out: "mirage-out".into(),
            data: String::new(),
            seed: 0,
            ablation: Variant::None,
            calibration_fraction: 0.25,
            wc_epsilon: WC_EPSILON,
            cohort: CohortConfig::default(),
            ae: AEConfig::default(),
            kg: KgConfig::default(),
            gat: GatConfig::default(),
            joint: JointConfig::default(),
            cnn: CnnConfig::default(),
            ehr: EhrConfig::default(),
            ablations: AblationConfig::default(),
        }
        .resolved()
    }
}

fn is_derived(key: &str) -> bool {
    key.ends_with(".seed") || key == "ae.volume_shape" || key == "gat.d"
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        cur = cur.as_object_mut().expect("object").entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    cur.as_object_mut().expect("object").insert(parts[parts.len() - 1].to_string(), v);
}

impl PipelineConfig {
    /// Fill derived fields from the primary ones.
    pub fn resolved(mut self) -> Self {
        let root = self.seed;
        self.ae.volume_shape = self.cohort.shape;
        self.ae.seed = derive_seed(root, "ae");
        self.gat.d = self.ae.latent_dim;
        self.gat.seed = derive_seed(root, "gat");
        self.joint.seed = derive_seed(root, "adapter");
        self.cnn.seed = derive_seed(root, "cnn");
        self.ehr.mlp.seed = derive_seed(root, "mlp");
        self.ehr.forest.seed = derive_seed(root, "forest");
        self
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out)
    }

    pub fn data_dir(&self) -> PathBuf {
        if self.data.is_empty() {
            self.out_dir().join("data")
        } else {
            PathBuf::from(&self.data)
        }
    }

    pub fn dataset_meta(&self) -> DatasetMeta {
        let c = &self.cohort;
        DatasetMeta {
            n: c.n,
            prevalence: c.prevalence,
            ratio: c.ratio,
            seed: derive_seed(self.seed, "cohort"),
            concepts: c.concepts,
            params: CohortParams {
                shape: c.shape,
                volume_noise: c.volume_noise,
                ehr: EhrParams { features: c.features, informative: c.informative, noise_sigma: c.ehr_noise, missing_rate: c.missing_rate },
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ae.validate()?;
        if !(0.0..0.9).contains(&self.calibration_fraction) {
            return param_err("calibration_fraction must lie in [0, 0.9)");
        }
        if self.kg.top_m == 0 {
            return param_err("kg.top_m must be positive");
        }
        if self.cnn.channels.contains(&0) {
            return param_err("cnn.channels must be positive");
        }
        Ok(())
    }

    /// Non-derived keys with their values, in sorted order.
    pub fn to_pairs(&self) -> BTreeMap<String, Value> {
        let mut flat = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("serializable config"), &mut flat);
        flat.retain(|k, _| !is_derived(k));
        flat
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let v = match v {
                Value::String(s) => s,
                other => other.to_string(),
            };
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    /// Parse a config file body; unspecified keys keep their defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let defaults = PipelineConfig::default().to_pairs();
        let mut root = serde_json::to_value(PipelineConfig::default())?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("config line {}: expected key = value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if is_derived(k) {
                return Err(Error::Format(format!("config line {}: {k} is derived and cannot be set", lineno + 1)));
            }
            let default = defaults.get(k).ok_or_else(|| Error::Format(format!("config line {}: unknown key {k}", lineno + 1)))?;
            let value = match default {
                Value::String(_) => Value::String(v.trim_matches('"').to_string()),
                _ => serde_json::from_str(v).map_err(|e| Error::Format(format!("config line {}: bad value for {k}: {e}", lineno + 1)))?,
            };
            set_path(&mut root, k, value);
        }
        let cfg: PipelineConfig = serde_json::from_value(root).map_err(|e| Error::Format(format!("config: {e}")))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Apply the `MIRAGE_SEED` override if set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s.trim().parse().map_err(|_| Error::InvalidParam(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        Ok(self.resolved())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }
}
