//! Downstream classifiers: EHR-only baselines, the volume CNN and the
//! late-fusion model.

pub mod cnn;
pub mod forest;
pub mod fusion;
pub mod logistic;
pub mod mlp;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{param_err, Error, Result};
use crate::nn::ParamSet;

pub use cnn::{train_cnn3d, CnnConfig, CnnModel, Provenance, TaggedVolume};
pub use forest::{ForestConfig, RandomForest};
pub use fusion::{build_fusion_vector, predict_fusion, train_fusion, FusionFeature, FusionModel};
pub use logistic::LogisticRegression;
pub use mlp::{Mlp, MlpConfig};

/// Per-feature z-scoring fitted on training rows. Missing values (NaN) are
/// ignored when fitting and imputed with the training mean (0 after scaling).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else { return param_err("no rows to standardize") };
        let f = first.len();
        let mut mean = vec![0.0; f];
        let mut std = vec![1.0; f];
        for k in 0..f {
            let vals: Vec<f64> = rows.iter().map(|r| r[k]).filter(|v| !v.is_nan()).collect();
            if vals.is_empty() {
                continue;
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
            mean[k] = m;
            std[k] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(Standardizer { mean, std })
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| if v.is_nan() { 0.0 } else { (v - m) / s }).collect()
    }

    pub fn transform_all(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.transform(r)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EhrKind {
    Lr,
    Mlp,
    Rf,
}

impl EhrKind {
    pub const ALL: [EhrKind; 3] = [EhrKind::Lr, EhrKind::Mlp, EhrKind::Rf];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lr" => Ok(EhrKind::Lr),
            "mlp" => Ok(EhrKind::Mlp),
            "rf" => Ok(EhrKind::Rf),
            _ => param_err(format!("unknown EHR classifier {s:?} (expected lr, mlp or rf)")),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EhrKind::Lr => "lr",
            EhrKind::Mlp => "mlp",
            EhrKind::Rf => "rf",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EhrConfig {
    pub lr_l2: f64,
    pub mlp: MlpConfig,
    pub forest: ForestConfig,
}

impl Default for EhrConfig {
    fn default() -> Self {
        EhrConfig { lr_l2: 0.05, mlp: MlpConfig::default(), forest: ForestConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EhrBackend {
    Lr(LogisticRegression),
    Mlp(Mlp),
    Rf(RandomForest),
}

/// An EHR-only classifier with its input scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct EhrModel {
    pub scaler: Standardizer,
    pub backend: EhrBackend,
}

pub fn train_ehr_baseline(kind: EhrKind, rows: &[Vec<f64>], labels: &[u8], cfg: &EhrConfig) -> Result<EhrModel> {
    logistic::check_labels(labels)?;
    let scaler = Standardizer::fit(rows)?;
    let x = scaler.transform_all(rows);
    let backend = match kind {
        EhrKind::Lr => EhrBackend::Lr(LogisticRegression::fit(&x, labels, cfg.lr_l2)?),
        EhrKind::Mlp => EhrBackend::Mlp(Mlp::fit(&x, labels, &cfg.mlp)?),
        EhrKind::Rf => EhrBackend::Rf(RandomForest::fit(&x, labels, &cfg.forest)?),
    };
    Ok(EhrModel { scaler, backend })
}

impl EhrModel {
    pub fn kind(&self) -> EhrKind {
        match self.backend {
            EhrBackend::Lr(_) => EhrKind::Lr,
            EhrBackend::Mlp(_) => EhrKind::Mlp,
            EhrBackend::Rf(_) => EhrKind::Rf,
        }
    }

    /// Probability of the positive class.
    pub fn predict(&self, row: &[f64]) -> f64 {
        let x = self.scaler.transform(row);
        match &self.backend {
            EhrBackend::Lr(m) => m.predict(&x),
            EhrBackend::Mlp(m) => m.predict(&x),
            EhrBackend::Rf(m) => m.predict(&x),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let (model, arrays) = match &self.backend {
            EhrBackend::Lr(m) => (serde_json::to_value(m).expect("serializable"), ParamSet::new()),
            EhrBackend::Rf(m) => (serde_json::to_value(m).expect("serializable"), ParamSet::new()),
            EhrBackend::Mlp(m) => (serde_json::to_value(&m.config).expect("serializable"), m.params.clone()),
        };
        let cfg = serde_json::json!({ "kind": self.kind(), "scaler": self.scaler, "model": model });
        Checkpoint::new(cfg, arrays)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind: EhrKind = serde_json::from_value(ck.config["kind"].clone())?;
        let scaler: Standardizer = serde_json::from_value(ck.config["scaler"].clone())?;
        let model = ck.config["model"].clone();
        let backend = match kind {
            EhrKind::Lr => EhrBackend::Lr(serde_json::from_value(model)?),
            EhrKind::Rf => EhrBackend::Rf(serde_json::from_value(model)?),
            EhrKind::Mlp => {
                let config: MlpConfig = serde_json::from_value(model)?;
                let mut m = Mlp::new(scaler.mean.len(), config);
                m.params.assign(&ck.arrays).map_err(|e| Error::Format(format!("MLP checkpoint: {e}")))?;
                EhrBackend::Mlp(m)
            }
        };
        Ok(EhrModel { scaler, backend })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_kind_is_rejected() {
        assert!(EhrKind::parse("svm").is_err());
        assert_eq!(EhrKind::parse("RF").unwrap(), EhrKind::Rf);
    }

    #[test]
    fn standardizer_imputes_missing_with_the_mean() {
        let rows = vec![vec![1.0, f64::NAN], vec![3.0, 4.0], vec![f64::NAN, 6.0]];
        let s = Standardizer::fit(&rows).unwrap();
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.transform(&[f64::NAN, f64::NAN]), vec![0.0, 0.0]);
        assert_eq!(s.transform(&[3.0, 6.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn every_kind_round_trips_through_a_checkpoint() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, ((i * 7) % 5) as f64, if i % 4 == 0 { f64::NAN } else { 1.0 }]).collect();
        let labels: Vec<u8> = (0..30).map(|i| (i >= 15) as u8).collect();
        let cfg = EhrConfig { mlp: MlpConfig { epochs: 20, ..MlpConfig::default() }, ..EhrConfig::default() };
        for kind in EhrKind::ALL {
            let m = train_ehr_baseline(kind, &rows, &labels, &cfg).unwrap();
            let back = EhrModel::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap()).unwrap();
            for r in &rows {
                let (a, b) = (m.predict(r), back.predict(r));
                assert!((0.0..=1.0).contains(&a));
                assert!((a - b).abs() < 1e-5, "{kind:?}: {a} vs {b}");
            }
        }
    }
}
