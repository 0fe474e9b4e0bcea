//! Late fusion of an EHR probability and a volume probability.

use serde::{Deserialize, Serialize};

use crate::classifiers::logistic::LogisticRegression;
use crate::error::{param_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionFeature {
    pub p_ehr: f64,
    pub p_mri: f64,
    pub abs_diff: f64,
}

impl FusionFeature {
    pub fn as_vec(&self) -> Vec<f64> {
        vec![self.p_ehr, self.p_mri, self.abs_diff]
    }
}

pub fn build_fusion_vector(p_ehr: f64, p_mri: f64) -> Result<FusionFeature> {
    for (name, p) in [("p_ehr", p_ehr), ("p_mri", p_mri)] {
        if !(0.0..=1.0).contains(&p) {
            return param_err(format!("{name} = {p} is not a probability"));
        }
    }
    Ok(FusionFeature { p_ehr, p_mri, abs_diff: (p_ehr - p_mri).abs() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    pub lr: LogisticRegression,
}

/// Light ridge keeps the fit finite when the inputs separate the labels.
pub const FUSION_L2: f64 = 1e-2;

pub fn train_fusion(features: &[FusionFeature], labels: &[u8]) -> Result<FusionModel> {
    let rows: Vec<Vec<f64>> = features.iter().map(FusionFeature::as_vec).collect();
    Ok(FusionModel { lr: LogisticRegression::fit(&rows, labels, FUSION_L2)? })
}

pub fn predict_fusion(model: &FusionModel, f: &FusionFeature) -> f64 {
    model.lr.predict(&f.as_vec())
}
