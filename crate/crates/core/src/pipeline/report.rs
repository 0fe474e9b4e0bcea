//! Prediction files and experiment reports.
//!
//! A prediction file is CSV with header `id,label,score`, one row per test
//! patient, `score` being P(AD). Every metric row in a report names its
//! prediction file and that file's SHA-256, and the metrics can be
//! recomputed from the file alone.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{classification_metrics, Metrics};

pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: u8,
    pub score: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<String> {
    let mut s = String::from("id,label,score\n");
    for p in preds {
        if !(0.0..=1.0).contains(&p.score) {
            return Err(Error::InvalidParam(format!("score {} for {} is not a probability", p.score, p.id)));
        }
        writeln!(s, "{},{},{}", p.id, p.label, p.score).expect("string write");
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, &s)?;
    Ok(sha256_hex(s.as_bytes()))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
    text.lines()
        .skip(1)
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("bad prediction line {line:?} in {}", path.display()));
            if cols.len() != 3 {
                return Err(bad());
            }
            Ok(Prediction { id: cols[0].to_string(), label: cols[1].parse().map_err(|_| bad())?, score: cols[2].parse().map_err(|_| bad())? })
        })
        .collect()
}

pub fn metrics_of(preds: &[Prediction]) -> Result<Metrics> {
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let labels: Vec<u8> = preds.iter().map(|p| p.label).collect();
    classification_metrics(&scores, &labels, THRESHOLD)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// `ehr_lr`, `ehr_mlp`, `ehr_rf`, `syn_mri`, `latent` or `fusion`.
    pub method: String,
    pub metrics: Metrics,
    /// Prediction file, relative to the report's directory.
    pub predictions: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub variant: String,
    /// Crate version plus short hashes of the configuration and dataset.
    pub provenance: String,
    pub config: serde_json::Value,
    pub rows: Vec<MetricRow>,
    /// Decoder invocations observed while evaluating the latent path.
    pub latent_decoder_calls: Option<u64>,
}

impl ExperimentReport {
    pub fn row(&self, method: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn bacc(&self, method: &str) -> Option<f64> {
        self.row(method).map(|r| r.metrics.bacc)
    }

    /// Best balanced accuracy among the EHR-only baselines.
    pub fn best_ehr(&self) -> Option<(&str, f64)> {
        self.rows
            .iter()
            .filter(|r| r.method.starts_with("ehr_"))
            .map(|r| (r.method.as_str(), r.metrics.bacc))
            .fold(None, |best, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable report");
        s.push('\n');
        s
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "variant: {}", self.variant).unwrap();
        writeln!(s, "provenance: {}", self.provenance).unwrap();
        writeln!(s, "{:<10} {:>6} {:>6} {:>6} {:>6}  predictions", "method", "BAcc", "AUC", "SEN", "SPE").unwrap();
        for r in &self.rows {
            let m = &r.metrics;
            let auc = m.auc.map(|a| format!("{a:.3}")).unwrap_or_else(|| "n/a".into());
            writeln!(s, "{:<10} {:>6.3} {:>6} {:>6.3} {:>6.3}  {}", r.method, m.bacc, auc, m.sen, m.spe, r.predictions).unwrap();
        }
        if let (Some((name, best)), Some(fused)) = (self.best_ehr(), self.bacc("fusion")) {
            let rel = if best > 0.0 { 100.0 * (fused - best) / best } else { f64::NAN };
            writeln!(s, "fusion vs best EHR-only ({name}): {:+.3} absolute, {:+.1}% relative", fused - best, rel).unwrap();
        }
        if let Some(c) = self.latent_decoder_calls {
            writeln!(s, "decoder calls during latent evaluation: {c}").unwrap();
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), self.to_json())?;
        fs::write(dir.join("report.txt"), self.table())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("report.json")).map_err(|e| Error::NotFound(format!("{}: {e}", dir.join("report.json").display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Recompute each row from its prediction file and check the hash.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for r in &self.rows {
            let path = dir.join(&r.predictions);
            let bytes = fs::read(&path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
            if sha256_hex(&bytes) != r.sha256 {
                return Err(Error::Format(format!("{} changed since the report was written", path.display())));
            }
            if metrics_of(&read_predictions(&path)?)? != r.metrics {
                return Err(Error::Format(format!("metrics for {} do not match {}", r.method, path.display())));
            }
        }
        Ok(())
    }
}

/// Ablation comparison across variants, keyed by the fusion balanced accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub provenance: String,
    pub reports: Vec<ExperimentReport>,
}

impl AblationSummary {
    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "provenance: {}", self.provenance).unwrap();
        writeln!(s, "{:<11} {:>7} {:>7} {:>7} {:>7}", "variant", "fusion", "syn_mri", "latent", "ehr_mlp").unwrap();
        for r in &self.reports {
            let f = |m: &str| r.bacc(m).map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into());
            writeln!(s, "{:<11} {:>7} {:>7} {:>7} {:>7}", r.variant, f("fusion"), f("syn_mri"), f("latent"), f("ehr_mlp")).unwrap();
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(dir.join("summary.json"), json)?;
        fs::write(dir.join("summary.txt"), self.table())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prediction_files_back_their_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let preds: Vec<Prediction> =
            [(0.9, 1), (0.8, 0), (0.3, 1), (0.2, 0)].iter().enumerate().map(|(i, &(s, y))| Prediction { id: format!("P{i}"), label: y, score: s }).collect();
        let sha = write_predictions(&dir.path().join("p/latent.csv"), &preds).unwrap();
        assert_eq!(read_predictions(&dir.path().join("p/latent.csv")).unwrap(), preds);
        let metrics = metrics_of(&preds).unwrap();
        assert_eq!(metrics.auc, Some(0.75));
        let report = ExperimentReport {
            variant: "none".into(),
            provenance: "test".into(),
            config: serde_json::json!({}),
            rows: vec![MetricRow { method: "latent".into(), metrics, predictions: "p/latent.csv".into(), sha256: sha }],
            latent_decoder_calls: Some(0),
        };
        report.verify(dir.path()).unwrap();
        std::fs::write(dir.path().join("p/latent.csv"), "id,label,score\nP0,1,0.1\n").unwrap();
        assert!(report.verify(dir.path()).is_err());
        assert!(write_predictions(&dir.path().join("x.csv"), &[Prediction { id: "a".into(), label: 0, score: 1.5 }]).is_err());
    }
}
