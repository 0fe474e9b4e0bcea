//! End-to-end orchestration: stages, manifests, resume, ablations.
//!
//! Every stage declares the files it reads and writes. After a stage runs,
//! a manifest under `manifests/` records SHA-256 hashes of both, plus a
//! hash of the configuration. With `resume`, a stage is skipped when its
//! manifest still matches and no earlier stage ran in the same invocation.
//!
//! Artifacts shared by every variant (dataset, autoencoder, EHR baselines,
//! volume CNN) live in the output root; the full pipeline's own artifacts
//! too. Ablation variants write to `ablations/<variant>/`.

pub mod ablation;
pub mod config;
pub mod export;
pub mod report;
mod stages;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use config::{PipelineConfig, Variant};
pub use report::{AblationSummary, ExperimentReport, MetricRow, Prediction};
pub use stages::{evaluate, synthesize_for, train_gat_stages, GatStages, Which};

/// Paths of every artifact for one variant.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub cfg: PipelineConfig,
    pub variant: Variant,
    pub root: PathBuf,
    pub dir: PathBuf,
}

impl Workspace {
    pub fn new(cfg: PipelineConfig, variant: Variant) -> Self {
        let root = cfg.out_dir();
        let dir = match variant {
            Variant::None => root.clone(),
            v => root.join("ablations").join(v.as_str()),
        };
        Workspace { cfg, variant, root, dir }
    }

    pub fn data(&self) -> PathBuf {
        self.cfg.data_dir()
    }
    pub fn ae(&self) -> PathBuf {
        self.root.join("ae.ckpt")
    }
    pub fn baselines(&self) -> PathBuf {
        self.root.join("baselines")
    }
    pub fn kg(&self) -> PathBuf {
        self.dir.join("kg.bin")
    }
    pub fn gat(&self) -> PathBuf {
        self.dir.join("gat.ckpt")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.dir.join("embeddings.ckpt")
    }
    pub fn adapter(&self) -> PathBuf {
        self.dir.join("adapter.ckpt")
    }
    pub fn regressor(&self) -> PathBuf {
        self.dir.join("regressor.ckpt")
    }
    pub fn generator(&self) -> PathBuf {
        self.dir.join("generator.ckpt")
    }
    pub fn synthetic(&self) -> PathBuf {
        self.dir.join("synthetic")
    }
    pub fn fusion(&self) -> PathBuf {
        self.dir.join("fusion")
    }
    pub fn predictions(&self) -> PathBuf {
        self.dir.join("predictions")
    }

    /// Whether this variant trains the adapter `A_θ` and head `C_φ`.
    pub fn has_adapter(&self) -> bool {
        matches!(self.variant, Variant::None | Variant::NoKg | Variant::NoGat)
    }

    fn manifest_dir(&self, shared: bool) -> PathBuf {
        if shared { self.root.join("manifests") } else { self.dir.join("manifests") }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Generate,
    TrainAe,
    BuildKg,
    TrainGat,
    EmbedEhr,
    EmbedNeighbor,
    TrainAdapter,
    TrainGenerator,
    Synthesize,
    TrainBaselines,
    TrainFusion,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate-data",
            Stage::TrainAe => "train-ae",
            Stage::BuildKg => "build-kg",
            Stage::TrainGat => "train-gat",
            Stage::EmbedEhr => "embed-ehr",
            Stage::EmbedNeighbor => "embed-neighbor",
            Stage::TrainAdapter => "train-adapter",
            Stage::TrainGenerator => "train-generator",
            Stage::Synthesize => "synthesize",
            Stage::TrainBaselines => "train-baselines",
            Stage::TrainFusion => "train-fusion",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Shared stages write to the output root regardless of variant.
    pub fn shared(self) -> bool {
        matches!(self, Stage::Generate | Stage::TrainAe | Stage::TrainBaselines)
    }

    /// Stages of a variant, in execution order.
    pub fn plan(variant: Variant) -> Vec<Stage> {
        let mut s = vec![Stage::Generate, Stage::TrainAe];
        s.extend(match variant {
            Variant::None => vec![Stage::BuildKg, Stage::TrainGat, Stage::TrainAdapter],
            Variant::NoAdapter => vec![Stage::BuildKg, Stage::TrainGat],
            Variant::NoKg => vec![Stage::EmbedEhr, Stage::TrainAdapter],
            Variant::NoGat => vec![Stage::EmbedNeighbor, Stage::TrainAdapter],
            Variant::NoAe => vec![Stage::BuildKg, Stage::TrainGat, Stage::TrainGenerator],
        });
        s.extend([Stage::Synthesize, Stage::TrainBaselines, Stage::TrainFusion, Stage::Evaluate]);
        s
    }

    pub fn io(self, ws: &Workspace) -> (Vec<PathBuf>, Vec<PathBuf>) {
        let kg = ws.kg();
        let kg_files = vec![kg.clone(), kg.with_extension("nodes.tsv"), kg.with_extension("edges.tsv")];
        let upstream_of_synthesis = match ws.variant {
            Variant::NoAe => vec![ws.data(), ws.embeddings(), ws.generator()],
            Variant::NoAdapter => vec![ws.data(), ws.ae(), ws.embeddings()],
            _ => vec![ws.data(), ws.ae(), ws.embeddings(), ws.adapter()],
        };
        match self {
            Stage::Generate => (vec![], vec![ws.data()]),
            Stage::TrainAe => (vec![ws.data()], vec![ws.ae()]),
            Stage::BuildKg => (if ws.variant == Variant::NoAe { vec![ws.data()] } else { vec![ws.data(), ws.ae()] }, kg_files),
            Stage::TrainGat => {
                let mut inputs = kg_files;
                if ws.variant != Variant::NoAe {
                    inputs.extend([ws.data(), ws.ae()]);
                }
                (inputs, vec![ws.gat(), ws.embeddings()])
            }
            Stage::EmbedEhr => (vec![ws.data(), ws.ae()], vec![ws.regressor(), ws.embeddings()]),
            Stage::EmbedNeighbor => (vec![ws.data(), ws.ae()], vec![ws.embeddings()]),
            Stage::TrainAdapter => (vec![ws.data(), ws.ae(), ws.embeddings()], vec![ws.adapter()]),
            Stage::TrainGenerator => (vec![ws.data(), ws.embeddings()], vec![ws.generator()]),
            Stage::Synthesize => (upstream_of_synthesis, vec![ws.synthetic()]),
            Stage::TrainBaselines => (vec![ws.data()], vec![ws.baselines()]),
            Stage::TrainFusion => {
                let mut inputs = vec![ws.data(), ws.baselines(), ws.synthetic(), ws.embeddings()];
                if ws.has_adapter() {
                    inputs.push(ws.adapter());
                }
                (inputs, vec![ws.fusion()])
            }
            Stage::Evaluate => {
                let mut inputs = vec![ws.data(), ws.baselines(), ws.synthetic(), ws.embeddings(), ws.fusion()];
                if ws.has_adapter() {
                    inputs.push(ws.adapter());
                }
                (inputs, vec![ws.predictions(), ws.dir.join("report.json"), ws.dir.join("report.txt")])
            }
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ALL_STAGES.iter().copied().find(|st| st.name() == s).ok_or_else(|| Error::InvalidParam(format!("unknown stage {s:?}")))
    }
}

const ALL_STAGES: [Stage; 12] = [
    Stage::Generate,
    Stage::TrainAe,
    Stage::BuildKg,
    Stage::TrainGat,
    Stage::EmbedEhr,
    Stage::EmbedNeighbor,
    Stage::TrainAdapter,
    Stage::TrainGenerator,
    Stage::Synthesize,
    Stage::TrainBaselines,
    Stage::TrainFusion,
    Stage::Evaluate,
];

/// SHA-256 of a file, or of a directory's sorted `(relative path, hash)`
/// listing.
pub fn hash_path(p: &Path) -> Result<String> {
    if p.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(p)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        let mut listing = String::new();
        for e in entries {
            let name = e.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            listing.push_str(&format!("{name}\t{}\n", hash_path(&e)?));
        }
        Ok(report::sha256_hex(listing.as_bytes()))
    } else {
        let bytes = fs::read(p).map_err(|e| Error::NotFound(format!("{}: {e}", p.display())))?;
        Ok(report::sha256_hex(&bytes))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Stage-specific facts, e.g. decoder checksums before and after training.
    pub notes: serde_json::Value,
}

fn hashes(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths.iter().map(|p| Ok((p.display().to_string(), hash_path(p)?))).collect()
}

/// Hash of the settings that affect results (paths and variant excluded).
pub fn config_hash(cfg: &PipelineConfig) -> String {
    report::sha256_hex(config_echo(cfg).to_string().as_bytes())
}

fn config_echo(cfg: &PipelineConfig) -> serde_json::Value {
    let mut pairs = cfg.to_pairs();
    for k in ["out", "data", "ablation"] {
        pairs.remove(k);
    }
    serde_json::to_value(pairs).expect("serializable")
}

fn manifest_path(ws: &Workspace, st: Stage) -> PathBuf {
    ws.manifest_dir(st.shared()).join(format!("{}.json", st.name()))
}

pub fn read_manifest(ws: &Workspace, st: Stage) -> Result<Manifest> {
    let p = manifest_path(ws, st);
    let text = fs::read_to_string(&p).map_err(|e| Error::NotFound(format!("{}: {e}", p.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn manifest_is_current(ws: &Workspace, st: Stage) -> bool {
    let Ok(m) = read_manifest(ws, st) else { return false };
    let (inputs, outputs) = st.io(ws);
    m.config_hash == config_hash(&ws.cfg)
        && outputs.iter().all(|p| p.exists())
        && hashes(&inputs).map(|h| h == m.inputs).unwrap_or(false)
        && hashes(&outputs).map(|h| h == m.outputs).unwrap_or(false)
}

/// Run one stage: check inputs, execute, check outputs, write the manifest.
pub fn run_stage(ws: &Workspace, st: Stage) -> Result<Manifest> {
    let tag = |e: Error| e.in_stage(st.name());
    let (inputs, outputs) = st.io(ws);
    if st == Stage::Generate && !ws.cfg.data.is_empty() && ws.data().exists() {
        // An existing dataset directory is an input, not an output.
    } else if let Some(missing) = inputs.iter().find(|p| !p.exists()) {
        return Err(tag(Error::NotFound(format!("input {} (run the earlier stages first)", missing.display()))));
    }
    let notes = stages::execute(ws, st).map_err(tag)?;
    if let Some(missing) = outputs.iter().find(|p| !p.exists()) {
        return Err(tag(Error::NotFound(format!("declared output {} was not written", missing.display()))));
    }
    let m = Manifest {
        stage: st.name().to_string(),
        config_hash: config_hash(&ws.cfg),
        inputs: hashes(&inputs).map_err(tag)?,
        outputs: hashes(&outputs).map_err(tag)?,
        notes,
    };
    let path = manifest_path(ws, st);
    fs::create_dir_all(path.parent().expect("manifest dir")).map_err(|e| tag(e.into()))?;
    fs::write(&path, serde_json::to_string_pretty(&m).map_err(|e| tag(e.into()))?).map_err(|e| tag(e.into()))?;
    Ok(m)
}

/// Run a variant's plan. Shared stages are always resumable in ablation
/// runs, since they do not depend on the variant. Returns the names of the
/// stages that actually ran.
fn run_plan(ws: &Workspace, resume: bool) -> Result<Vec<&'static str>> {
    ws.cfg.validate()?;
    fs::create_dir_all(&ws.dir)?;
    ws.cfg.save(&ws.dir.join("config.txt"))?;
    let mut dirty = false;
    let mut ran = Vec::new();
    for st in Stage::plan(ws.variant) {
        let may_skip = resume || (st.shared() && ws.variant != Variant::None);
        if may_skip && !dirty && manifest_is_current(ws, st) {
            continue;
        }
        run_stage(ws, st)?;
        ran.push(st.name());
        dirty = true;
    }
    Ok(ran)
}

/// Execute every stage of `cfg.ablation` (normally `none`) and return the report.
pub fn run_pipeline(cfg: &PipelineConfig, resume: bool) -> Result<ExperimentReport> {
    run_pipeline_traced(cfg, resume).map(|(r, _)| r)
}

/// As [`run_pipeline`], also returning the stages that ran.
pub fn run_pipeline_traced(cfg: &PipelineConfig, resume: bool) -> Result<(ExperimentReport, Vec<&'static str>)> {
    let ws = Workspace::new(cfg.clone(), cfg.ablation);
    let ran = run_plan(&ws, resume)?;
    Ok((ExperimentReport::load(&ws.dir)?, ran))
}

pub fn run_ablation(cfg: &PipelineConfig, variant: Variant, resume: bool) -> Result<ExperimentReport> {
    let mut cfg = cfg.clone();
    cfg.ablation = variant;
    run_pipeline(&cfg, resume)
}

/// The full pipeline followed by every ablation; writes `summary.json` and
/// `summary.txt` to the output root.
pub fn run_all(cfg: &PipelineConfig, resume: bool) -> Result<AblationSummary> {
    let mut reports = vec![run_ablation(cfg, Variant::None, resume)?];
    for v in Variant::ABLATIONS {
        reports.push(run_ablation(cfg, v, resume)?);
    }
    let summary = AblationSummary { provenance: reports[0].provenance.clone(), reports };
    summary.save(&cfg.out_dir())?;
    Ok(summary)
}

/// `mirage <version> cfg:<hash> data:<hash>` with 12-hex-digit hashes.
pub fn provenance(ws: &Workspace) -> Result<String> {
    let data = hash_path(&ws.data())?;
    Ok(format!("mirage {} cfg:{} data:{}", env!("CARGO_PKG_VERSION"), &config_hash(&ws.cfg)[..12], &data[..12]))
}

pub(crate) fn echo(cfg: &PipelineConfig) -> serde_json::Value {
    config_echo(cfg)
}
