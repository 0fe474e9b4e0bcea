//! End-to-end runs on a tiny cohort: resume behaviour, ablation layout,
//! report integrity and CLI error reporting.

use std::path::Path;
use std::process::Command;

use mirage::checkpoint::Checkpoint;
use mirage::pipeline::{self, read_manifest, ExperimentReport, PipelineConfig, Stage, Variant, Workspace};

fn tiny(out: &Path) -> PipelineConfig {
    let text = "\
cohort.n = 30
cohort.shape = [16,16,16]
cohort.concepts = 20
ae.epochs = 2
gat.stage1_steps = 20
gat.stage2_steps = 2
joint.epochs = 1
cnn.epochs = 1
ehr.mlp.epochs = 10
ehr.forest.trees = 5
ablations.regressor_epochs = 10
ablations.generator_epochs = 2
";
    let mut cfg = PipelineConfig::from_text(text).unwrap().with_seed(5);
    cfg.out = out.display().to_string();
    cfg
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mirage")
}

#[test]
fn resume_reruns_only_what_changed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let (first, ran) = pipeline::run_pipeline_traced(&cfg, false).unwrap();
    assert_eq!(ran.len(), Stage::plan(Variant::None).len());

    let (_, ran) = pipeline::run_pipeline_traced(&cfg, true).unwrap();
    assert!(ran.is_empty(), "nothing should rerun, got {ran:?}");

    let ws = Workspace::new(cfg.clone(), Variant::None);
    std::fs::remove_file(ws.adapter()).unwrap();
    let (again, ran) = pipeline::run_pipeline_traced(&cfg, true).unwrap();
    assert_eq!(ran, ["train-adapter", "synthesize", "train-baselines", "train-fusion", "evaluate"]);
    assert_eq!(first.to_json(), again.to_json());
}

#[test]
fn ablations_are_isolated_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let summary = pipeline::run_all(&cfg, false).unwrap();
    let names: Vec<&str> = summary.reports.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["none", "no_kg", "no_gat", "no_ae", "no_adapter"]);
    for r in &summary.reports {
        for m in ["ehr_mlp", "syn_mri", "latent", "fusion"] {
            let b = r.bacc(m).unwrap_or_else(|| panic!("{} lacks {m}", r.variant));
            assert!((0.0..=1.0).contains(&b));
        }
    }
    assert!(dir.path().join("summary.json").exists());

    let root = dir.path().join("ablations");
    assert!(!root.join("no_adapter").join("adapter.ckpt").exists());
    assert!(root.join("no_ae").join("generator.ckpt").exists());
    assert!(root.join("no_kg").join("regressor.ckpt").exists() || root.join("no_kg").join("embeddings.ckpt").exists());
    // Shared stages are computed once, at the root.
    assert!(!root.join("no_kg").join("ae.ckpt").exists());

    for v in Variant::ABLATIONS {
        let ws = Workspace::new(cfg.clone(), v);
        ExperimentReport::load(&ws.dir).unwrap().verify(&ws.dir).unwrap();
    }
}

#[test]
fn frozen_decoder_checksum_is_carried_through_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    pipeline::run_pipeline(&cfg, false).unwrap();
    let ws = Workspace::new(cfg, Variant::None);
    let ae = read_manifest(&ws, Stage::TrainAe).unwrap().notes["decoder_checksum"].clone();
    for st in [Stage::TrainGat, Stage::TrainAdapter] {
        let notes = read_manifest(&ws, st).unwrap().notes;
        assert_eq!(notes["decoder_checksum_before"], ae, "{}", st.name());
        assert_eq!(notes["decoder_checksum_after"], ae, "{}", st.name());
    }
}

#[test]
fn report_json_has_documented_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    pipeline::run_pipeline(&cfg, false).unwrap();
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(v["variant"], "none");
    assert!(v["provenance"].as_str().unwrap().starts_with("mirage "));
    assert_eq!(v["latent_decoder_calls"], 0);
    let rows = v["rows"].as_array().unwrap();
    let methods: Vec<&str> = rows.iter().map(|r| r["method"].as_str().unwrap()).collect();
    assert_eq!(methods, ["ehr_lr", "ehr_mlp", "ehr_rf", "syn_mri", "latent", "fusion"]);
    for r in rows {
        for k in ["bacc", "auc", "sen", "spe"] {
            assert!(r["metrics"][k].is_number(), "{k} in {r}");
        }
        for k in ["tp", "tn", "fp", "fn"] {
            assert!(r["metrics"]["counts"][k].is_u64(), "{k} in {r}");
        }
        assert!(r["predictions"].as_str().unwrap().starts_with("predictions/"));
        assert_eq!(r["sha256"].as_str().unwrap().len(), 64);
    }
}

fn cli(args: &[&str], workdir: &Path) -> std::process::Output {
    let mut cmd = Command::new(bin());
    cmd.args(args).arg("--workdir").arg(workdir).env_remove("MIRAGE_SEED");
    for kv in [
        "cohort.n=30",
        "cohort.shape=[16,16,16]",
        "cohort.concepts=20",
        "ae.epochs=2",
        "gat.stage1_steps=20",
        "gat.stage2_steps=2",
    ] {
        cmd.args(["--set", kv]);
    }
    cmd.output().unwrap()
}

#[test]
fn cli_failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["train-gat"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train-gat"), "{err}");

    let out = cli(&["ablate"], dir.path());
    assert!(!out.status.success());
}

#[test]
fn cli_gat_stages_can_run_separately() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["train-ae", "build-kg"] {
        let out = cli(&[cmd], dir.path());
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = cli(&["train-gat", "--stage", "1"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let curve = std::fs::read_to_string(dir.path().join("gat_loss.csv")).unwrap();
    assert!(curve.lines().skip(1).all(|l| l.starts_with("1,")));

    let out = cli(&["train-gat", "--stage", "2"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let curve = std::fs::read_to_string(dir.path().join("gat_loss.csv")).unwrap();
    assert_eq!(curve.lines().filter(|l| l.starts_with("1,")).count(), 20);
    assert_eq!(curve.lines().filter(|l| l.starts_with("2,")).count(), 2);
    let ck = Checkpoint::load(&dir.path().join("gat.ckpt")).unwrap();
    assert_eq!(ck.config["stage2_curve"].as_array().unwrap().len(), 2);
}
