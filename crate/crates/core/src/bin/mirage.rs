use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use mirage::dataset::{read_volume, Dataset};
use mirage::pipeline::export::{export_slice, pgm_bytes, side_by_side};
use mirage::pipeline::{self, run_stage, train_gat_stages, GatStages, PipelineConfig, Stage, Variant, Which, Workspace};

#[derive(Parser)]
#[command(name = "mirage", version, about = "Volume synthesis for scan-less patients and diagnostic evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Working directory for all artifacts (config key `out`).
    #[arg(long)]
    workdir: Option<String>,
    /// Existing dataset directory (config key `data`).
    #[arg(long)]
    data: Option<String>,
    /// Root seed; MIRAGE_SEED overrides the config file, this overrides both.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Ablation variant: none, no_kg, no_gat, no_ae or no_adapter.
    #[arg(long, default_value = "none")]
    variant: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort into DIR.
    GenerateData {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0.7)]
        ratio: f64,
        /// Volume side, or three comma-separated sides.
        #[arg(long, default_value = "32")]
        shape: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the volume autoencoder and freeze its decoder.
    TrainAe {
        #[command(flatten)]
        common: Common,
        /// Also copy the checkpoint here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the patient/concept graph.
    BuildKg {
        #[command(flatten)]
        common: Common,
        /// Concepts linked per patient description.
        #[arg(long)]
        top_m: Option<usize>,
        /// Minimum cosine similarity for a patient-concept link.
        #[arg(long)]
        threshold: Option<f64>,
        /// Also copy the graph (with its TSV tables) here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train graph propagation and export patient embeddings.
    TrainGat {
        #[command(flatten)]
        common: Common,
        /// 1, 2 or both. Stage 2 alone continues from the saved checkpoint.
        #[arg(long, default_value = "both")]
        stage: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the whitening-coloring transform and train the adapter and head.
    TrainAdapter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        lambda_cls: Option<f64>,
        #[arg(long)]
        lambda_tv: Option<f64>,
        /// Neighbours used for skip-feature compensation.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize volumes for test and calibration patients, or for `--ids` into `--out`.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        /// Output directory for `--ids` (default: the workspace's synthetic dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a mid-axial slice of each volume as a PGM image.
        #[arg(long)]
        slices: bool,
    },
    /// Train EHR baselines, the volume CNN and the fusion model.
    TrainClassifiers(Common),
    /// Score test patients and write a metrics report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// ehr, syn-mri, latent, fusion or all.
        #[arg(long, default_value = "all")]
        which: String,
        /// Write the report JSON here as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one ablation variant end to end.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: bool,
    },
    /// Write mid-plane slices of real or synthetic volumes as PGM images.
    ExportSlices {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<String>,
        /// 0 (axial), 1 or 2.
        #[arg(long, default_value_t = 0)]
        axis: usize,
        #[arg(long)]
        out: PathBuf,
        /// Export synthetic instead of real volumes.
        #[arg(long)]
        synthetic: bool,
        /// Export real and synthetic side by side.
        #[arg(long)]
        pair: bool,
    },
    /// Full pipeline followed by every ablation.
    RunAll {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: bool,
        /// Run only the full pipeline.
        #[arg(long)]
        no_ablations: bool,
    },
}

fn load_config(c: &Common) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if !c.set.is_empty() {
        let mut text = cfg.to_text();
        for kv in &c.set {
            if !kv.contains('=') {
                bail!("--set expects KEY=VALUE, got {kv:?}");
            }
            text.push_str(kv);
            text.push('\n');
        }
        cfg = PipelineConfig::from_text(&text)?;
    }
    if let Some(w) = &c.workdir {
        cfg.out = w.clone();
    }
    if let Some(d) = &c.data {
        cfg.data = d.clone();
    }
    cfg.ablation = Variant::parse(&c.variant)?;
    let mut cfg = cfg.with_env_seed()?;
    if let Some(s) = c.seed {
        cfg = cfg.with_seed(s);
    }
    Ok(cfg)
}

fn workspace(c: &Common) -> anyhow::Result<Workspace> {
    let cfg = load_config(c)?;
    let v = cfg.ablation;
    Ok(Workspace::new(cfg, v))
}

/// Run stages in order, generating the configured cohort first when the
/// workspace has no dataset yet.
fn stages(ws: &Workspace, list: &[Stage]) -> anyhow::Result<()> {
    if !ws.data().exists() {
        run_stage(ws, Stage::Generate)?;
    }
    for &st in list {
        let m = run_stage(ws, st)?;
        println!("{}: {}", st.name(), m.notes);
    }
    Ok(())
}

/// Copy finished artifacts into `out` (a directory when several files).
fn copy_out(files: &[PathBuf], out: Option<PathBuf>) -> anyhow::Result<()> {
    let Some(out) = out else { return Ok(()) };
    if let [single] = files {
        if out.is_dir() {
            std::fs::copy(single, out.join(single.file_name().unwrap()))?;
        } else {
            std::fs::copy(single, &out).with_context(|| format!("copying {} to {}", single.display(), out.display()))?;
        }
        return Ok(());
    }
    std::fs::create_dir_all(&out)?;
    for f in files {
        std::fs::copy(f, out.join(f.file_name().unwrap())).with_context(|| format!("copying {}", f.display()))?;
    }
    Ok(())
}

fn parse_shape(s: &str) -> anyhow::Result<[usize; 3]> {
    let parts: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>()).collect::<Result<_, _>>().context("bad --shape")?;
    match parts.as_slice() {
        [n] => Ok([*n; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => bail!("--shape takes one or three sides"),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateData { n, ratio, shape, seed, out, common } => {
            let mut cfg = load_config(&common)?.with_seed(seed);
            cfg.cohort.n = n;
            cfg.cohort.ratio = ratio;
            cfg.cohort.shape = parse_shape(&shape)?;
            let ds = Dataset::generate(cfg.resolved().dataset_meta())?;
            ds.write(&out)?;
            println!("wrote {} patients ({} train, {} test) to {}", ds.records.len(), ds.split.train_ids.len(), ds.split.test_ids.len(), out.display());
        }
        Command::TrainAe { common, out } => {
            let ws = workspace(&common)?;
            stages(&ws, &[Stage::TrainAe])?;
            copy_out(&[ws.ae()], out)?;
        }
        Command::BuildKg { common, top_m, threshold, out } => {
            let mut cfg = load_config(&common)?;
            cfg.kg.top_m = top_m.unwrap_or(cfg.kg.top_m);
            cfg.kg.threshold = threshold.unwrap_or(cfg.kg.threshold);
            let ws = Workspace::new(cfg.clone(), cfg.ablation);
            stages(&ws, &[Stage::BuildKg])?;
            let kg = ws.kg();
            copy_out(&[kg.clone(), kg.with_extension("nodes.tsv"), kg.with_extension("edges.tsv")], out)?;
        }
        Command::TrainGat { common, stage, out } => {
            let ws = workspace(&common)?;
            let which = GatStages::parse(&stage)?;
            match ws.variant {
                Variant::NoKg => stages(&ws, &[Stage::EmbedEhr])?,
                Variant::NoGat => stages(&ws, &[Stage::EmbedNeighbor])?,
                _ if which == GatStages::Both => stages(&ws, &[Stage::TrainGat])?,
                // Partial runs leave the stage manifest alone, so a later
                // pipeline run still treats train-gat as incomplete.
                _ => println!("train-gat: {}", train_gat_stages(&ws, which).map_err(|e| e.in_stage("train-gat"))?),
            }
            copy_out(&[ws.gat(), ws.dir.join("gat_loss.csv")], out)?;
        }
        Command::TrainAdapter { common, lambda_cls, lambda_tv, k, out } => {
            let mut cfg = load_config(&common)?;
            cfg.joint.lambda_cls = lambda_cls.unwrap_or(cfg.joint.lambda_cls);
            cfg.joint.lambda_tv = lambda_tv.unwrap_or(cfg.joint.lambda_tv);
            cfg.joint.k = k.unwrap_or(cfg.joint.k);
            let ws = Workspace::new(cfg.clone(), cfg.ablation);
            if ws.variant == Variant::NoAe {
                stages(&ws, &[Stage::TrainGenerator])?;
                copy_out(&[ws.generator()], out)?;
            } else {
                stages(&ws, &[Stage::TrainAdapter])?;
                copy_out(&[ws.adapter()], out)?;
            }
        }
        Command::Synthesize { common, ids, out, slices } => {
            let ws = workspace(&common)?;
            let written: Vec<(String, PathBuf)> = if ids.is_empty() {
                stages(&ws, &[Stage::Synthesize])?;
                let ids = mirage::dataset::list_volumes(&ws.synthetic())?;
                ids.into_iter().map(|id| (id, ws.synthetic())).collect()
            } else {
                let to = out.unwrap_or_else(|| ws.synthetic());
                let mut done = Vec::new();
                for (id, v) in pipeline::synthesize_for(&ws, &ids)? {
                    mirage::dataset::write_volume(&to, &id, &v, false)?;
                    println!("{id} -> {}", to.display());
                    done.push((id, to.clone()));
                }
                done
            };
            if slices {
                for (id, dir) in written {
                    let (v, _) = read_volume(&dir, &id)?;
                    export_slice(&v, &id, 0, &dir.join("slices"))?;
                }
            }
        }
        Command::TrainClassifiers(c) => stages(&workspace(&c)?, &[Stage::TrainBaselines, Stage::TrainFusion])?,
        Command::Evaluate { common, which, out } => {
            let ws = workspace(&common)?;
            let which: Vec<Which> = if which == "all" { Which::ALL.to_vec() } else { vec![Which::parse(&which)?] };
            let report = pipeline::evaluate(&ws, &which).map_err(|e| e.in_stage("evaluate"))?;
            if let Some(out) = out {
                std::fs::write(&out, report.to_json())?;
            }
            print!("{}", report.table());
        }
        Command::Ablate { common, resume } => {
            let cfg = load_config(&common)?;
            if cfg.ablation == Variant::None {
                bail!("ablate needs --variant no_kg, no_gat, no_ae or no_adapter");
            }
            print!("{}", pipeline::run_pipeline(&cfg, resume)?.table());
        }
        Command::ExportSlices { common, ids, axis, out, synthetic, pair } => {
            let ws = workspace(&common)?;
            let real_dir = ws.data().join("volumes");
            for id in &ids {
                let real = || read_volume(&real_dir, id).map(|(v, _)| v);
                let syn = || read_volume(&ws.synthetic(), id).map(|(v, _)| v);
                let path = if pair {
                    std::fs::create_dir_all(&out)?;
                    let p = out.join(format!("{id}_pair_axis{axis}.pgm"));
                    std::fs::write(&p, pgm_bytes(&side_by_side(&real()?, &syn()?, axis)?))?;
                    p
                } else if synthetic {
                    export_slice(&syn()?, &format!("{id}_synthetic"), axis, &out)?
                } else {
                    export_slice(&real()?, id, axis, &out)?
                };
                println!("{}", path.display());
            }
        }
        Command::RunAll { common, resume, no_ablations } => {
            let cfg = load_config(&common)?;
            if no_ablations {
                print!("{}", pipeline::run_pipeline(&cfg, resume)?.table());
            } else {
                let summary = pipeline::run_all(&cfg, resume)?;
                print!("{}", summary.reports[0].table());
                print!("{}", summary.table());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
