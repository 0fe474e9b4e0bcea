//! Stage bodies. Each reads its declared inputs from disk and writes its
//! declared outputs; nothing is passed in memory between stages.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::rc::Rc;

use rand::seq::SliceRandom;
use serde_json::{json, Value};

use crate::alignment::{aggregate_skips, classify_latent, fit_wc_stats, synthesize, train_joint, AdapterModel, JointSample, SkipBank, WCStats};
use crate::autoencoder::{decode_calls, train_ae, AEModel};
use crate::checkpoint::Checkpoint;
use crate::classifiers::{
    build_fusion_vector, predict_fusion, train_cnn3d, train_ehr_baseline, train_fusion, CnnModel, EhrKind, EhrModel, FusionModel, Standardizer,
    TaggedVolume,
};
use crate::cohort::Volume;
use crate::dataset::{read_volume, write_volume, Dataset};
use crate::error::{param_err, Error, Result};
use crate::gat::{finetune_stage2, infer_masked_embeddings, infer_test_embeddings, train_stage1, GatModel, ReconTarget};
use crate::kg::{assemble_graph, embed_catalog, link_patients, HeteroGraph, NodeType, TextBinning};
use crate::nn::ParamSet;
use crate::pipeline::ablation::{nearest_neighbor, pca_codes, FeedForward, FeedForwardSpec};
use crate::pipeline::config::Variant;
use crate::pipeline::report::{metrics_of, write_predictions, ExperimentReport, MetricRow, Prediction};
use crate::pipeline::{echo, provenance, Stage, Workspace};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;

pub(crate) fn execute(ws: &Workspace, st: Stage) -> Result<Value> {
    match st {
        Stage::Generate => generate(ws),
        Stage::TrainAe => train_autoencoder(ws),
        Stage::BuildKg => build_kg(ws),
        Stage::TrainGat => train_gat(ws),
        Stage::EmbedEhr => embed_ehr(ws),
        Stage::EmbedNeighbor => embed_neighbor(ws),
        Stage::TrainAdapter => train_adapter(ws),
        Stage::TrainGenerator => train_generator(ws),
        Stage::Synthesize => synthesize_stage(ws),
        Stage::TrainBaselines => train_baselines(ws),
        Stage::TrainFusion => train_fusion_stage(ws),
        Stage::Evaluate => evaluate(ws, &Which::ALL).map(|r| json!({ "latent_decoder_calls": r.latent_decoder_calls })),
    }
}

/// Patient id groups used throughout.
pub(crate) struct Groups {
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Training patients used to fit supervised models.
    pub fit: Vec<String>,
    /// Training patients held out to fit the fusion model.
    pub calibration: Vec<String>,
}

/// Stratified calibration slice: per label, a seeded shuffle of the
/// training ids, of which the first `round(fraction·count)` are held out.
pub(crate) fn groups(ds: &Dataset, ws: &Workspace) -> Groups {
    let mut rng = rng_for(derive_seed(ws.cfg.seed, "calibration"), "slice");
    let mut calibration = BTreeSet::new();
    for label in [0u8, 1] {
        let mut ids: Vec<&String> = ds.split.train_ids.iter().filter(|id| ds.record(id).ok().map(|r| r.label) == Some(label)).collect();
        ids.shuffle(&mut rng);
        let take = (ws.cfg.calibration_fraction * ids.len() as f64).round() as usize;
        calibration.extend(ids.into_iter().take(take).cloned());
    }
    Groups {
        train: ds.split.train_ids.clone(),
        test: ds.split.test_ids.clone(),
        fit: ds.split.train_ids.iter().filter(|id| !calibration.contains(*id)).cloned().collect(),
        calibration: calibration.into_iter().collect(),
    }
}

fn load_ds(ws: &Workspace) -> Result<Dataset> {
    Dataset::read(&ws.data())
}

fn load_ae(ws: &Workspace) -> Result<AEModel> {
    AEModel::from_checkpoint(&Checkpoint::load(&ws.ae())?)
}

fn label_of(ds: &Dataset, id: &str) -> Result<u8> {
    Ok(ds.record(id)?.label)
}

fn ehr_rows(ds: &Dataset, ids: &[String]) -> Result<Vec<Vec<f64>>> {
    ids.iter().map(|id| Ok(ds.record(id)?.ehr.clone())).collect()
}

fn labels(ds: &Dataset, ids: &[String]) -> Result<Vec<u8>> {
    ids.iter().map(|id| label_of(ds, id)).collect()
}

fn train_latents(ae: &AEModel, ds: &Dataset, ids: &[String]) -> Result<BTreeMap<String, Tensor>> {
    ids.iter().map(|id| Ok((id.clone(), ae.encode(ds.train_volume(id)?)?.0))).collect()
}

fn save_embeddings(ws: &Workspace, u: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut arrays = ParamSet::new();
    for (id, t) in u {
        arrays.insert(format!("u.{id}"), Tensor::vector(t.data().to_vec()));
    }
    Checkpoint::new(json!({ "kind": "patient embeddings" }), arrays).save(&ws.embeddings())
}

pub(crate) fn load_embeddings(ws: &Workspace) -> Result<BTreeMap<String, Vec<f64>>> {
    let ck = Checkpoint::load(&ws.embeddings())?;
    Ok(ck.arrays.iter().filter_map(|(n, t)| n.strip_prefix("u.").map(|id| (id.to_string(), t.data().to_vec()))).collect())
}

fn embedding<'a>(u: &'a BTreeMap<String, Vec<f64>>, id: &str) -> Result<&'a [f64]> {
    u.get(id).map(|v| v.as_slice()).ok_or_else(|| Error::NotFound(format!("embedding for {id}")))
}

fn generate(ws: &Workspace) -> Result<Value> {
    if !ws.cfg.data.is_empty() && ws.data().exists() {
        let ds = load_ds(ws)?;
        return Ok(json!({ "existing": true, "patients": ds.records.len() }));
    }
    let ds = Dataset::generate(ws.cfg.dataset_meta())?;
    if ws.data().exists() {
        fs::remove_dir_all(ws.data())?;
    }
    ds.write(&ws.data())?;
    Ok(json!({ "existing": false, "patients": ds.records.len(), "train": ds.split.train_ids.len(), "test": ds.split.test_ids.len() }))
}

fn train_autoencoder(ws: &Workspace) -> Result<Value> {
    let ds = load_ds(ws)?;
    let vols: Vec<Volume> = ds.split.train_ids.iter().map(|id| ds.train_volume(id).cloned()).collect::<Result<_>>()?;
    let ae = train_ae(&vols, &ws.cfg.ae)?.freeze_decoder();
    ae.to_checkpoint().save(&ws.ae())?;
    // Checksum what downstream stages will see: the f32-rounded checkpoint.
    let saved = load_ae(ws)?;
    Ok(json!({ "volumes": vols.len(), "final_loss": ae.loss_curve.last(), "decoder_checksum": saved.decoder_checksum() }))
}

/// Node features of training patients: autoencoder latents, or principal
/// component codes of the volumes when the autoencoder is ablated.
fn patient_latents(ws: &Workspace, ds: &Dataset, ids: &[String]) -> Result<BTreeMap<String, Tensor>> {
    if ws.variant == Variant::NoAe {
        let vols: Vec<&Volume> = ids.iter().map(|id| ds.train_volume(id)).collect::<Result<_>>()?;
        let rows: Vec<&[f64]> = vols.iter().map(|v| v.data()).collect();
        let codes = pca_codes(&rows, ws.cfg.ae.latent_dim)?;
        Ok(ids.iter().cloned().zip(codes.into_iter().map(Tensor::vector)).collect())
    } else {
        train_latents(&load_ae(ws)?, ds, ids)
    }
}

fn build_kg(ws: &Workspace) -> Result<Value> {
    let ds = load_ds(ws)?;
    let g = groups(&ds, ws);
    let latents = patient_latents(ws, &ds, &g.train)?;
    let concepts = embed_catalog(&ds.catalog)?;
    let train_rows = ehr_rows(&ds, &g.train)?;
    let refs: Vec<&[f64]> = train_rows.iter().map(|r| r.as_slice()).collect();
    let binning = TextBinning::fit(&ds.feature_names, &refs);
    let texts: BTreeMap<String, Vec<String>> = ds.records.iter().map(|r| (r.id.clone(), binning.describe(&r.ehr))).collect();
    let graph = assemble_graph(&g.train, &latents, &concepts, &g.test)?;
    let graph = link_patients(&graph, &texts, &concepts, ws.cfg.kg.top_m, ws.cfg.kg.threshold)?;
    graph.validate()?;
    graph.save(&ws.kg(), json!({ "kg": ws.cfg.kg, "binning": binning }))?;
    let links = graph.edges().iter().filter(|e| e.relation == crate::kg::Relation::HasConcept).count();
    Ok(json!({ "nodes": graph.nodes().len(), "edges": graph.edges().len(), "patient_concept_links": links }))
}

fn train_gat(ws: &Workspace) -> Result<Value> {
    train_gat_stages(ws, GatStages::Both)
}

/// Which graph-propagation stages to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GatStages {
    /// Stage 1 only (latent regression).
    One,
    /// Stage 2 only, continuing from the saved stage-1 checkpoint.
    Two,
    Both,
}

impl GatStages {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(GatStages::One),
            "2" => Ok(GatStages::Two),
            "both" => Ok(GatStages::Both),
            _ => param_err(format!("unknown GAT stage {s:?} (expected 1, 2 or both)")),
        }
    }
}

/// Train graph propagation, save `gat.ckpt`, the per-stage loss curves
/// (`gat_loss.csv`) and the patient embeddings.
pub fn train_gat_stages(ws: &Workspace, stages: GatStages) -> Result<Value> {
    let (graph, _) = HeteroGraph::load(&ws.kg())?;
    let d = ws.cfg.ae.latent_dim;
    let widths: BTreeMap<NodeType, usize> = NodeType::ALL.iter().map(|&t| (t, graph.feature_width(t).unwrap_or(d))).collect();
    let targets: BTreeMap<String, Tensor> = graph
        .nodes()
        .iter()
        .filter(|n| n.node_type == NodeType::TrainPatient)
        .map(|n| (n.id.clone(), Tensor::vector(n.features.clone())))
        .collect();
    let mut cfg = ws.cfg.gat.clone();
    cfg.d = d;
    let model = if stages == GatStages::Two {
        GatModel::from_checkpoint(&Checkpoint::load(&ws.gat())?)?
    } else {
        train_stage1(GatModel::new(cfg, &widths)?, &graph, &targets)?
    };
    let mut notes = json!({ "stage1_final": model.stage1_curve.last() });
    let model = if ws.variant == Variant::NoAe || stages == GatStages::One {
        model
    } else {
        let ds = load_ds(ws)?;
        let ae = load_ae(ws)?;
        let recon: BTreeMap<String, ReconTarget> = targets
            .keys()
            .map(|id| {
                let v = ds.train_volume(id)?;
                let s = v.shape();
                Ok((id.clone(), ReconTarget { volume: Rc::new(v.clone().reshape(&[1, s[0], s[1], s[2]])?), skips: ae.encode(v)?.1 }))
            })
            .collect::<Result<_>>()?;
        let before = ae.decoder_checksum();
        let model = finetune_stage2(model, &graph, &recon, &ae)?;
        let after = ae.decoder_checksum();
        if before != after {
            return Err(Error::FrozenDecoder);
        }
        notes["stage2_final"] = json!(model.stage2_curve.last());
        notes["decoder_checksum_before"] = json!(before);
        notes["decoder_checksum_after"] = json!(after);
        model
    };
    model.to_checkpoint().save(&ws.gat())?;
    let mut csv = String::from("stage,step,loss\n");
    for (stage, curve) in [(1, &model.stage1_curve), (2, &model.stage2_curve)] {
        for (step, loss) in curve.iter().enumerate() {
            csv.push_str(&format!("{stage},{step},{loss}\n"));
        }
    }
    fs::write(ws.dir.join("gat_loss.csv"), csv)?;
    let mut u = infer_test_embeddings(&model, &graph)?;
    u.extend(infer_masked_embeddings(&model, &graph)?);
    save_embeddings(ws, &u)?;
    Ok(notes)
}

/// `no_kg`: regress latents on standardized EHR with a feed-forward network.
/// Training patients get out-of-fold predictions.
fn embed_ehr(ws: &Workspace) -> Result<Value> {
    let ds = load_ds(ws)?;
    let g = groups(&ds, ws);
    let ae = load_ae(ws)?;
    let z = train_latents(&ae, &ds, &g.train)?;
    let d = ws.cfg.ae.latent_dim;
    let a = &ws.cfg.ablations;
    let fit = |ids: &[String], seed: u64| -> Result<(Standardizer, FeedForward)> {
        let rows = ehr_rows(&ds, ids)?;
        let scaler = Standardizer::fit(&rows)?;
        let x = scaler.transform_all(&rows);
        let y: Vec<Vec<f64>> = ids.iter().map(|id| z[id].data().to_vec()).collect();
        let spec = FeedForwardSpec {
            inputs: x[0].len(),
            hidden: a.regressor_hidden,
            outputs: d,
            sigmoid: false,
            learning_rate: a.regressor_learning_rate,
            epochs: a.regressor_epochs,
            batch_size: 16,
            seed,
        };
        let mut net = FeedForward::new(spec);
        let mean: Vec<f64> = (0..d).map(|j| y.iter().map(|r| r[j]).sum::<f64>() / y.len() as f64).collect();
        net.set_output_bias(&mean);
        Ok((scaler, net.fit(&x, &y)?))
    };
    let seed = derive_seed(ws.cfg.seed, "regressor");
    let (scaler, net) = fit(&g.train, seed)?;
    let mut u: BTreeMap<String, Tensor> = BTreeMap::new();
    for id in &g.test {
        u.insert(id.clone(), Tensor::vector(net.predict(&scaler.transform(&ds.record(id)?.ehr))));
    }
    let folds = ws.cfg.gat.folds.max(2);
    let mut order = g.train.clone();
    order.shuffle(&mut rng_for(seed, "regressor-folds"));
    for f in 0..folds {
        let held: Vec<String> = order.iter().skip(f).step_by(folds).cloned().collect();
        let rest: Vec<String> = order.iter().filter(|id| !held.contains(id)).cloned().collect();
        let (s, n) = fit(&rest, derive_seed(seed, &format!("fold{f}")))?;
        for id in held {
            let pred = n.predict(&s.transform(&ds.record(&id)?.ehr));
            u.insert(id, Tensor::vector(pred));
        }
    }
    let mut ck = net.to_checkpoint();
    ck.config["scaler"] = serde_json::to_value(&scaler)?;
    ck.save(&ws.regressor())?;
    save_embeddings(ws, &u)?;
    Ok(json!({ "final_loss": net.loss_curve.last() }))
}

/// `no_gat`: copy the latent of the nearest training patient in
/// standardized EHR space (cosine), excluding the patient itself.
fn embed_neighbor(ws: &Workspace) -> Result<Value> {
    let ds = load_ds(ws)?;
    let g = groups(&ds, ws);
    let ae = load_ae(ws)?;
    let z = train_latents(&ae, &ds, &g.train)?;
    let rows = ehr_rows(&ds, &g.train)?;
    let scaler = Standardizer::fit(&rows)?;
    let bank = scaler.transform_all(&rows);
    let mut u = BTreeMap::new();
    let mut pairs = BTreeMap::new();
    for r in &ds.records {
        let exclude = g.train.iter().position(|id| *id == r.id);
        let j = nearest_neighbor(&scaler.transform(&r.ehr), &bank, exclude).ok_or_else(|| Error::InvalidParam("no neighbour available".into()))?;
        u.insert(r.id.clone(), z[&g.train[j]].clone());
        pairs.insert(r.id.clone(), g.train[j].clone());
    }
    save_embeddings(ws, &u)?;
    Ok(json!({ "neighbors": pairs }))
}

fn skip_bank(ae: &AEModel, ds: &Dataset, ids: &[String]) -> Result<SkipBank> {
    let vols: Vec<(&str, &Volume)> = ids.iter().map(|id| Ok((id.as_str(), ds.train_volume(id)?))).collect::<Result<_>>()?;
    SkipBank::build(ae, vols)
}

fn train_adapter(ws: &Workspace) -> Result<Value> {
    let ds = load_ds(ws)?;
    let g = groups(&ds, ws);
    let ae = load_ae(ws)?;
    let u = load_embeddings(ws)?;
    let bank = skip_bank(&ae, &ds, &g.train)?;
    let us: Vec<&[f64]> = g.train.iter().map(|id| embedding(&u, id)).collect::<Result<_>>()?;
    let zs: Vec<&[f64]> = g.train.iter().map(|id| Ok(bank.get(id).ok_or_else(|| Error::NotFound(format!("bank entry {id}")))?.z.data())).collect::<Result<_>>()?;
    let wc = fit_wc_stats(&us, &zs, ws.cfg.wc_epsilon)?;
    let samples: Vec<JointSample> = g
        .fit
        .iter()
        .map(|id| JointSample::new(id, embedding(&u, id)?.to_vec(), ds.train_volume(id)?, label_of(&ds, id)?, &bank, ws.cfg.joint.k))
        .collect::<Result<_>>()?;
    let before = ae.decoder_checksum();
    let adapter = train_joint(AdapterModel::new(ae.config.latent_dim, ws.cfg.joint.seed), &ae, &wc, &samples, &ws.cfg.joint)?;
    let after = ae.decoder_checksum();
    if before != after {
        return Err(Error::FrozenDecoder);
    }
    adapter.to_checkpoint(&wc, &ws.cfg.joint).save(&ws.adapter())?;
    Ok(json!({
        "samples": samples.len(),
        "final_loss": adapter.loss_curve.last(),
        "wc_ill_conditioned": wc.ill_conditioned,
        "decoder_checksum_before": before,
        "decoder_checksum_after": after,
    }))
}

/// `no_ae`: a feed-forward generator from graph embeddings to voxels.
fn train_generator(ws: &Workspace) -> Result<Value> {
    let ds = load_ds(ws)?;
    let g = groups(&ds, ws);
    let u = load_embeddings(ws)?;
    let x: Vec<Vec<f64>> = g.fit.iter().map(|id| Ok(embedding(&u, id)?.to_vec())).collect::<Result<_>>()?;
    let y: Vec<Vec<f64>> = g.fit.iter().map(|id| Ok(ds.train_volume(id)?.data().to_vec())).collect::<Result<_>>()?;
    let voxels = y[0].len();
    let a = &ws.cfg.ablations;
    let spec = FeedForwardSpec {
        inputs: x[0].len(),
        hidden: a.generator_hidden,
        outputs: voxels,
        sigmoid: true,
        learning_rate: a.generator_learning_rate,
        epochs: a.generator_epochs,
        batch_size: 8,
        seed: derive_seed(ws.cfg.seed, "generator"),
    };
    let mut net = FeedForward::new(spec);
    let mean: Vec<f64> = (0..voxels).map(|j| y.iter().map(|r| r[j]).sum::<f64>() / y.len() as f64).collect();
    net.set_output_bias(&mean);
    let net = net.fit(&x, &y)?;
    net.to_checkpoint().save(&ws.generator())?;
    Ok(json!({ "final_loss": net.loss_curve.last() }))
}

/// Everything needed to synthesize volumes for one variant.
struct Synth {
    variant: Variant,
    ae: Option<AEModel>,
    bank: SkipBank,
    adapter: Option<(AdapterModel, WCStats)>,
    generator: Option<FeedForward>,
    k: usize,
    shape: [usize; 3],
}

impl Synth {
    fn load(ws: &Workspace, ds: &Dataset, train: &[String]) -> Result<Self> {
        let (ae, bank) = if ws.variant == Variant::NoAe {
            (None, SkipBank::default())
        } else {
            let ae = load_ae(ws)?;
            let bank = skip_bank(&ae, ds, train)?;
            (Some(ae), bank)
        };
        let adapter = if ws.has_adapter() {
            let (m, wc, _) = AdapterModel::from_checkpoint(&Checkpoint::load(&ws.adapter())?)?;
            Some((m, wc))
        } else {
            None
        };
        let generator = if ws.variant == Variant::NoAe { Some(FeedForward::from_checkpoint(&Checkpoint::load(&ws.generator())?)?) } else { None };
        Ok(Synth { variant: ws.variant, ae, bank, adapter, generator, k: ws.cfg.joint.k, shape: ds.meta.params.shape })
    }

    /// Synthetic volume and skip donors for one patient. Training patients
    /// never receive their own skips.
    fn volume(&self, id: &str, u: &[f64]) -> Result<(Volume, Vec<(String, f64)>)> {
        if let Some(gen) = &self.generator {
            return Ok((Tensor::from_vec(&self.shape, gen.predict(u))?, vec![]));
        }
        let ae = self.ae.as_ref().expect("autoencoder present unless ablated");
        let (skips, donors) = aggregate_skips(u, &self.bank, self.k, Some(id))?;
        let z = match (&self.adapter, self.variant) {
            (Some((m, wc)), _) => m.adapt(&wc.transform(u)),
            (None, Variant::NoAdapter) => Tensor::vector(u.to_vec()),
            _ => return Err(Error::InvalidParam("variant needs an adapter".into())),
        };
        Ok((synthesize(ae, &z, &skips)?, donors))
    }
}

/// Synthesize volumes for `ids` under `ws`'s variant, from persisted artifacts.
pub fn synthesize_for(ws: &Workspace, ids: &[String]) -> Result<BTreeMap<String, Volume>> {
    let ds = load_ds(ws)?;
    let g = groups(&ds, ws);
    let u = load_embeddings(ws)?;
    let synth = Synth::load(ws, &ds, &g.train)?;
    ids.iter().map(|id| Ok((id.clone(), synth.volume(id, embedding(&u, id)?)?.0))).collect()
}

fn synthesize_stage(ws: &Workspace) -> Result<Value> {
    let ds = load_ds(ws)?;
    let g = groups(&ds, ws);
    let u = load_embeddings(ws)?;
    let synth = Synth::load(ws, &ds, &g.train)?;
    let out = ws.synthetic();
    if out.exists() {
        fs::remove_dir_all(&out)?;
    }
    let mut donors = BTreeMap::new();
    for id in g.test.iter().chain(&g.calibration) {
        let (v, d) = synth.volume(id, embedding(&u, id)?)?;
        write_volume(&out, id, &v, false)?;
        donors.insert(id.clone(), d);
    }
    fs::write(out.join("donors.json"), serde_json::to_string_pretty(&donors)?)?;
    Ok(json!({ "volumes": donors.len() }))
}

fn train_baselines(ws: &Workspace) -> Result<Value> {
    let ds = load_ds(ws)?;
    let g = groups(&ds, ws);
    let dir = ws.baselines();
    fs::create_dir_all(&dir)?;
    let (rows, y) = (ehr_rows(&ds, &g.train)?, labels(&ds, &g.train)?);
    for kind in EhrKind::ALL {
        train_ehr_baseline(kind, &rows, &y, &ws.cfg.ehr)?.to_checkpoint().save(&dir.join(format!("ehr_{}.ckpt", kind.as_str())))?;
    }
    // Fusion inputs come from models that never saw the calibration slice.
    let (fit_rows, fit_y) = (ehr_rows(&ds, &g.fit)?, labels(&ds, &g.fit)?);
    train_ehr_baseline(EhrKind::Mlp, &fit_rows, &fit_y, &ws.cfg.ehr)?.to_checkpoint().save(&dir.join("fusion_ehr.ckpt"))?;
    let vols: Vec<TaggedVolume> = g.fit.iter().map(|id| Ok(TaggedVolume::real(id.clone(), ds.train_volume(id)?.clone()))).collect::<Result<_>>()?;
    let cnn = train_cnn3d(&vols, &fit_y, &ws.cfg.cnn)?;
    cnn.to_checkpoint().save(&dir.join("cnn.ckpt"))?;
    Ok(json!({ "train": g.train.len(), "fit": g.fit.len(), "calibration": g.calibration.len(), "cnn_final_loss": cnn.loss_curve.last() }))
}

fn load_ehr(ws: &Workspace, name: &str) -> Result<EhrModel> {
    EhrModel::from_checkpoint(&Checkpoint::load(&ws.baselines().join(format!("{name}.ckpt")))?)
}

fn load_cnn(ws: &Workspace) -> Result<CnnModel> {
    CnnModel::from_checkpoint(&Checkpoint::load(&ws.baselines().join("cnn.ckpt"))?)
}

fn synthetic_volumes(ws: &Workspace, ids: &[String]) -> Result<Vec<TaggedVolume>> {
    ids.iter().map(|id| Ok(TaggedVolume::synthetic(id.clone(), read_volume(&ws.synthetic(), id)?.0))).collect()
}

fn fusion_features(ws: &Workspace, ds: &Dataset, ids: &[String]) -> Result<(Vec<crate::classifiers::FusionFeature>, Vec<f64>)> {
    let ehr = load_ehr(ws, "fusion_ehr")?;
    let p_mri = load_cnn(ws)?.predict_synthetic(&synthetic_volumes(ws, ids)?)?;
    let feats = ids.iter().zip(&p_mri).map(|(id, &m)| build_fusion_vector(ehr.predict(&ds.record(id)?.ehr), m)).collect::<Result<_>>()?;
    Ok((feats, p_mri))
}

fn train_fusion_stage(ws: &Workspace) -> Result<Value> {
    let ds = load_ds(ws)?;
    let g = groups(&ds, ws);
    let dir = ws.fusion();
    fs::create_dir_all(&dir)?;
    let (feats, _) = fusion_features(ws, &ds, &g.calibration)?;
    let fusion = train_fusion(&feats, &labels(&ds, &g.calibration)?)?;
    fs::write(dir.join("fusion.json"), serde_json::to_string_pretty(&fusion)?)?;
    if !ws.has_adapter() {
        // Without C_φ, the latent path is a logistic model on the embeddings.
        let u = load_embeddings(ws)?;
        let rows: Vec<Vec<f64>> = g.fit.iter().map(|id| Ok(embedding(&u, id)?.to_vec())).collect::<Result<_>>()?;
        train_ehr_baseline(EhrKind::Lr, &rows, &labels(&ds, &g.fit)?, &ws.cfg.ehr)?.to_checkpoint().save(&dir.join("latent_lr.ckpt"))?;
    }
    Ok(json!({ "weights": fusion.lr.weights, "intercept": fusion.lr.intercept }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Ehr,
    SynMri,
    Latent,
    Fusion,
}

impl Which {
    pub const ALL: [Which; 4] = [Which::Ehr, Which::SynMri, Which::Latent, Which::Fusion];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ehr" => Ok(Which::Ehr),
            "syn-mri" | "syn_mri" => Ok(Which::SynMri),
            "latent" => Ok(Which::Latent),
            "fusion" => Ok(Which::Fusion),
            _ => Err(Error::InvalidParam(format!("unknown evaluation {s:?} (expected ehr, syn-mri, latent or fusion)"))),
        }
    }
}

/// Score test patients on the selected paths, write prediction files and
/// return the report. The report is saved to the variant directory when
/// every path is evaluated.
pub fn evaluate(ws: &Workspace, which: &[Which]) -> Result<ExperimentReport> {
    let ds = load_ds(ws)?;
    let g = groups(&ds, ws);
    let test_labels = labels(&ds, &g.test)?;
    let mut rows = Vec::new();
    let mut record = |method: &str, scores: Vec<f64>| -> Result<()> {
        let preds: Vec<Prediction> = g.test.iter().zip(&test_labels).zip(scores).map(|((id, &label), score)| Prediction { id: id.clone(), label, score }).collect();
        let rel = format!("predictions/{method}.csv");
        let sha256 = write_predictions(&ws.dir.join(&rel), &preds)?;
        rows.push(MetricRow { method: method.to_string(), metrics: metrics_of(&preds)?, predictions: rel, sha256 });
        Ok(())
    };
    if which.contains(&Which::Ehr) {
        for kind in EhrKind::ALL {
            let m = load_ehr(ws, &format!("ehr_{}", kind.as_str()))?;
            record(&format!("ehr_{}", kind.as_str()), g.test.iter().map(|id| Ok(m.predict(&ds.record(id)?.ehr))).collect::<Result<_>>()?)?;
        }
    }
    let fusion_inputs = if which.contains(&Which::SynMri) || which.contains(&Which::Fusion) { Some(fusion_features(ws, &ds, &g.test)?) } else { None };
    if which.contains(&Which::SynMri) {
        record("syn_mri", fusion_inputs.as_ref().expect("computed").1.clone())?;
    }
    let mut latent_calls = None;
    if which.contains(&Which::Latent) {
        let u = load_embeddings(ws)?;
        let before = decode_calls();
        let scores: Vec<f64> = if ws.has_adapter() {
            let (adapter, wc, _) = AdapterModel::from_checkpoint(&Checkpoint::load(&ws.adapter())?)?;
            g.test.iter().map(|id| Ok(classify_latent(&adapter, embedding(&u, id)?, &wc)[1])).collect::<Result<_>>()?
        } else {
            let m = EhrModel::from_checkpoint(&Checkpoint::load(&ws.fusion().join("latent_lr.ckpt"))?)?;
            g.test.iter().map(|id| Ok(m.predict(embedding(&u, id)?))).collect::<Result<_>>()?
        };
        let calls = decode_calls() - before;
        latent_calls = Some(calls);
        record("latent", scores)?;
    }
    if which.contains(&Which::Fusion) {
        let text = fs::read_to_string(ws.fusion().join("fusion.json"))?;
        let fusion: FusionModel = serde_json::from_str(&text)?;
        record("fusion", fusion_inputs.as_ref().expect("computed").0.iter().map(|f| predict_fusion(&fusion, f)).collect())?;
    }
    let report = ExperimentReport {
        variant: ws.variant.as_str().to_string(),
        provenance: provenance(ws)?,
        config: echo(&ws.cfg),
        rows,
        latent_decoder_calls: latent_calls,
    };
    if which.len() == Which::ALL.len() {
        report.save(&ws.dir)?;
    }
    Ok(report)
}
