//! Type-specific projection plus residual GATv2 message passing over a
//! [`HeteroGraph`], with the two training stages.
//!
//! Per layer and head, with source maps `T = H·W_t` and target maps
//! `S = H·W_s`:
//!
//! ```text
//! score(u→v) = aᵀ LeakyReLU_0.2(S_v + T_u)
//! α(u→v)     = softmax over the in-neighbours of v (self-loop included)
//! m_v        = Σ_u α(u→v) T_u
//! h'_v       = h_v + ELU(mean over heads of m_v)
//! ```
//!
//! Nodes are processed in canonical (type, id) order, so outputs do not
//! depend on insertion order.
//!
//! Training masks a random subset of training patients: their features are
//! zeroed and they are projected as if they were unscanned patients. Their
//! latent targets must then be recovered from the graph alone, which is
//! exactly the situation of the unscanned patients at inference time.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{decode_var, AEModel, SkipFeatureSet};
use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{dim_err, param_err, Error, Result};
use crate::kg::{HeteroGraph, NodeType};
use crate::nn::{glorot, Adam, Bound, ParamSet};
use crate::rng::{rng_for, Rng as SeededRng};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub learning_rate: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    /// Training patients decoded per stage-2 step.
    pub stage2_batch: usize,
    pub stage2_learning_rate: f64,
    /// Fraction of training patients masked per step.
    pub mask_rate: f64,
    /// Folds used to produce masked embeddings for training patients.
    pub folds: usize,
    pub seed: u64,
}

impl Default for GatConfig {
    fn default() -> Self {
        GatConfig {
            d: 64,
            heads: 4,
            layers: 3,
            learning_rate: 3e-3,
            stage1_steps: 300,
            stage2_steps: 40,
            stage2_batch: 4,
            stage2_learning_rate: 5e-4,
            mask_rate: 0.5,
            folds: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatModel {
    pub config: GatConfig,
    params: ParamSet,
    pub stage1_curve: Vec<f64>,
    pub stage2_curve: Vec<f64>,
}

fn type_key(t: NodeType) -> &'static str {
    t.as_str()
}

impl GatModel {
    /// `widths` gives the input feature width of each node type.
    pub fn new(config: GatConfig, widths: &BTreeMap<NodeType, usize>) -> Result<Self> {
        if config.d == 0 || config.heads == 0 || config.layers == 0 {
            return param_err("GAT width, heads and layers must be positive");
        }
        if !(0.0..1.0).contains(&config.mask_rate) {
            return param_err("mask_rate must lie in [0, 1)");
        }
        let d = config.d;
        let mut rng = rng_for(config.seed, "gat-init");
        let mut params = ParamSet::new();
        for t in NodeType::ALL {
            let w = *widths.get(&t).unwrap_or(&d);
            let proj = if t == NodeType::TrainPatient && w == d {
                // Start scanned patients at their own latent.
                let mut eye = Tensor::zeros(&[d, d]);
                for i in 0..d {
                    eye.data_mut()[i * d + i] = 1.0;
                }
                eye
            } else {
                glorot(&[w, d], w, d, &mut rng)
            };
            params.insert(format!("proj.{}.w", type_key(t)), proj);
            params.insert(format!("proj.{}.b", type_key(t)), Tensor::zeros(&[d]));
        }
        for l in 0..config.layers {
            for h in 0..config.heads {
                params.insert(format!("l{l}.h{h}.ws"), glorot(&[d, d], d, d, &mut rng).map(|v| 0.5 * v));
                params.insert(format!("l{l}.h{h}.wt"), glorot(&[d, d], d, d, &mut rng).map(|v| 0.5 * v));
                params.insert(format!("l{l}.h{h}.a"), glorot(&[d, 1], d, 1, &mut rng));
            }
        }
        Ok(GatModel { config, params, stage1_curve: vec![], stage2_curve: vec![] })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn input_width(&self, t: NodeType) -> usize {
        self.params.get(&format!("proj.{}.w", type_key(t))).map(|w| w.shape()[0]).unwrap_or(0)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let cfg = serde_json::json!({
            "gat": self.config,
            "stage1_curve": self.stage1_curve,
            "stage2_curve": self.stage2_curve,
        });
        Checkpoint::new(cfg, self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: GatConfig = serde_json::from_value(ck.config["gat"].clone())?;
        let mut widths = BTreeMap::new();
        for t in NodeType::ALL {
            widths.insert(t, ck.array(&format!("proj.{}.w", type_key(t)))?.shape()[0]);
        }
        let mut m = GatModel::new(config, &widths)?;
        m.params.assign(&ck.arrays)?;
        m.stage1_curve = serde_json::from_value(ck.config["stage1_curve"].clone()).unwrap_or_default();
        m.stage2_curve = serde_json::from_value(ck.config["stage2_curve"].clone()).unwrap_or_default();
        Ok(m)
    }
}

/// Index form of a canonical graph, with self-loops added.
#[derive(Clone, Debug)]
pub struct Compiled {
    pub ids: Vec<String>,
    pub types: Vec<NodeType>,
    /// Contiguous node range of each type, in `NodeType::ALL` order.
    pub ranges: Vec<(usize, usize)>,
    feats: Vec<Option<Tensor>>,
    pub src: Rc<Vec<usize>>,
    pub dst: Rc<Vec<usize>>,
}

impl Compiled {
    pub fn new(graph: &HeteroGraph, model: &GatModel) -> Result<Self> {
        let g = graph.canonical();
        g.validate()?;
        let ids: Vec<String> = g.nodes().iter().map(|n| n.id.clone()).collect();
        let types: Vec<NodeType> = g.nodes().iter().map(|n| n.node_type).collect();
        let mut ranges = Vec::new();
        let mut feats = Vec::new();
        for t in NodeType::ALL {
            let start = types.iter().position(|&x| x == t).unwrap_or(0);
            let len = types.iter().filter(|&&x| x == t).count();
            ranges.push((start, len));
            if len == 0 {
                feats.push(None);
                continue;
            }
            let w = g.nodes()[start].features.len();
            if w != model.input_width(t) {
                return dim_err(format!("{} features have width {w}, projection expects {}", t.as_str(), model.input_width(t)));
            }
            let data = g.nodes()[start..start + len].iter().flat_map(|n| n.features.iter().copied()).collect();
            feats.push(Some(Tensor::new(&[len, w], data)));
        }
        let mut pairs: Vec<(usize, usize)> = g.edges().iter().map(|e| (e.dst, e.src)).collect();
        pairs.extend((0..ids.len()).map(|i| (i, i)));
        pairs.sort();
        pairs.dedup();
        let dst = Rc::new(pairs.iter().map(|p| p.0).collect());
        let src = Rc::new(pairs.iter().map(|p| p.1).collect());
        Ok(Compiled { ids, types, ranges, feats, src, dst })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    fn range(&self, t: NodeType) -> (usize, usize) {
        self.ranges[NodeType::ALL.iter().position(|&x| x == t).unwrap()]
    }
}

/// Level-0 states on a tape. Training patients listed in `masked` (node
/// indices) are projected as unscanned patients with zero features.
fn project<'t>(tape: &'t Tape, p: &Bound<'t>, c: &Compiled, masked: &[usize]) -> Var<'t> {
    let mut parts: Vec<Var<'t>> = Vec::new();
    for (ti, t) in NodeType::ALL.into_iter().enumerate() {
        let Some(x) = &c.feats[ti] else { continue };
        let (w, b) = (p[&*format!("proj.{}.w", type_key(t))], p[&*format!("proj.{}.b", type_key(t))]);
        let mut h = tape.constant(x.clone()).matmul(w).add_row(b);
        let (start, len) = c.range(t);
        let local: Vec<usize> = masked.iter().filter(|&&i| i >= start && i < start + len).map(|&i| i - start).collect();
        if t == NodeType::TrainPatient && !local.is_empty() {
            let mut keep = vec![1.0; len];
            local.iter().for_each(|&i| keep[i] = 0.0);
            let drop: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
            let bt = p["proj.test_patient.b"];
            let d = bt.shape()[0];
            let bt_rows = bt.reshape(&[1, d]).gather_rows(Rc::new(vec![0; len]));
            h = h.scale_rows(tape.constant(Tensor::vector(keep))).add(bt_rows.scale_rows(tape.constant(Tensor::vector(drop))));
        }
        parts.push(h);
    }
    let mut it = parts.into_iter();
    let first = it.next().expect("graph has nodes");
    it.fold(first, |acc, v| acc.concat0(v))
}

/// Attention weights of one layer and head, per edge (in `c.src/c.dst` order).
fn attention<'t>(p: &Bound<'t>, c: &Compiled, h: Var<'t>, l: usize, head: usize) -> (Var<'t>, Var<'t>) {
    let n = c.len();
    let s = h.matmul(p[&*format!("l{l}.h{head}.ws")]);
    let t = h.matmul(p[&*format!("l{l}.h{head}.wt")]);
    let ts = t.gather_rows(c.src.clone());
    let e = s.gather_rows(c.dst.clone()).add(ts).leaky_relu(LEAKY_SLOPE);
    let score = e.matmul(p[&*format!("l{l}.h{head}.a")]).reshape(&[c.src.len()]);
    (score.segment_softmax(c.dst.clone(), n), ts)
}

fn layer<'t>(p: &Bound<'t>, c: &Compiled, h: Var<'t>, l: usize, heads: usize) -> Var<'t> {
    let n = c.len();
    let mut acc: Option<Var<'t>> = None;
    for head in 0..heads {
        let (alpha, ts) = attention(p, c, h, l, head);
        let m = ts.scale_rows(alpha).scatter_add_rows(c.dst.clone(), n);
        acc = Some(match acc {
            Some(a) => a.add(m),
            None => m,
        });
    }
    h.add(acc.expect("at least one head").scale(1.0 / heads as f64).elu())
}

/// All levels `h^(0..=L)` on a tape.
fn forward_var<'t>(tape: &'t Tape, p: &Bound<'t>, c: &Compiled, cfg: &GatConfig, masked: &[usize]) -> Vec<Var<'t>> {
    let mut levels = vec![project(tape, p, c, masked)];
    for l in 0..cfg.layers {
        let h = *levels.last().unwrap();
        levels.push(layer(p, c, h, l, cfg.heads));
    }
    levels
}

/// Node states for every level.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeStates {
    pub ids: Vec<String>,
    /// `levels[ℓ]` is `[N, d]` in `ids` order.
    pub levels: Vec<Tensor>,
}

impl NodeStates {
    pub fn get(&self, id: &str, level: usize) -> Option<&[f64]> {
        let i = self.ids.iter().position(|x| x == id)?;
        Some(self.levels[level].row(i))
    }

    pub fn last(&self, id: &str) -> Option<&[f64]> {
        self.get(id, self.levels.len() - 1)
    }
}

fn run_forward(model: &GatModel, c: &Compiled, masked: &[usize]) -> Result<NodeStates> {
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let levels = forward_var(&tape, &p, c, &model.config, masked);
    let mut out = Vec::with_capacity(levels.len());
    for (l, v) in levels.iter().enumerate() {
        let t = (*v.value()).clone();
        if !t.is_finite() {
            return Err(Error::NonFinite { stage: format!("GAT layer {l}"), step: 0 });
        }
        out.push(t);
    }
    Ok(NodeStates { ids: c.ids.clone(), levels: out })
}

/// Level-0 states only.
pub fn project_features(model: &GatModel, graph: &HeteroGraph) -> Result<NodeStates> {
    let c = Compiled::new(graph, model)?;
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let h0 = project(&tape, &p, &c, &[]);
    Ok(NodeStates { ids: c.ids.clone(), levels: vec![(*h0.value()).clone()] })
}

pub fn gat_forward(model: &GatModel, graph: &HeteroGraph) -> Result<NodeStates> {
    let c = Compiled::new(graph, model)?;
    run_forward(model, &c, &[])
}

/// Attention weights of layer `layer` at node `id`, per head, as
/// `(source id, weight)` pairs over in-neighbours and the node itself.
pub fn attention_coefficients(model: &GatModel, graph: &HeteroGraph, layer_index: usize, id: &str) -> Result<Vec<Vec<(String, f64)>>> {
    if layer_index >= model.config.layers {
        return param_err(format!("layer {layer_index} out of range"));
    }
    let c = Compiled::new(graph, model)?;
    let v = c.index_of(id).ok_or_else(|| Error::NotFound(format!("node {id}")))?;
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let levels = forward_var(&tape, &p, &c, &model.config, &[]);
    let h = levels[layer_index];
    (0..model.config.heads)
        .map(|head| {
            let (alpha, _) = attention(&p, &c, h, layer_index, head);
            let a = alpha.value();
            Ok(c.dst.iter().enumerate().filter(|(_, &d)| d == v).map(|(e, _)| (c.ids[c.src[e]].clone(), a.data()[e])).collect())
        })
        .collect()
}

/// `h^(L)` for every unscanned-patient node.
pub fn infer_test_embeddings(model: &GatModel, graph: &HeteroGraph) -> Result<BTreeMap<String, Tensor>> {
    let states = gat_forward(model, graph)?;
    let last = states.levels.last().unwrap();
    Ok(states
        .ids
        .iter()
        .enumerate()
        .filter(|(i, _)| graph.node(&states.ids[*i]).map(|n| n.node_type) == Some(NodeType::TestPatient))
        .map(|(i, id)| (id.clone(), Tensor::vector(last.row(i).to_vec())))
        .collect())
}

/// Embeddings for training patients produced the way unscanned patients'
/// are: training patients are split into folds and each fold is masked in
/// turn.
pub fn infer_masked_embeddings(model: &GatModel, graph: &HeteroGraph) -> Result<BTreeMap<String, Tensor>> {
    let c = Compiled::new(graph, model)?;
    let (start, len) = c.range(NodeType::TrainPatient);
    let folds = model.config.folds.max(1);
    let mut order: Vec<usize> = (start..start + len).collect();
    order.shuffle(&mut rng_for(model.config.seed, "gat-folds"));
    let mut out = BTreeMap::new();
    for f in 0..folds {
        let masked: Vec<usize> = order.iter().copied().skip(f).step_by(folds).collect();
        if masked.is_empty() {
            continue;
        }
        let states = run_forward(model, &c, &masked)?;
        let last = states.levels.last().unwrap();
        for &i in &masked {
            out.insert(c.ids[i].clone(), Tensor::vector(last.row(i).to_vec()));
        }
    }
    Ok(out)
}

fn sample_mask(rng: &mut SeededRng, start: usize, len: usize, rate: f64) -> Vec<usize> {
    (start..start + len).filter(|_| rng.random::<f64>() < rate).collect()
}

/// Stage-1 loss: mean squared error between `h^(L)` and `z` over training
/// patients, with `masked` nodes projected as unscanned.
pub fn stage1_loss<'t>(tape: &'t Tape, p: &Bound<'t>, c: &Compiled, cfg: &GatConfig, targets: &Rc<Tensor>, masked: &[usize]) -> Var<'t> {
    let (start, len) = c.range(NodeType::TrainPatient);
    let last = *forward_var(tape, p, c, cfg, masked).last().unwrap();
    last.gather_rows(Rc::new((start..start + len).collect())).mse(targets.clone())
}

fn train_targets(c: &Compiled, targets: &BTreeMap<String, Tensor>, d: usize) -> Result<Rc<Tensor>> {
    let (start, len) = c.range(NodeType::TrainPatient);
    if len == 0 {
        return param_err("stage-1 training needs at least one training patient");
    }
    let mut data = Vec::with_capacity(len * d);
    for id in &c.ids[start..start + len] {
        let z = targets.get(id).ok_or_else(|| Error::NotFound(format!("latent target for {id}")))?;
        if z.len() != d {
            return dim_err(format!("target for {id} has length {}", z.len()));
        }
        data.extend_from_slice(z.data());
    }
    Ok(Rc::new(Tensor::new(&[len, d], data)))
}

/// Regress `h^(L)` onto the latent targets of training patients.
pub fn train_stage1(mut model: GatModel, graph: &HeteroGraph, targets: &BTreeMap<String, Tensor>) -> Result<GatModel> {
    let c = Compiled::new(graph, &model)?;
    let cfg = model.config.clone();
    let t = train_targets(&c, targets, cfg.d)?;
    let (start, len) = c.range(NodeType::TrainPatient);
    let mut rng = rng_for(cfg.seed, "gat-stage1");
    let mut opt = Adam::new(cfg.learning_rate);
    for step in 0..cfg.stage1_steps {
        let masked = sample_mask(&mut rng, start, len, cfg.mask_rate);
        let tape = Tape::new();
        let p = model.params.bind(&tape, true);
        let loss = stage1_loss(&tape, &p, &c, &cfg, &t, &masked);
        let v = loss.item();
        if !v.is_finite() {
            return Err(Error::NonFinite { stage: "GAT stage 1".into(), step });
        }
        model.stage1_curve.push(v);
        let g = p.grads(&tape.backward(loss));
        opt.step(&mut model.params, &g);
    }
    Ok(model)
}

/// Per-patient reconstruction target and encoder skips for stage 2.
pub struct ReconTarget {
    pub volume: Rc<Tensor>,
    pub skips: SkipFeatureSet,
}

/// Stage-2 loss for a batch of training-patient node indices, which are
/// masked so their states come from the graph.
pub fn stage2_loss<'t>(tape: &'t Tape, p: &Bound<'t>, c: &Compiled, cfg: &GatConfig, ae: &AEModel, dec: &Bound<'t>, batch: &[(usize, &ReconTarget)]) -> Var<'t> {
    let masked: Vec<usize> = batch.iter().map(|b| b.0).collect();
    let last = *forward_var(tape, p, c, cfg, &masked).last().unwrap();
    let mut total: Option<Var<'t>> = None;
    for &(i, target) in batch {
        let z = last.gather_rows(Rc::new(vec![i]));
        let skips: Vec<Var<'t>> = target.skips.levels.iter().map(|s| tape.constant(s.clone())).collect();
        let out = decode_var(&ae.config, dec, z, &skips);
        let l = out.mse(target.volume.clone()).add(out.ssim3d(target.volume.clone(), crate::loss::SSIM_WINDOW).scale(-1.0).add_scalar(1.0));
        total = Some(match total {
            Some(t) => t.add(l),
            None => l,
        });
    }
    total.expect("non-empty batch").scale(1.0 / batch.len() as f64)
}

/// Fine-tune through the frozen decoder with reconstruction + (1 − SSIM).
pub fn finetune_stage2(mut model: GatModel, graph: &HeteroGraph, targets: &BTreeMap<String, ReconTarget>, ae: &AEModel) -> Result<GatModel> {
    if !ae.is_frozen() {
        return Err(Error::DecoderNotFrozen("GAT stage 2"));
    }
    let c = Compiled::new(graph, &model)?;
    let cfg = model.config.clone();
    let (start, len) = c.range(NodeType::TrainPatient);
    let pool: Vec<(usize, &ReconTarget)> = (start..start + len)
        .map(|i| targets.get(&c.ids[i]).map(|t| (i, t)).ok_or_else(|| Error::NotFound(format!("volume for {}", c.ids[i]))))
        .collect::<Result<_>>()?;
    if pool.is_empty() {
        return param_err("stage-2 training needs training patients");
    }
    let mut rng = rng_for(cfg.seed, "gat-stage2");
    let mut opt = Adam::new(cfg.stage2_learning_rate);
    for step in 0..cfg.stage2_steps {
        let batch: Vec<(usize, &ReconTarget)> = pool.choose_multiple(&mut rng, cfg.stage2_batch.min(pool.len())).copied().collect();
        let tape = Tape::new();
        let p = model.params.bind(&tape, true);
        let dec = ae.params().bind(&tape, false);
        let loss = stage2_loss(&tape, &p, &c, &cfg, ae, &dec, &batch);
        let v = loss.item();
        if !v.is_finite() {
            return Err(Error::NonFinite { stage: "GAT stage 2".into(), step });
        }
        model.stage2_curve.push(v);
        let g = p.grads(&tape.backward(loss));
        opt.step(&mut model.params, &g);
    }
    Ok(model)
}

/// Mean (1 − SSIM) of masked training patients decoded with their own skips.
pub fn masked_ssim_gap(model: &GatModel, graph: &HeteroGraph, targets: &BTreeMap<String, ReconTarget>, ae: &AEModel) -> Result<f64> {
    let u = infer_masked_embeddings(model, graph)?;
    let mut total = 0.0;
    for (id, t) in targets {
        let ui = u.get(id).ok_or_else(|| Error::NotFound(format!("embedding for {id}")))?;
        let out = ae.decode(ui, &t.skips)?;
        let target = (*t.volume).clone().reshape(&ae.config.volume_shape)?;
        total += 1.0 - crate::loss::ssim3d(&out, &target, crate::loss::SSIM_WINDOW, 1.0)?;
    }
    Ok(total / targets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_rel_error;
    use crate::kg::Relation;

    fn widths(d: usize, concept: usize) -> BTreeMap<NodeType, usize> {
        [(NodeType::TrainPatient, d), (NodeType::TestPatient, d), (NodeType::Concept, concept)].into_iter().collect()
    }

    fn toy_graph(d: usize) -> HeteroGraph {
        let mut g = HeteroGraph::new();
        g.add_node("P1", NodeType::TrainPatient, (0..d).map(|i| i as f64 * 0.1).collect()).unwrap();
        g.add_node("P2", NodeType::TrainPatient, (0..d).map(|i| 0.3 - i as f64 * 0.05).collect()).unwrap();
        g.add_node("T1", NodeType::TestPatient, vec![0.0; d]).unwrap();
        g.add_node("C1", NodeType::Concept, vec![1.0, 0.0, 0.5]).unwrap();
        g.add_node("C2", NodeType::Concept, vec![0.0, 1.0, -0.5]).unwrap();
        for (p, c) in [("P1", "C1"), ("P2", "C2"), ("T1", "C1"), ("T1", "C2")] {
            g.add_edge(p, c, Relation::HasConcept).unwrap();
            g.add_edge(c, p, Relation::ConceptOf).unwrap();
        }
        g
    }

    fn toy_model(d: usize) -> GatModel {
        let cfg = GatConfig { d, heads: 2, layers: 3, seed: 5, ..GatConfig::default() };
        let mut m = GatModel::new(cfg, &widths(d, 3)).unwrap();
        m.params.get_mut("proj.test_patient.b").unwrap().data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * (i as f64 + 1.0));
        m
    }

    #[test]
    fn projection_contracts() {
        let m = toy_model(4);
        let s = project_features(&m, &toy_graph(4)).unwrap();
        assert_eq!(s.get("T1", 0).unwrap(), m.params.get("proj.test_patient.b").unwrap().data());
        assert_eq!(s.get("C1", 0).unwrap().len(), 4);
        let mut g = HeteroGraph::new();
        g.add_node("A", NodeType::TrainPatient, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        g.add_node("B", NodeType::TrainPatient, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = project_features(&m, &g).unwrap();
        assert_eq!(s.get("A", 0), s.get("B", 0));
        let mut bad = HeteroGraph::new();
        bad.add_node("A", NodeType::TrainPatient, vec![1.0; 5]).unwrap();
        assert!(matches!(project_features(&m, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn attention_weights_normalize() {
        let m = toy_model(4);
        let g = toy_graph(4);
        for l in 0..3 {
            for id in ["P1", "P2", "T1", "C1", "C2"] {
                for head in attention_coefficients(&m, &g, l, id).unwrap() {
                    let s: f64 = head.iter().map(|(_, w)| w).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                    assert!(head.iter().all(|(_, w)| *w > 0.0));
                }
            }
        }
    }

    #[test]
    fn identical_neighbour_gets_half_weight() {
        let m = toy_model(4);
        let mut g = HeteroGraph::new();
        g.add_node("A", NodeType::TrainPatient, vec![1.0, 0.5, -0.5, 2.0]).unwrap();
        g.add_node("B", NodeType::TrainPatient, vec![1.0, 0.5, -0.5, 2.0]).unwrap();
        g.add_edge("B", "A", Relation::HasConcept).unwrap();
        for head in attention_coefficients(&m, &g, 0, "A").unwrap() {
            assert_eq!(head.len(), 2);
            for (_, w) in head {
                assert!((w - 0.5).abs() < 1e-12);
            }
        }
    }

    /// Straight-line evaluation of one layer's scores and weights.
    fn oracle_weights(m: &GatModel, h: &Tensor, l: usize, head: usize, v: usize, nbrs: &[usize]) -> Vec<f64> {
        let d = m.config.d;
        let ws = m.params.get(&format!("l{l}.h{head}.ws")).unwrap();
        let wt = m.params.get(&format!("l{l}.h{head}.wt")).unwrap();
        let a = m.params.get(&format!("l{l}.h{head}.a")).unwrap();
        let lin = |w: &Tensor, x: &[f64]| -> Vec<f64> { (0..d).map(|j| (0..d).map(|i| x[i] * w.data()[i * d + j]).sum()).collect() };
        let sv = lin(ws, h.row(v));
        let scores: Vec<f64> = nbrs
            .iter()
            .map(|&u| {
                let tu = lin(wt, h.row(u));
                (0..d).map(|k| {
                    let e = sv[k] + tu[k];
                    a.data()[k] * if e > 0.0 { e } else { LEAKY_SLOPE * e }
                }).sum()
            })
            .collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = ex.iter().sum();
        ex.iter().map(|e| e / z).collect()
    }

    #[test]
    fn attention_matches_straight_line_oracle() {
        let m = toy_model(4);
        let mut g = HeteroGraph::new();
        g.add_node("A", NodeType::TrainPatient, vec![0.2, -0.4, 1.0, 0.3]).unwrap();
        g.add_node("B", NodeType::TrainPatient, vec![-1.0, 0.5, 0.1, 0.0]).unwrap();
        g.add_node("C", NodeType::TestPatient, vec![0.0; 4]).unwrap();
        g.add_edge("B", "A", Relation::HasConcept).unwrap();
        g.add_edge("C", "A", Relation::HasConcept).unwrap();
        let h0 = project_features(&m, &g).unwrap().levels.remove(0);
        let got = attention_coefficients(&m, &g, 0, "A").unwrap();
        for (head, weights) in got.iter().enumerate() {
            // Sources sorted by node index: A (self), B, C.
            let want = oracle_weights(&m, &h0, 0, head, 0, &[0, 1, 2]);
            for ((_, w), o) in weights.iter().zip(&want) {
                assert!((w - o).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_matches_dense_oracle() {
        let m = toy_model(4);
        let g = toy_graph(4);
        let states = gat_forward(&m, &g).unwrap();
        let c = Compiled::new(&g, &m).unwrap();
        let n = c.len();
        let mut adj = vec![vec![false; n]; n];
        for (&s, &d) in c.src.iter().zip(c.dst.iter()) {
            adj[d][s] = true;
        }
        let d = 4;
        let mut h = states.levels[0].clone();
        for l in 0..3 {
            let mut next = h.clone();
            for v in 0..n {
                let nbrs: Vec<usize> = (0..n).filter(|&u| adj[v][u]).collect();
                let mut agg = vec![0.0; d];
                for head in 0..2 {
                    let wt = m.params.get(&format!("l{l}.h{head}.wt")).unwrap();
                    let w = oracle_weights(&m, &h, l, head, v, &nbrs);
                    for (&u, wu) in nbrs.iter().zip(&w) {
                        for j in 0..d {
                            let t: f64 = (0..d).map(|i| h.row(u)[i] * wt.data()[i * d + j]).sum();
                            agg[j] += wu * t / 2.0;
                        }
                    }
                }
                for j in 0..d {
                    let a = agg[j];
                    next.data_mut()[v * d + j] = h.row(v)[j] + if a > 0.0 { a } else { a.exp_m1() };
                }
            }
            h = next;
            for (x, y) in h.data().iter().zip(states.levels[l + 1].data()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zeroed_layers_are_the_identity() {
        let mut m = toy_model(4);
        for (name, t) in m.params.clone().iter() {
            if name.starts_with('l') {
                *m.params.get_mut(name).unwrap() = Tensor::zeros(t.shape());
            }
        }
        let s = gat_forward(&m, &toy_graph(4)).unwrap();
        assert_eq!(s.levels[0], s.levels[3]);
    }

    #[test]
    fn node_order_does_not_matter() {
        let m = toy_model(4);
        let g = toy_graph(4);
        let mut r = HeteroGraph::new();
        for n in g.nodes().iter().rev() {
            r.add_node(n.id.clone(), n.node_type, n.features.clone()).unwrap();
        }
        for e in g.edges().iter().rev() {
            r.add_edge(&g.nodes()[e.src].id, &g.nodes()[e.dst].id, e.relation).unwrap();
        }
        let (a, b) = (gat_forward(&m, &g).unwrap(), gat_forward(&m, &r).unwrap());
        for id in ["P1", "T1", "C2"] {
            assert_eq!(a.last(id), b.last(id));
        }
    }

    #[test]
    fn test_embeddings_are_nonzero_and_symmetric() {
        let m = toy_model(4);
        let mut g = toy_graph(4);
        g.add_node("T2", NodeType::TestPatient, vec![0.0; 4]).unwrap();
        for c in ["C1", "C2"] {
            g.add_edge("T2", c, Relation::HasConcept).unwrap();
            g.add_edge(c, "T2", Relation::ConceptOf).unwrap();
        }
        let u = infer_test_embeddings(&m, &g).unwrap();
        assert_eq!(u.len(), 2);
        assert!(u["T1"].norm() > 0.0);
        assert_eq!(u["T1"], u["T2"]);
    }

    #[test]
    fn stage1_reduces_loss_and_is_reproducible() {
        let m = toy_model(4);
        let g = toy_graph(4);
        let targets: BTreeMap<String, Tensor> =
            [("P1".to_string(), Tensor::vector(vec![1.0, 0.0, 0.5, -0.5])), ("P2".to_string(), Tensor::vector(vec![-1.0, 0.5, 0.0, 0.5]))].into_iter().collect();
        let a = train_stage1(m.clone(), &g, &targets).unwrap();
        let b = train_stage1(m, &g, &targets).unwrap();
        assert_eq!(a.stage1_curve, b.stage1_curve);
        let first = a.stage1_curve[0];
        let last = *a.stage1_curve.last().unwrap();
        assert!(last < 0.5 * first, "{first} -> {last}");
        let mut empty = HeteroGraph::new();
        empty.add_node("C1", NodeType::Concept, vec![0.0; 3]).unwrap();
        assert!(train_stage1(toy_model(4), &empty, &targets).is_err());
    }

    #[test]
    fn stage1_gradients_match_finite_differences() {
        let m = toy_model(4);
        let g = toy_graph(4);
        let c = Compiled::new(&g, &m).unwrap();
        let cfg = m.config.clone();
        let t = Rc::new(Tensor::from_vec(&[2, 4], vec![1.0, 0.0, 0.5, -0.5, -1.0, 0.5, 0.0, 0.5]).unwrap());
        let masked = vec![1];
        for (name, x) in m.params.iter() {
            let err = max_rel_error(
                x,
                |v| {
                    let tape = v.tape();
                    let mut p = m.params.bind(tape, false);
                    p.replace(name, v);
                    stage1_loss(tape, &p, &c, &cfg, &t, &masked)
                },
                1e-6,
                1,
            );
            assert!(err < 1e-3, "{name}: {err}");
        }
    }
}
