//! Heterogeneous patient/concept graph.
//!
//! Concept nodes carry 768-wide text embeddings, patient nodes carry
//! `d`-wide latents (zeros for patients without a scan). Patients link to
//! the concepts whose descriptions best match their EHR-derived texts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::cohort::{Concept, ConceptCategory};
use crate::error::{dim_err, param_err, Error, Result};
use crate::nn::ParamSet;
use crate::rng::stable_hash;
use crate::tensor::{cosine, Tensor};

pub const EMBED_DIM: usize = 768;

/// Bag of hashed tokens: lower-cased alphanumeric tokens are hashed into
/// `EMBED_DIM` buckets, counted, and the count vector is L2-normalized.
pub fn pseudo_embed_text(text: &str) -> Result<Vec<f64>> {
    let mut v = vec![0.0; EMBED_DIM];
    let mut any = false;
    for tok in text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        v[(stable_hash(&tok.to_lowercase()) % EMBED_DIM as u64) as usize] += 1.0;
        any = true;
    }
    if !any {
        return param_err(format!("cannot embed text without tokens: {text:?}"));
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeType {
    TrainPatient,
    TestPatient,
    Concept,
}

impl NodeType {
    pub const ALL: [NodeType; 3] = [NodeType::TrainPatient, NodeType::TestPatient, NodeType::Concept];

    pub fn as_str(&self) -> &'static str {
        match self {
            NodeType::TrainPatient => "train_patient",
            NodeType::TestPatient => "test_patient",
            NodeType::Concept => "concept",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        NodeType::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    HasConcept,
    ConceptOf,
    SameCategory,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::HasConcept, Relation::ConceptOf, Relation::SameCategory];

    pub fn as_str(&self) -> &'static str {
        match self {
            Relation::HasConcept => "has_concept",
            Relation::ConceptOf => "concept_of",
            Relation::SameCategory => "same_category",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Relation::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub id: String,
    pub node_type: NodeType,
    pub features: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub relation: Relation,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct HeteroGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    index: BTreeMap<String, usize>,
}

impl HeteroGraph {
    pub fn new() -> Self {
        HeteroGraph::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.node_index(id).map(|i| &self.nodes[i])
    }

    pub fn ids_of(&self, t: NodeType) -> Vec<&str> {
        self.nodes.iter().filter(|n| n.node_type == t).map(|n| n.id.as_str()).collect()
    }

    /// Feature width for `t`, if any node of that type exists.
    pub fn feature_width(&self, t: NodeType) -> Option<usize> {
        self.nodes.iter().find(|n| n.node_type == t).map(|n| n.features.len())
    }

    pub fn add_node(&mut self, id: impl Into<String>, node_type: NodeType, features: Vec<f64>) -> Result<usize> {
        let id = id.into();
        if self.index.contains_key(&id) {
            return param_err(format!("duplicate node id {id}"));
        }
        if let Some(w) = self.feature_width(node_type) {
            if w != features.len() {
                return dim_err(format!("{} node {id} has {} features, expected {w}", node_type.as_str(), features.len()));
            }
        }
        let i = self.nodes.len();
        self.index.insert(id.clone(), i);
        self.nodes.push(Node { id, node_type, features });
        Ok(i)
    }

    pub fn add_edge(&mut self, src: &str, dst: &str, relation: Relation) -> Result<()> {
        let s = self.node_index(src).ok_or_else(|| Error::NotFound(format!("edge source {src}")))?;
        let d = self.node_index(dst).ok_or_else(|| Error::NotFound(format!("edge target {dst}")))?;
        self.edges.push(Edge { src: s, dst: d, relation });
        Ok(())
    }

    /// Same graph with nodes sorted by (type, id) and edges sorted; two
    /// graphs with equal content have identical canonical forms.
    pub fn canonical(&self) -> HeteroGraph {
        let mut order: Vec<usize> = (0..self.nodes.len()).collect();
        order.sort_by(|&a, &b| (self.nodes[a].node_type, &self.nodes[a].id).cmp(&(self.nodes[b].node_type, &self.nodes[b].id)));
        let mut remap = vec![0; self.nodes.len()];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new;
        }
        let nodes: Vec<Node> = order.iter().map(|&i| self.nodes[i].clone()).collect();
        let mut edges: Vec<Edge> = self.edges.iter().map(|e| Edge { src: remap[e.src], dst: remap[e.dst], relation: e.relation }).collect();
        edges.sort();
        edges.dedup();
        let index = nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
        HeteroGraph { nodes, edges, index }
    }

    /// Concepts linked from patient `id`.
    pub fn linked_concepts(&self, id: &str) -> Vec<&str> {
        let Some(i) = self.node_index(id) else { return vec![] };
        self.edges.iter().filter(|e| e.src == i && e.relation == Relation::HasConcept).map(|e| self.nodes[e.dst].id.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.edges {
            if e.src >= self.nodes.len() || e.dst >= self.nodes.len() {
                return Err(Error::Format("edge references a missing node".into()));
            }
        }
        for t in NodeType::ALL {
            let w = self.feature_width(t);
            if self.nodes.iter().any(|n| n.node_type == t && Some(n.features.len()) != w) {
                return dim_err(format!("{} nodes have mixed feature widths", t.as_str()));
            }
        }
        Ok(())
    }

    /// Write `<stem>.bin` (features), `<stem>.nodes.tsv` and `<stem>.edges.tsv`.
    pub fn save(&self, bin: &Path, config: serde_json::Value) -> Result<()> {
        let g = self.canonical();
        let mut arrays = ParamSet::new();
        for t in NodeType::ALL {
            let rows: Vec<&Node> = g.nodes.iter().filter(|n| n.node_type == t).collect();
            if let Some(first) = rows.first() {
                let w = first.features.len();
                let data = rows.iter().flat_map(|n| n.features.iter().copied()).collect();
                arrays.insert(format!("features.{}", t.as_str()), Tensor::from_vec(&[rows.len(), w], data)?);
            }
        }
        Checkpoint::new(config, arrays).save(bin)?;
        let mut nodes = String::from("index\tid\ttype\n");
        for (i, n) in g.nodes.iter().enumerate() {
            nodes.push_str(&format!("{i}\t{}\t{}\n", n.id, n.node_type.as_str()));
        }
        let mut edges = String::from("src\tdst\trelation\n");
        for e in &g.edges {
            edges.push_str(&format!("{}\t{}\t{}\n", g.nodes[e.src].id, g.nodes[e.dst].id, e.relation.as_str()));
        }
        fs::write(bin.with_extension("nodes.tsv"), nodes)?;
        fs::write(bin.with_extension("edges.tsv"), edges)?;
        Ok(())
    }

    pub fn load(bin: &Path) -> Result<(HeteroGraph, serde_json::Value)> {
        let ck = Checkpoint::load(bin)?;
        let read = |p: std::path::PathBuf| fs::read_to_string(&p).map_err(|e| Error::NotFound(format!("{}: {e}", p.display())));
        let nodes_tsv = read(bin.with_extension("nodes.tsv"))?;
        let mut g = HeteroGraph::new();
        let mut row_of = BTreeMap::new();
        for line in nodes_tsv.lines().skip(1) {
            let cols: Vec<&str> = line.split('\t').collect();
            let t = cols.get(2).and_then(|s| NodeType::parse(s)).ok_or_else(|| Error::Format(format!("bad node line {line:?}")))?;
            let r = row_of.entry(t).or_insert(0usize);
            let feats = ck.array(&format!("features.{}", t.as_str()))?;
            if *r >= feats.shape()[0] {
                return Err(Error::Format("node table longer than feature array".into()));
            }
            g.add_node(cols[1], t, feats.row(*r).to_vec())?;
            *r += 1;
        }
        for line in read(bin.with_extension("edges.tsv"))?.lines().skip(1) {
            let cols: Vec<&str> = line.split('\t').collect();
            let rel = cols.get(2).and_then(|s| Relation::parse(s)).ok_or_else(|| Error::Format(format!("bad edge line {line:?}")))?;
            g.add_edge(cols[0], cols[1], rel)?;
        }
        Ok((g, ck.config))
    }
}

/// Concept id, embedding and category.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptEmbedding {
    pub id: String,
    pub vector: Vec<f64>,
    pub category: ConceptCategory,
}

pub fn embed_catalog(catalog: &[Concept]) -> Result<Vec<ConceptEmbedding>> {
    catalog
        .iter()
        .map(|c| Ok(ConceptEmbedding { id: c.id.clone(), vector: pseudo_embed_text(&c.description)?, category: c.category }))
        .collect()
}

/// Patient and concept nodes plus `same_category` edges between concepts.
/// Patients in `train_ids` carry their latent; those in `unseen_ids` carry
/// zeros of the same width.
pub fn assemble_graph(
    train_ids: &[String],
    latents: &BTreeMap<String, Tensor>,
    concepts: &[ConceptEmbedding],
    unseen_ids: &[String],
) -> Result<HeteroGraph> {
    let mut g = HeteroGraph::new();
    let mut d = None;
    for id in train_ids {
        let z = latents.get(id).ok_or_else(|| Error::NotFound(format!("latent for training patient {id}")))?;
        d = Some(z.len());
        g.add_node(id.clone(), NodeType::TrainPatient, z.data().to_vec())?;
    }
    let d = d.or_else(|| latents.values().next().map(|z| z.len())).ok_or_else(|| Error::InvalidParam("no latents given".into()))?;
    for id in unseen_ids {
        g.add_node(id.clone(), NodeType::TestPatient, vec![0.0; d])?;
    }
    for c in concepts {
        if c.vector.len() != EMBED_DIM {
            return dim_err(format!("concept {} embedding has width {}", c.id, c.vector.len()));
        }
        g.add_node(c.id.clone(), NodeType::Concept, c.vector.clone())?;
    }
    for a in concepts {
        for b in concepts {
            if a.id != b.id && a.category == b.category {
                g.add_edge(&a.id, &b.id, Relation::SameCategory)?;
            }
        }
    }
    Ok(g.canonical())
}

/// Link every patient node to at most `top_m` concepts whose similarity to
/// one of its texts is at least `threshold`. A patient's similarity to a
/// concept is the best match over its texts. Patients with no qualifying
/// concept get a single edge to their best match.
pub fn link_patients(
    graph: &HeteroGraph,
    texts: &BTreeMap<String, Vec<String>>,
    concepts: &[ConceptEmbedding],
    top_m: usize,
    threshold: f64,
) -> Result<HeteroGraph> {
    if concepts.is_empty() {
        return param_err("cannot link patients: concept set is empty");
    }
    if top_m == 0 {
        return param_err("top_m must be positive");
    }
    let mut g = graph.clone();
    let patients: Vec<String> = g.nodes.iter().filter(|n| n.node_type != NodeType::Concept).map(|n| n.id.clone()).collect();
    for pid in patients {
        let descs = texts.get(&pid).filter(|d| !d.is_empty()).ok_or_else(|| Error::NotFound(format!("description texts for patient {pid}")))?;
        let embs = descs.iter().map(|t| pseudo_embed_text(t)).collect::<Result<Vec<_>>>()?;
        let mut scored: Vec<(f64, usize)> = concepts
            .iter()
            .enumerate()
            .map(|(ci, c)| (embs.iter().map(|e| cosine(e, &c.vector)).fold(f64::NEG_INFINITY, f64::max), ci))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut chosen: Vec<usize> = scored.iter().take_while(|(s, _)| *s >= threshold).take(top_m).map(|&(_, ci)| ci).collect();
        if chosen.is_empty() {
            chosen.push(scored[0].1);
        }
        for ci in chosen {
            g.add_edge(&pid, &concepts[ci].id, Relation::HasConcept)?;
            g.add_edge(&concepts[ci].id, &pid, Relation::ConceptOf)?;
        }
    }
    Ok(g.canonical())
}

/// Per-feature cut points turning EHR values into graded descriptions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextBinning {
    pub names: Vec<String>,
    /// Median, 70th and 85th percentile per feature.
    pub cuts: Vec<[f64; 3]>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl TextBinning {
    /// Fit cut points on a reference population; missing (`NaN`) entries
    /// are ignored.
    pub fn fit(names: &[String], rows: &[&[f64]]) -> Self {
        let cuts = (0..names.len())
            .map(|k| {
                let mut col: Vec<f64> = rows.iter().map(|r| r[k]).filter(|v| !v.is_nan()).collect();
                col.sort_by(f64::total_cmp);
                [quantile(&col, 0.5), quantile(&col, 0.7), quantile(&col, 0.85)]
            })
            .collect();
        TextBinning { names: names.to_vec(), cuts }
    }

    /// One `"<feature name> <level>"` text per above-median feature, most
    /// extreme level first. A patient with no such feature is described by
    /// the feature closest to its median.
    pub fn describe(&self, ehr: &[f64]) -> Vec<String> {
        let mut graded: Vec<(usize, usize)> = vec![];
        for (k, (&v, c)) in ehr.iter().zip(&self.cuts).enumerate() {
            if v.is_nan() || v <= c[0] {
                continue;
            }
            let level = if v > c[2] {
                0
            } else if v > c[1] {
                1
            } else {
                2
            };
            graded.push((level, k));
        }
        graded.sort();
        let mut out: Vec<String> = graded.iter().map(|&(l, k)| format!("{} {}", self.names[k], crate::cohort::LEVELS[l])).collect();
        if out.is_empty() {
            let best = ehr
                .iter()
                .zip(&self.cuts)
                .enumerate()
                .filter(|(_, (v, _))| !v.is_nan())
                .min_by(|a, b| (a.1 .1[0] - a.1 .0).total_cmp(&(b.1 .1[0] - b.1 .0)).then(a.0.cmp(&b.0)))
                .map(|(k, _)| k)
                .unwrap_or(0);
            out.push(format!("{} {}", self.names[best], crate::cohort::LEVELS[2]));
        }
        out
    }
}
