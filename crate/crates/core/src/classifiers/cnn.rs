//! Small 3D CNN for volume classification.
//!
//! Training only accepts volumes tagged [`Provenance::Real`]; evaluation
//! through [`CnnModel::predict_synthetic`] only accepts
//! [`Provenance::Synthetic`]. The tags are checked at runtime.

use std::rc::Rc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::classifiers::logistic::check_labels;
use crate::cohort::Volume;
use crate::error::{dim_err, param_err, Error, Result};
use crate::loss::softmax;
use crate::nn::{kaiming, Adam, Bound, ParamSet};
use crate::rng::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Real,
    Synthetic,
}

#[derive(Clone, Debug)]
pub struct TaggedVolume {
    pub id: String,
    pub volume: Volume,
    pub provenance: Provenance,
}

impl TaggedVolume {
    pub fn real(id: impl Into<String>, volume: Volume) -> Self {
        TaggedVolume { id: id.into(), volume, provenance: Provenance::Real }
    }

    pub fn synthetic(id: impl Into<String>, volume: Volume) -> Self {
        TaggedVolume { id: id.into(), volume, provenance: Provenance::Synthetic }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    /// Output channels of the three conv-pool blocks.
    pub channels: [usize; 3],
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig { channels: [4, 8, 16], learning_rate: 3e-3, weight_decay: 1e-4, epochs: 15, batch_size: 8, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnModel {
    pub config: CnnConfig,
    pub params: ParamSet,
    pub loss_curve: Vec<f64>,
}

fn pooled_var<'t>(p: &Bound<'t>, cfg: &CnnConfig, x: Var<'t>) -> Var<'t> {
    let mut h = x;
    for k in 0..3 {
        h = h.conv3d(p[format!("conv{k}.w").as_str()], p[format!("conv{k}.b").as_str()], 1, 1).relu().avg_pool2();
    }
    h.global_avg_pool().reshape(&[1, cfg.channels[2]])
}

fn logits_var<'t>(p: &Bound<'t>, cfg: &CnnConfig, x: Var<'t>) -> Var<'t> {
    pooled_var(p, cfg, x).matmul(p["head.w"]).add_row(p["head.b"])
}

impl CnnModel {
    pub fn new(config: CnnConfig) -> Self {
        let mut rng = rng_for(config.seed, "cnn-init");
        let mut params = ParamSet::new();
        let mut cin = 1;
        for (k, &co) in config.channels.iter().enumerate() {
            params.insert(format!("conv{k}.w"), kaiming(&[co, cin, 3, 3, 3], cin * 27, &mut rng));
            params.insert(format!("conv{k}.b"), Tensor::zeros(&[co]));
            cin = co;
        }
        params.insert("head.w", kaiming(&[cin, 2], cin, &mut rng));
        params.insert("head.b", Tensor::zeros(&[2]));
        CnnModel { config, params, loss_curve: Vec::new() }
    }

    fn input(v: &Volume) -> Result<Tensor> {
        let s = v.shape();
        if s.len() != 3 || s.iter().any(|&n| n % 8 != 0 || n == 0) {
            return dim_err(format!("CNN needs a rank-3 volume with sides divisible by 8, got {s:?}"));
        }
        Tensor::from_vec(&[1, s[0], s[1], s[2]], v.data().to_vec())
    }

    /// Data-dependent head initialization: rescale the affine head so it
    /// sees pooled features with zero mean and unit variance over `inputs`.
    /// Disease signal occupies a small fraction of each volume, so raw pooled
    /// features differ between patients by far less than their scale.
    fn standardize_head(&mut self, inputs: &[Tensor]) {
        let c = self.config.channels[2];
        let feats: Vec<Vec<f64>> = inputs
            .iter()
            .map(|x| {
                let tape = Tape::new();
                let p = self.params.bind(&tape, false);
                pooled_var(&p, &self.config, tape.constant(x.clone())).value().data().to_vec()
            })
            .collect();
        let n = feats.len() as f64;
        let w = self.params.get("head.w").expect("head").clone();
        let mut w_new = w.clone();
        let mut bias = vec![0.0; 2];
        for ch in 0..c {
            let mean = feats.iter().map(|f| f[ch]).sum::<f64>() / n;
            let sd = (feats.iter().map(|f| (f[ch] - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-8);
            for j in 0..2 {
                w_new.data_mut()[ch * 2 + j] = w.data()[ch * 2 + j] / sd;
                bias[j] -= mean * w.data()[ch * 2 + j] / sd;
            }
        }
        *self.params.get_mut("head.w").expect("head") = w_new;
        *self.params.get_mut("head.b").expect("head") = Tensor::vector(bias);
    }

    /// Class probabilities `[p(CN), p(AD)]` for one volume, regardless of tag.
    pub fn probabilities(&self, v: &Volume) -> Result<Vec<f64>> {
        let x = Self::input(v)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        Ok(softmax(logits_var(&p, &self.config, tape.constant(x)).value().data()))
    }

    /// P(AD) for synthetic volumes only; a real volume here is a protocol error.
    pub fn predict_synthetic(&self, vols: &[TaggedVolume]) -> Result<Vec<f64>> {
        if let Some(v) = vols.iter().find(|v| v.provenance != Provenance::Synthetic) {
            return param_err(format!("CNN evaluation received real volume {}", v.id));
        }
        vols.iter().map(|v| Ok(self.probabilities(&v.volume)?[1])).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let cfg = serde_json::json!({ "config": self.config, "loss_curve": self.loss_curve });
        Checkpoint::new(cfg, self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: CnnConfig = serde_json::from_value(ck.config["config"].clone())?;
        let mut m = CnnModel::new(config);
        m.params.assign(&ck.arrays)?;
        m.loss_curve = serde_json::from_value(ck.config["loss_curve"].clone()).unwrap_or_default();
        Ok(m)
    }
}

pub fn train_cnn3d(vols: &[TaggedVolume], labels: &[u8], cfg: &CnnConfig) -> Result<CnnModel> {
    check_labels(labels)?;
    if vols.len() != labels.len() {
        return param_err(format!("{} volumes for {} labels", vols.len(), labels.len()));
    }
    if let Some(v) = vols.iter().find(|v| v.provenance != Provenance::Real) {
        return param_err(format!("CNN training received synthetic volume {}", v.id));
    }
    let inputs: Vec<Tensor> = vols.iter().map(|v| CnnModel::input(&v.volume)).collect::<Result<_>>()?;
    let mut model = CnnModel::new(cfg.clone());
    model.standardize_head(&inputs);
    let mut rng = rng_for(cfg.seed, "cnn-train");
    let mut opt = Adam::new(cfg.learning_rate).with_weight_decay(cfg.weight_decay);
    let mut order: Vec<usize> = (0..vols.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let tape = Tape::new();
            let p = model.params.bind(&tape, true);
            let mut logits: Option<Var> = None;
            for &i in chunk {
                let l = logits_var(&p, cfg, tape.constant(inputs[i].clone()));
                logits = Some(match logits {
                    Some(acc) => acc.concat0(l),
                    None => l,
                });
            }
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i] as usize).collect();
            let loss = logits.expect("non-empty batch").softmax_cross_entropy(Rc::new(y));
            if !loss.item().is_finite() {
                return Err(Error::NonFinite { stage: "CNN training".into(), step });
            }
            total += loss.item() * chunk.len() as f64;
            let g = p.grads(&tape.backward(loss));
            opt.step(&mut model.params, &g);
            step += 1;
        }
        model.loss_curve.push(total / vols.len() as f64);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_phantom, PhantomParams};
    use crate::metrics::classification_metrics;

    fn phantoms(n: usize) -> (Vec<TaggedVolume>, Vec<u8>) {
        let mut vols = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = (i % 2) as u8;
            let severity = if y == 1 { 0.75 + 0.2 * (i as f64 / n as f64) } else { 0.05 + 0.2 * (i as f64 / n as f64) };
            let v = generate_phantom(&PhantomParams { shape: [16, 16, 16], severity, noise_sigma: 0.0, seed: i as u64 }).unwrap();
            vols.push(TaggedVolume::real(format!("P{i}"), v));
            labels.push(y);
        }
        (vols, labels)
    }

    #[test]
    fn separable_phantoms_are_learned_reproducibly() {
        let (vols, labels) = phantoms(24);
        let cfg = CnnConfig { epochs: 30, batch_size: 4, learning_rate: 3e-3, ..CnnConfig::default() };
        let m = train_cnn3d(&vols, &labels, &cfg).unwrap();
        let probs: Vec<f64> = vols.iter().map(|v| m.probabilities(&v.volume).unwrap()).map(|p| {
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
            p[1]
        }).collect();
        let bacc = classification_metrics(&probs, &labels, 0.5).unwrap().bacc;
        assert!(bacc >= 0.95, "train BAcc {bacc}");
        let again = train_cnn3d(&vols, &labels, &cfg).unwrap();
        assert_eq!(m.loss_curve.last(), again.loss_curve.last());
    }

    #[test]
    fn provenance_tags_are_enforced() {
        let (mut vols, labels) = phantoms(4);
        let cfg = CnnConfig { epochs: 1, ..CnnConfig::default() };
        let m = train_cnn3d(&vols, &labels, &cfg).unwrap();
        assert!(m.predict_synthetic(&vols).is_err());
        vols[1].provenance = Provenance::Synthetic;
        assert!(train_cnn3d(&vols, &labels, &cfg).is_err());
        assert!(train_cnn3d(&vols[..2], &[1, 1], &cfg).is_err());
        let syn: Vec<TaggedVolume> = vols.iter().map(|v| TaggedVolume::synthetic(v.id.clone(), v.volume.clone())).collect();
        assert_eq!(m.predict_synthetic(&syn).unwrap().len(), 4);
    }
}
