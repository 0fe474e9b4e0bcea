//! 3D U-Net style autoencoder with a vector bottleneck.
//!
//! Encoder block `k` (1..=4) is a stride-2 3³ convolution from `C_{k−1}` to
//! `C_k = base·2^(k−1)` channels followed by ReLU; its output is skip `k`,
//! of spatial size `H/2^k`. The latent is an affine map of the flattened
//! level-4 activation, so it keeps coarse spatial layout.
//!
//! The decoder maps `z` affinely onto the level-4 grid, then for `k = 4..1`
//! concatenates skip `k`, mixes with a convolution and upsamples with a
//! kernel-2 transposed convolution. A final 1×1 convolution and a sigmoid
//! produce the volume.
//!
//! Training may decode a volume's latent with another volume's skips
//! ("skip swapping"), which keeps the decoder from ignoring `z`.

use std::cell::Cell;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::cohort::Volume;
use crate::error::{dim_err, param_err, Error, Result};
use crate::nn::{kaiming, Adam, Bound, ParamSet};
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub const LEVELS: usize = 4;

thread_local! {
    static DECODE_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of decoder evaluations on this thread so far.
pub fn decode_calls() -> u64 {
    DECODE_CALLS.with(|c| c.get())
}

fn count_decode() {
    DECODE_CALLS.with(|c| c.set(c.get() + 1));
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AEConfig {
    pub volume_shape: [usize; 3],
    pub latent_dim: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Probability of decoding with a different volume's skips in training.
    pub skip_swap: f64,
}

impl Default for AEConfig {
    fn default() -> Self {
        AEConfig {
            volume_shape: [32, 32, 32],
            latent_dim: 64,
            base_channels: 8,
            levels: LEVELS,
            learning_rate: 1e-3,
            epochs: 40,
            batch_size: 8,
            seed: 0,
            skip_swap: 0.5,
        }
    }
}

impl AEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 8 {
            return param_err(format!("latent_dim {} must be at least 8", self.latent_dim));
        }
        if self.levels != LEVELS {
            return param_err(format!("levels must be {LEVELS}, got {}", self.levels));
        }
        if self.base_channels == 0 {
            return param_err("base_channels must be positive");
        }
        if self.volume_shape.iter().any(|&s| s == 0 || s % (1 << LEVELS) != 0) {
            return dim_err(format!("volume shape {:?} not divisible by {}", self.volume_shape, 1 << LEVELS));
        }
        if !(0.0..=1.0).contains(&self.skip_swap) {
            return param_err("skip_swap must lie in [0, 1]");
        }
        Ok(())
    }

    /// Channels at level `k` (level 0 is the single-channel input).
    pub fn channels(&self, k: usize) -> usize {
        if k == 0 {
            1
        } else {
            self.base_channels << (k - 1)
        }
    }

    pub fn level_dims(&self, k: usize) -> [usize; 3] {
        self.volume_shape.map(|s| s >> k)
    }

    pub fn skip_shape(&self, k: usize) -> Vec<usize> {
        let d = self.level_dims(k);
        vec![self.channels(k), d[0], d[1], d[2]]
    }

    fn mix_kernel(k: usize) -> usize {
        if k >= 3 {
            3
        } else {
            1
        }
    }
}

/// Encoder activations at the four resolutions; level `k` (1-based) lives in
/// `levels[k − 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkipFeatureSet {
    pub levels: Vec<Tensor>,
}

impl SkipFeatureSet {
    pub fn level(&self, k: usize) -> &Tensor {
        &self.levels[k - 1]
    }

    /// Weighted sum of several skip sets.
    pub fn weighted_sum(sets: &[&SkipFeatureSet], weights: &[f64]) -> SkipFeatureSet {
        let levels = (0..LEVELS)
            .map(|k| {
                let mut acc = Tensor::zeros(sets[0].levels[k].shape());
                for (s, &w) in sets.iter().zip(weights) {
                    for (a, v) in acc.data_mut().iter_mut().zip(s.levels[k].data()) {
                        *a += w * v;
                    }
                }
                acc
            })
            .collect();
        SkipFeatureSet { levels }
    }
}

/// Fresh parameters. Names start with `enc.` or `dec.`.
pub fn init_params(cfg: &AEConfig) -> ParamSet {
    let mut rng = rng_for(cfg.seed, "ae-init");
    let mut p = ParamSet::new();
    for k in 1..=LEVELS {
        let (ci, co) = (cfg.channels(k - 1), cfg.channels(k));
        p.insert(format!("enc.{k}.w"), kaiming(&[co, ci, 3, 3, 3], ci * 27, &mut rng));
        p.insert(format!("enc.{k}.b"), Tensor::zeros(&[co]));
    }
    let c4 = cfg.channels(LEVELS);
    let d = cfg.latent_dim;
    let grid: usize = cfg.level_dims(LEVELS).iter().product();
    p.insert("enc.fc.w", kaiming(&[c4 * grid, d], c4 * grid, &mut rng));
    p.insert("enc.fc.b", Tensor::zeros(&[d]));
    p.insert("dec.fc.w", kaiming(&[d, c4 * grid], d, &mut rng));
    p.insert("dec.fc.b", Tensor::zeros(&[c4 * grid]));
    for k in (1..=LEVELS).rev() {
        let c = cfg.channels(k);
        let ks = AEConfig::mix_kernel(k);
        p.insert(format!("dec.{k}.w"), kaiming(&[c, 2 * c, ks, ks, ks], 2 * c * ks * ks * ks, &mut rng));
        p.insert(format!("dec.{k}.b"), Tensor::zeros(&[c]));
        let up = if k == 1 { cfg.base_channels } else { cfg.channels(k - 1) };
        p.insert(format!("dec.{k}.up.w"), kaiming(&[c, up, 2, 2, 2], c, &mut rng));
        p.insert(format!("dec.{k}.up.b"), Tensor::zeros(&[up]));
    }
    p.insert("dec.out.w", kaiming(&[1, cfg.base_channels, 1, 1, 1], cfg.base_channels, &mut rng));
    p.insert("dec.out.b", Tensor::zeros(&[1]));
    p
}

/// Encoder on a tape: `x` is `[1,H,W,D]`; returns `z` as `[1,d]` and the skips.
pub fn encode_var<'t>(p: &Bound<'t>, x: Var<'t>) -> (Var<'t>, Vec<Var<'t>>) {
    let mut h = x;
    let mut skips = Vec::with_capacity(LEVELS);
    for k in 1..=LEVELS {
        h = h.conv3d(p[&*format!("enc.{k}.w")], p[&*format!("enc.{k}.b")], 2, 1).relu();
        skips.push(h);
    }
    let n = h.shape().iter().product::<usize>();
    let z = h.reshape(&[1, n]).matmul(p["enc.fc.w"]).add_row(p["enc.fc.b"]);
    (z, skips)
}

/// Decoder on a tape: `z` is `[1,d]`; returns `[1,H,W,D]`.
pub fn decode_var<'t>(cfg: &AEConfig, p: &Bound<'t>, z: Var<'t>, skips: &[Var<'t>]) -> Var<'t> {
    count_decode();
    let mut h = z.matmul(p["dec.fc.w"]).add_row(p["dec.fc.b"]).relu().reshape(&cfg.skip_shape(LEVELS));
    for k in (1..=LEVELS).rev() {
        let ks = AEConfig::mix_kernel(k);
        h = h.concat0(skips[k - 1]).conv3d(p[&*format!("dec.{k}.w")], p[&*format!("dec.{k}.b")], 1, ks / 2).relu();
        h = h.conv_transpose_up2(p[&*format!("dec.{k}.up.w")], p[&*format!("dec.{k}.up.b")]).relu();
    }
    h.conv3d(p["dec.out.w"], p["dec.out.b"], 1, 0).sigmoid()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AEModel {
    pub config: AEConfig,
    params: ParamSet,
    frozen: bool,
    /// Mean training MSE per epoch.
    pub loss_curve: Vec<f64>,
}

impl AEModel {
    pub fn new(config: AEConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config);
        Ok(AEModel { config, params, frozen: false, loss_curve: vec![] })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Mark the decoder immutable. Idempotent.
    pub fn freeze_decoder(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Decoder parameters under their full `dec.` names.
    pub fn decoder_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        for (n, t) in self.params.iter().filter(|(n, _)| n.starts_with("dec.")) {
            p.insert(n, t.clone());
        }
        p
    }

    pub fn decoder_checksum(&self) -> String {
        self.decoder_params().checksum()
    }

    /// Apply an update to the decoder; refused once frozen.
    pub fn update_decoder(&mut self, f: impl FnOnce(&mut ParamSet)) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenDecoder);
        }
        let mut dec = self.decoder_params();
        f(&mut dec);
        for (n, t) in dec.iter() {
            if let Some(slot) = self.params.get_mut(n) {
                *slot = t.clone();
            }
        }
        Ok(())
    }

    fn check_volume(&self, x: &Volume) -> Result<()> {
        if x.shape() != self.config.volume_shape {
            return dim_err(format!("volume shape {:?} does not match model shape {:?}", x.shape(), self.config.volume_shape));
        }
        Ok(())
    }

    pub fn check_skips(&self, s: &SkipFeatureSet) -> Result<()> {
        if s.levels.len() != LEVELS {
            return dim_err(format!("expected {LEVELS} skip levels, got {}", s.levels.len()));
        }
        for k in 1..=LEVELS {
            if s.level(k).shape() != self.config.skip_shape(k) {
                return dim_err(format!("skip level {k} has shape {:?}, expected {:?}", s.level(k).shape(), self.config.skip_shape(k)));
            }
        }
        Ok(())
    }

    pub fn encode(&self, x: &Volume) -> Result<(Tensor, SkipFeatureSet)> {
        self.check_volume(x)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let xv = tape.constant(x.clone().reshape(&[1, x.shape()[0], x.shape()[1], x.shape()[2]])?);
        let (z, skips) = encode_var(&p, xv);
        let z = (*z.value()).clone().reshape(&[self.config.latent_dim])?;
        Ok((z, SkipFeatureSet { levels: skips.iter().map(|s| (*s.value()).clone()).collect() }))
    }

    pub fn decode(&self, z: &Tensor, skips: &SkipFeatureSet) -> Result<Volume> {
        if z.len() != self.config.latent_dim {
            return dim_err(format!("latent of length {} for d = {}", z.len(), self.config.latent_dim));
        }
        self.check_skips(skips)?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let zv = tape.constant(z.clone().reshape(&[1, self.config.latent_dim])?);
        let sv: Vec<Var> = skips.levels.iter().map(|s| tape.constant(s.clone())).collect();
        let out = decode_var(&self.config, &p, zv, &sv);
        (*out.value()).clone().reshape(&self.config.volume_shape)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut cfg = serde_json::to_value(&self.config).expect("config serializes");
        cfg["frozen"] = serde_json::Value::Bool(self.frozen);
        cfg["loss_curve"] = serde_json::to_value(&self.loss_curve).expect("curve serializes");
        Checkpoint::new(cfg, self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: AEConfig = serde_json::from_value(ck.config.clone())?;
        let frozen = ck.config["frozen"].as_bool().unwrap_or(false);
        let loss_curve = serde_json::from_value(ck.config["loss_curve"].clone()).unwrap_or_default();
        let mut params = init_params(&config);
        params.assign(&ck.arrays)?;
        Ok(AEModel { config, params, frozen, loss_curve })
    }
}

fn as_batch(x: &Volume) -> Tensor {
    let s = x.shape();
    x.clone().reshape(&[1, s[0], s[1], s[2]]).expect("rank-3 volume")
}

/// Train on `volumes` with voxel MSE. Returns an unfrozen model.
pub fn train_ae(volumes: &[Volume], cfg: &AEConfig) -> Result<AEModel> {
    let mut model = AEModel::new(cfg.clone())?;
    // Start the output sigmoid at the mean intensity so early steps shape
    // structure instead of shifting brightness.
    if !volumes.is_empty() {
        let n: usize = volumes.iter().map(|v| v.len()).sum();
        let mean = volumes.iter().map(|v| v.sum()).sum::<f64>() / n as f64;
        let m = mean.clamp(1e-3, 1.0 - 1e-3);
        if let Some(b) = model.params.get_mut("dec.out.b") {
            b.data_mut()[0] = (m / (1.0 - m)).ln();
        }
    }
    train_ae_from(model, volumes, cfg.epochs)
}

/// Continue training `model` for `epochs` epochs.
pub fn train_ae_from(mut model: AEModel, volumes: &[Volume], epochs: usize) -> Result<AEModel> {
    if volumes.is_empty() {
        return param_err("autoencoder training needs at least one volume");
    }
    for v in volumes {
        model.check_volume(v)?;
    }
    if model.frozen {
        return Err(Error::FrozenDecoder);
    }
    let cfg = model.config.clone();
    let targets: Vec<Rc<Tensor>> = volumes.iter().map(|v| Rc::new(as_batch(v))).collect();
    let mut rng = rng_for(cfg.seed, "ae-train");
    let mut opt = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..volumes.len()).collect();
    let bs = cfg.batch_size.max(1);
    let mut step = 0;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(bs) {
            let tape = Tape::new();
            let p = model.params.bind(&tape, true);
            let mut total: Option<Var> = None;
            let mut recon = 0.0;
            for &i in batch {
                let x = tape.constant((*targets[i]).clone());
                let (z, mut skips) = encode_var(&p, x);
                if volumes.len() > 1 && rng.random::<f64>() < cfg.skip_swap {
                    let mut j = rng.random_range(0..volumes.len() - 1);
                    if j >= i {
                        j += 1;
                    }
                    skips = encode_var(&p, tape.constant((*targets[j]).clone())).1;
                }
                let out = decode_var(&cfg, &p, z, &skips);
                let l = out.mse(targets[i].clone());
                recon += l.item();
                let l = l.scale(1.0 / batch.len() as f64);
                total = Some(match total {
                    Some(t) => t.add(l),
                    None => l,
                });
            }
            let total = total.expect("non-empty batch");
            if !total.item().is_finite() {
                return Err(Error::NonFinite { stage: "train_ae".into(), step });
            }
            let grads = p.grads(&tape.backward(total));
            opt.step(&mut model.params, &grads);
            epoch_loss += recon;
            step += 1;
        }
        model.loss_curve.push(epoch_loss / volumes.len() as f64);
    }
    Ok(model)
}
