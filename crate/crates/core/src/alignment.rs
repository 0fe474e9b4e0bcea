//! Moving graph embeddings into the decoder's latent space.
//!
//! 1. Whitening-coloring: `ũ = Σ_z^{1/2} Σ_u^{-1/2} (u − μ_u) + μ_z`.
//! 2. Skip compensation: the `K` training patients whose latents are most
//!    cosine-similar to `u` lend their encoder skips, weighted by clipped
//!    and normalized similarity.
//! 3. An adapter `A_θ` maps `ũ` to `z̃`; a linear head `C_φ` classifies
//!    `z̃`. Both are trained through the frozen decoder.

use std::rc::Rc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{decode_calls, decode_var, AEModel, SkipFeatureSet};
use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::cohort::Volume;
use crate::error::{dim_err, param_err, Error, Result};
use crate::loss::{softmax, SSIM_WINDOW};
use crate::nn::{glorot, uniform, Adam, Bound, ParamSet};
use crate::rng::rng_for;
use crate::tensor::{cosine, Tensor};

pub const WC_EPSILON: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WCStats {
    pub mu_u: Vec<f64>,
    pub mu_z: Vec<f64>,
    /// Row-major `d×d`.
    pub sigma_u: Vec<f64>,
    pub sigma_z: Vec<f64>,
    pub epsilon: f64,
    /// Fewer samples than `d/2` were available.
    pub ill_conditioned: bool,
    /// `Σ_z^{1/2} Σ_u^{-1/2}`, row-major.
    transform: Vec<f64>,
}

fn mean_cov(xs: &[&[f64]]) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (xs.len(), xs[0].len());
    let mut mu = vec![0.0; d];
    for x in xs {
        for (m, v) in mu.iter_mut().zip(x.iter()) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for x in xs {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (x[i] - mu[i]) * (x[j] - mu[j]);
            }
        }
    }
    (mu, cov / (n as f64 - 1.0))
}

/// `Σ^{power}` for `power = ±½`, eigenvalues clamped at `floor`.
fn sym_power(m: &DMatrix<f64>, power: f64, floor: f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|l| l.max(floor).powf(power));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn to_rows(m: &DMatrix<f64>) -> Vec<f64> {
    let d = m.nrows();
    (0..d * d).map(|k| m[(k / d, k % d)]).collect()
}

impl WCStats {
    /// Build from given moments; covariances are used as they are (no
    /// shrinkage added), with eigenvalues clamped at `epsilon`.
    pub fn from_moments(mu_u: Vec<f64>, sigma_u: &DMatrix<f64>, mu_z: Vec<f64>, sigma_z: &DMatrix<f64>, epsilon: f64) -> Result<Self> {
        let d = mu_u.len();
        if mu_z.len() != d || sigma_u.shape() != (d, d) || sigma_z.shape() != (d, d) {
            return dim_err("whitening-coloring moments have inconsistent sizes");
        }
        if !(epsilon > 0.0) {
            return param_err("whitening-coloring epsilon must be positive");
        }
        let t = sym_power(sigma_z, 0.5, epsilon) * sym_power(sigma_u, -0.5, epsilon);
        Ok(WCStats {
            mu_u,
            mu_z,
            sigma_u: to_rows(sigma_u),
            sigma_z: to_rows(sigma_z),
            epsilon,
            ill_conditioned: false,
            transform: to_rows(&t),
        })
    }

    pub fn dim(&self) -> usize {
        self.mu_u.len()
    }

    pub fn sigma_z_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.sigma_z)
    }

    pub fn transform(&self, u: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d).map(|i| self.mu_z[i] + (0..d).map(|j| self.transform[i * d + j] * (u[j] - self.mu_u[j])).sum::<f64>()).collect()
    }
}

/// Fit on paired populations of graph embeddings and latents. Both
/// covariances are unbiased estimates shrunk by `εI`.
pub fn fit_wc_stats(us: &[&[f64]], zs: &[&[f64]], epsilon: f64) -> Result<WCStats> {
    if us.len() < 2 || zs.len() < 2 {
        return param_err("whitening-coloring needs at least two samples per population");
    }
    let d = us[0].len();
    if us.iter().chain(zs).any(|x| x.len() != d) {
        return dim_err("whitening-coloring samples have inconsistent lengths");
    }
    let (mu_u, cu) = mean_cov(us);
    let (mu_z, cz) = mean_cov(zs);
    let eye = DMatrix::<f64>::identity(d, d) * epsilon;
    let mut s = WCStats::from_moments(mu_u, &(cu + &eye), mu_z, &(cz + &eye), epsilon)?;
    s.ill_conditioned = 2 * us.len().min(zs.len()) < d;
    Ok(s)
}

pub fn wc_transform(stats: &WCStats, u: &[f64]) -> Vec<f64> {
    stats.transform(u)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub id: String,
    pub z: Tensor,
    pub skips: SkipFeatureSet,
}

/// Latents and skips of scanned training patients, each pair from one
/// encoder call.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SkipBank {
    pub entries: Vec<BankEntry>,
}

impl SkipBank {
    pub fn build<'a>(ae: &AEModel, volumes: impl IntoIterator<Item = (&'a str, &'a Volume)>) -> Result<Self> {
        let entries = volumes
            .into_iter()
            .map(|(id, v)| {
                let (z, skips) = ae.encode(v)?;
                Ok(BankEntry { id: id.to_string(), z, skips })
            })
            .collect::<Result<_>>()?;
        Ok(SkipBank { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&BankEntry> {
        self.entries.iter().find(|e| e.id == id)
    }
}

/// Neighbour ids and their weights.
pub type NeighborReport = Vec<(String, f64)>;

/// Top-`k` neighbours of `u` by latent cosine, skipping `exclude`. Weights
/// are clipped at zero and normalized, falling back to uniform when every
/// clipped similarity is zero.
pub fn aggregate_skips(u: &[f64], bank: &SkipBank, k: usize, exclude: Option<&str>) -> Result<(SkipFeatureSet, NeighborReport)> {
    if k == 0 {
        return param_err("K must be at least 1");
    }
    let mut scored: Vec<(f64, usize)> =
        bank.entries.iter().enumerate().filter(|(_, e)| Some(e.id.as_str()) != exclude).map(|(i, e)| (cosine(u, e.z.data()), i)).collect();
    if scored.is_empty() {
        return param_err("skip bank is empty");
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    let clipped: Vec<f64> = scored.iter().map(|s| s.0.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    let weights: Vec<f64> = if total > 0.0 { clipped.iter().map(|c| c / total).collect() } else { vec![1.0 / scored.len() as f64; scored.len()] };
    let sets: Vec<&SkipFeatureSet> = scored.iter().map(|s| &bank.entries[s.1].skips).collect();
    let skips = if sets.len() == 1 { sets[0].clone() } else { SkipFeatureSet::weighted_sum(&sets, &weights) };
    let report = scored.iter().zip(&weights).map(|(s, &w)| (bank.entries[s.1].id.clone(), w)).collect();
    Ok((skips, report))
}

/// Decode an aligned latent with compensated skips through the frozen decoder.
pub fn synthesize(ae: &AEModel, z: &Tensor, skips: &SkipFeatureSet) -> Result<Volume> {
    if !ae.is_frozen() {
        return Err(Error::DecoderNotFrozen("synthesis"));
    }
    ae.decode(z, skips)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub lambda_cls: f64,
    pub lambda_tv: f64,
    pub k: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for JointConfig {
    fn default() -> Self {
        JointConfig { lambda_cls: 1.0, lambda_tv: 1e-4, k: 1, learning_rate: 1e-3, epochs: 12, batch_size: 8, seed: 0 }
    }
}

/// Adapter `d → 2d → d` and classifier `d → 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterModel {
    pub d: usize,
    params: ParamSet,
    pub loss_curve: Vec<f64>,
}

impl AdapterModel {
    /// The adapter starts as the identity (`relu(x) − relu(−x)`) plus small
    /// noise.
    pub fn new(d: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, "adapter-init");
        let mut w1 = uniform(&[d, 2 * d], 1e-3, &mut rng);
        let mut w2 = uniform(&[2 * d, d], 1e-3, &mut rng);
        for i in 0..d {
            w1.data_mut()[i * 2 * d + i] += 1.0;
            w1.data_mut()[i * 2 * d + d + i] -= 1.0;
            w2.data_mut()[i * d + i] += 1.0;
            w2.data_mut()[(d + i) * d + i] -= 1.0;
        }
        let mut params = ParamSet::new();
        params.insert("adapter.w1", w1);
        params.insert("adapter.b1", Tensor::zeros(&[2 * d]));
        params.insert("adapter.w2", w2);
        params.insert("adapter.b2", Tensor::zeros(&[d]));
        params.insert("cls.w", glorot(&[d, 2], d, 2, &mut rng));
        params.insert("cls.b", Tensor::zeros(&[2]));
        AdapterModel { d, params, loss_curve: vec![] }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn classifier_checksum(&self) -> String {
        let mut p = ParamSet::new();
        for (n, t) in self.params.iter().filter(|(n, _)| n.starts_with("cls.")) {
            p.insert(n, t.clone());
        }
        p.checksum()
    }

    /// `z̃ = A_θ(ũ)`.
    pub fn adapt(&self, u_tilde: &[f64]) -> Tensor {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let z = adapt_var(&p, tape.constant(Tensor::new(&[1, self.d], u_tilde.to_vec())));
        Tensor::vector(z.value().data().to_vec())
    }

    pub fn to_checkpoint(&self, wc: &WCStats, joint: &JointConfig) -> Checkpoint {
        let cfg = serde_json::json!({ "d": self.d, "wc": wc, "joint": joint, "loss_curve": self.loss_curve });
        Checkpoint::new(cfg, self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, WCStats, JointConfig)> {
        let d = ck.config["d"].as_u64().ok_or_else(|| Error::Format("adapter checkpoint lacks d".into()))? as usize;
        let mut m = AdapterModel::new(d, 0);
        m.params.assign(&ck.arrays)?;
        m.loss_curve = serde_json::from_value(ck.config["loss_curve"].clone()).unwrap_or_default();
        Ok((m, serde_json::from_value(ck.config["wc"].clone())?, serde_json::from_value(ck.config["joint"].clone())?))
    }
}

pub fn adapt_var<'t>(p: &Bound<'t>, u: Var<'t>) -> Var<'t> {
    u.matmul(p["adapter.w1"]).add_row(p["adapter.b1"]).relu().matmul(p["adapter.w2"]).add_row(p["adapter.b2"])
}

pub fn classify_var<'t>(p: &Bound<'t>, z: Var<'t>) -> Var<'t> {
    z.matmul(p["cls.w"]).add_row(p["cls.b"])
}

/// One joint-training example.
pub struct JointSample {
    pub id: String,
    /// Graph embedding `u`.
    pub u: Vec<f64>,
    pub volume: Rc<Tensor>,
    pub label: u8,
    /// Compensated skips (leave-self-out).
    pub skips: SkipFeatureSet,
}

impl JointSample {
    /// Retrieve leave-self-out skips for a training patient.
    pub fn new(id: &str, u: Vec<f64>, volume: &Volume, label: u8, bank: &SkipBank, k: usize) -> Result<Self> {
        let (skips, _) = aggregate_skips(&u, bank, k, Some(id))?;
        let s = volume.shape();
        Ok(JointSample { id: id.to_string(), u, volume: Rc::new(volume.clone().reshape(&[1, s[0], s[1], s[2]])?), label, skips })
    }
}

/// `L1 + (1 − SSIM) + λ_TV·TV + λ_cls·CE`, averaged over `batch`.
pub fn joint_loss<'t>(tape: &'t Tape, p: &Bound<'t>, dec: &Bound<'t>, ae: &AEModel, wc: &WCStats, batch: &[&JointSample], cfg: &JointConfig) -> Var<'t> {
    let mut total: Option<Var<'t>> = None;
    let d = wc.dim();
    for s in batch {
        let ut = tape.constant(Tensor::new(&[1, d], wc.transform(&s.u)));
        let z = adapt_var(p, ut);
        let skips: Vec<Var<'t>> = s.skips.levels.iter().map(|x| tape.constant(x.clone())).collect();
        let out = decode_var(&ae.config, dec, z, &skips);
        let mut l = out.l1(s.volume.clone()).add(out.ssim3d(s.volume.clone(), SSIM_WINDOW).scale(-1.0).add_scalar(1.0));
        if cfg.lambda_tv != 0.0 {
            l = l.add(out.tv3d().scale(cfg.lambda_tv));
        }
        let ce = classify_var(p, z).softmax_cross_entropy(Rc::new(vec![s.label as usize]));
        l = l.add(ce.scale(cfg.lambda_cls));
        total = Some(match total {
            Some(t) => t.add(l),
            None => l,
        });
    }
    total.expect("non-empty batch").scale(1.0 / batch.len() as f64)
}

/// Jointly train adapter and classifier through the frozen decoder.
pub fn train_joint(mut adapter: AdapterModel, ae: &AEModel, wc: &WCStats, samples: &[JointSample], cfg: &JointConfig) -> Result<AdapterModel> {
    if !ae.is_frozen() {
        return Err(Error::DecoderNotFrozen("adapter training"));
    }
    if samples.is_empty() {
        return param_err("adapter training needs samples");
    }
    if wc.dim() != adapter.d || ae.config.latent_dim != adapter.d {
        return dim_err("adapter, alignment and decoder widths differ");
    }
    let mut rng = rng_for(cfg.seed, "adapter-train");
    let mut opt = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch: Vec<&JointSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let tape = Tape::new();
            let p = adapter.params.bind(&tape, true);
            let dec = ae.params().bind(&tape, false);
            let loss = joint_loss(&tape, &p, &dec, ae, wc, &batch, cfg);
            let v = loss.item();
            if !v.is_finite() {
                return Err(Error::NonFinite { stage: "adapter training".into(), step });
            }
            epoch += v * batch.len() as f64;
            let g = p.grads(&tape.backward(loss));
            opt.step(&mut adapter.params, &g);
            step += 1;
        }
        adapter.loss_curve.push(epoch / samples.len() as f64);
    }
    Ok(adapter)
}

/// Class probabilities from `u` through alignment, adapter and classifier;
/// the decoder is never touched.
pub fn classify_latent(adapter: &AdapterModel, u: &[f64], wc: &WCStats) -> Vec<f64> {
    let before = decode_calls();
    let z = adapter.adapt(&wc.transform(u));
    let tape = Tape::new();
    let p = adapter.params.bind(&tape, false);
    let logits = classify_var(&p, tape.constant(Tensor::new(&[1, adapter.d], z.data().to_vec())));
    debug_assert_eq!(before, decode_calls());
    softmax(logits.value().data())
}
