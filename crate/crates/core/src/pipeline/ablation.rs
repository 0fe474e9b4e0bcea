//! Replacement components for the ablation variants.

use std::rc::Rc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::error::{dim_err, param_err, Error, Result};
use crate::nn::{kaiming, Adam, ParamSet};
use crate::rng::rng_for;
use crate::tensor::{cosine, Tensor};

/// One-hidden-layer network `x → relu(x·W1 + b1)·W2 + b2`, optionally
/// squashed by a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub spec: FeedForwardSpec,
    pub params: ParamSet,
    pub loss_curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedForwardSpec {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub sigmoid: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl FeedForward {
    pub fn new(spec: FeedForwardSpec) -> Self {
        let mut rng = rng_for(spec.seed, "feed-forward");
        let mut params = ParamSet::new();
        params.insert("w1", kaiming(&[spec.inputs, spec.hidden], spec.inputs, &mut rng));
        params.insert("b1", Tensor::zeros(&[spec.hidden]));
        params.insert("w2", kaiming(&[spec.hidden, spec.outputs], spec.hidden, &mut rng).map(|v| 0.1 * v));
        params.insert("b2", Tensor::zeros(&[spec.outputs]));
        FeedForward { spec, params, loss_curve: vec![] }
    }

    /// Set the output bias so the untrained network predicts `mean`
    /// (passed through the inverse sigmoid when squashing).
    pub fn set_output_bias(&mut self, mean: &[f64]) {
        let b: Vec<f64> = mean
            .iter()
            .map(|&m| if self.spec.sigmoid { let m = m.clamp(1e-4, 1.0 - 1e-4); (m / (1.0 - m)).ln() } else { m })
            .collect();
        *self.params.get_mut("b2").expect("b2") = Tensor::vector(b);
    }

    /// Minimize mean squared error between outputs and `targets`.
    pub fn fit(mut self, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Self> {
        let s = self.spec.clone();
        if inputs.is_empty() || inputs.len() != targets.len() {
            return param_err(format!("{} inputs for {} targets", inputs.len(), targets.len()));
        }
        if inputs.iter().any(|x| x.len() != s.inputs) || targets.iter().any(|y| y.len() != s.outputs) {
            return dim_err("feed-forward input or target width mismatch");
        }
        let mut rng = rng_for(s.seed, "feed-forward-train");
        let mut opt = Adam::new(s.learning_rate);
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        for epoch in 0..s.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(s.batch_size.max(1)) {
                let x = Tensor::new(&[chunk.len(), s.inputs], chunk.iter().flat_map(|&i| inputs[i].iter().copied()).collect());
                let y = Tensor::new(&[chunk.len(), s.outputs], chunk.iter().flat_map(|&i| targets[i].iter().copied()).collect());
                let tape = Tape::new();
                let p = self.params.bind(&tape, true);
                let mut out = tape.constant(x).matmul(p["w1"]).add_row(p["b1"]).relu().matmul(p["w2"]).add_row(p["b2"]);
                if s.sigmoid {
                    out = out.sigmoid();
                }
                let loss = out.mse(Rc::new(y));
                if !loss.item().is_finite() {
                    return Err(Error::NonFinite { stage: "feed-forward training".into(), step: epoch });
                }
                total += loss.item() * chunk.len() as f64;
                let g = p.grads(&tape.backward(loss));
                opt.step(&mut self.params, &g);
            }
            self.loss_curve.push(total / inputs.len() as f64);
        }
        Ok(self)
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let mut out = tape.constant(Tensor::new(&[1, self.spec.inputs], x.to_vec())).matmul(p["w1"]).add_row(p["b1"]).relu().matmul(p["w2"]).add_row(p["b2"]);
        if self.spec.sigmoid {
            out = out.sigmoid();
        }
        out.value().data().to_vec()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(serde_json::json!({ "spec": self.spec, "loss_curve": self.loss_curve }), self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec: FeedForwardSpec = serde_json::from_value(ck.config["spec"].clone())?;
        let mut m = FeedForward::new(spec);
        m.params.assign(&ck.arrays)?;
        m.loss_curve = serde_json::from_value(ck.config["loss_curve"].clone()).unwrap_or_default();
        Ok(m)
    }
}

/// Principal-component codes of `rows` (one flattened volume per row):
/// projections onto the top `d` components, computed through the `n × n`
/// Gram matrix. Components beyond the rank get zero codes.
pub fn pca_codes(rows: &[&[f64]], d: usize) -> Result<Vec<Vec<f64>>> {
    let n = rows.len();
    if n < 2 {
        return param_err("PCA needs at least two rows");
    }
    let v = rows[0].len();
    let mean: Vec<f64> = (0..v).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let gram = DMatrix::from_fn(n, n, |i, j| centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum::<f64>());
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    // Code of row i on component c is sqrt(λ_c)·v_c[i].
    Ok((0..n)
        .map(|i| {
            (0..d)
                .map(|c| match order.get(c) {
                    Some(&k) if eig.eigenvalues[k] > 1e-9 => eig.eigenvalues[k].sqrt() * eig.eigenvectors[(i, k)],
                    _ => 0.0,
                })
                .collect()
        })
        .collect())
}

/// Index of the row in `bank` most cosine-similar to `query`, skipping
/// `exclude`; ties go to the lower index.
pub fn nearest_neighbor(query: &[f64], bank: &[Vec<f64>], exclude: Option<usize>) -> Option<usize> {
    bank.iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, b)| (cosine(query, b), i))
        .fold(None, |best: Option<(f64, usize)>, cur| match best {
            Some(b) if b.0 >= cur.0 => Some(b),
            _ => Some(cur),
        })
        .map(|(_, i)| i)
}
