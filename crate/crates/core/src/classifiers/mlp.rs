//! Two-layer perceptron baseline: F → hidden → 2.

use std::rc::Rc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::classifiers::logistic::check_labels;
use crate::error::{Error, Result};
use crate::loss::softmax;
use crate::nn::{kaiming, Adam, ParamSet};
use crate::rng::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig { hidden: 64, learning_rate: 1e-3, weight_decay: 1e-3, epochs: 150, batch_size: 16, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub config: MlpConfig,
    pub params: ParamSet,
    pub loss_curve: Vec<f64>,
}

impl Mlp {
    pub fn new(inputs: usize, config: MlpConfig) -> Self {
        let mut rng = rng_for(config.seed, "mlp-init");
        let h = config.hidden;
        let mut params = ParamSet::new();
        params.insert("w1", kaiming(&[inputs, h], inputs, &mut rng));
        params.insert("b1", Tensor::zeros(&[h]));
        params.insert("w2", kaiming(&[h, 2], h, &mut rng).map(|v| v * 0.1));
        params.insert("b2", Tensor::zeros(&[2]));
        Mlp { config, params, loss_curve: Vec::new() }
    }

    pub fn fit(rows: &[Vec<f64>], labels: &[u8], cfg: &MlpConfig) -> Result<Self> {
        check_labels(labels)?;
        let f = rows[0].len();
        let mut m = Mlp::new(f, cfg.clone());
        let mut rng = rng_for(cfg.seed, "mlp-train");
        let mut opt = Adam::new(cfg.learning_rate).with_weight_decay(cfg.weight_decay);
        let mut order: Vec<usize> = (0..rows.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let x = Tensor::new(&[chunk.len(), f], chunk.iter().flat_map(|&i| rows[i].iter().copied()).collect());
                let y: Vec<usize> = chunk.iter().map(|&i| labels[i] as usize).collect();
                let tape = Tape::new();
                let p = m.params.bind(&tape, true);
                let loss = tape
                    .constant(x)
                    .matmul(p["w1"])
                    .add_row(p["b1"])
                    .relu()
                    .matmul(p["w2"])
                    .add_row(p["b2"])
                    .softmax_cross_entropy(Rc::new(y));
                if !loss.item().is_finite() {
                    return Err(Error::NonFinite { stage: "MLP training".into(), step: epoch });
                }
                total += loss.item() * chunk.len() as f64;
                let g = p.grads(&tape.backward(loss));
                opt.step(&mut m.params, &g);
            }
            m.loss_curve.push(total / rows.len() as f64);
        }
        Ok(m)
    }

    fn param(&self, name: &str) -> &Tensor {
        self.params.get(name).expect("MLP parameter")
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let (w1, b1, w2, b2) = (self.param("w1"), self.param("b1"), self.param("w2"), self.param("b2"));
        let h = self.config.hidden;
        let hidden: Vec<f64> = (0..h).map(|j| (b1.data()[j] + x.iter().enumerate().map(|(i, v)| v * w1.data()[i * h + j]).sum::<f64>()).max(0.0)).collect();
        let logits: Vec<f64> = (0..2).map(|c| b2.data()[c] + hidden.iter().enumerate().map(|(j, v)| v * w2.data()[j * 2 + c]).sum::<f64>()).collect();
        softmax(&logits)[1]
    }
}
