//! Random forest of Gini-split CART trees.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::logistic::check_labels;
use crate::error::Result;
use crate::rng::{derive_seed, rng_for, Rng as SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    /// Features tried per split; `None` means `⌈√F⌉`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    pub min_samples_split: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig { trees: 50, max_depth: 6, max_features: None, bootstrap: true, min_samples_split: 2, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Tree {
    Leaf { p: f64 },
    Split { feature: usize, threshold: f64, left: Box<Tree>, right: Box<Tree> },
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Tree::Leaf { p } => *p,
            Tree::Split { feature, threshold, left, right } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct Builder<'a> {
    rows: &'a [Vec<f64>],
    labels: &'a [u8],
    cfg: &'a ForestConfig,
    mtry: usize,
}

impl Builder<'_> {
    fn build(&self, idx: &mut [usize], depth: usize, rng: &mut SeededRng) -> Tree {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| self.labels[i] == 1).count();
        let leaf = Tree::Leaf { p: pos as f64 / n as f64 };
        if depth >= self.cfg.max_depth || n < self.cfg.min_samples_split || pos == 0 || pos == n {
            return leaf;
        }
        let f = self.rows[0].len();
        let mut feats: Vec<usize> = (0..f).collect();
        feats.shuffle(rng);
        feats.truncate(self.mtry);
        feats.sort();
        let parent = gini(pos, n);
        let mut best: Option<(f64, usize, f64)> = None;
        for &k in &feats {
            idx.sort_by(|&a, &b| self.rows[a][k].total_cmp(&self.rows[b][k]).then(a.cmp(&b)));
            let mut left_pos = 0;
            for s in 1..n {
                left_pos += (self.labels[idx[s - 1]] == 1) as usize;
                let (a, b) = (self.rows[idx[s - 1]][k], self.rows[idx[s]][k]);
                if a == b {
                    continue;
                }
                let impurity = (s as f64 * gini(left_pos, s) + (n - s) as f64 * gini(pos - left_pos, n - s)) / n as f64;
                if impurity < parent - 1e-12 && best.is_none_or(|(bi, _, _)| impurity < bi) {
                    best = Some((impurity, k, 0.5 * (a + b)));
                }
            }
        }
        let Some((_, feature, threshold)) = best else { return leaf };
        let (mut l, mut r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.rows[i][feature] <= threshold);
        Tree::Split {
            feature,
            threshold,
            left: Box::new(self.build(&mut l, depth + 1, rng)),
            right: Box::new(self.build(&mut r, depth + 1, rng)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<Tree>,
}

impl RandomForest {
    pub fn fit(rows: &[Vec<f64>], labels: &[u8], cfg: &ForestConfig) -> Result<Self> {
        check_labels(labels)?;
        let f = rows[0].len();
        let mtry = cfg.max_features.unwrap_or_else(|| (f as f64).sqrt().ceil() as usize).clamp(1, f);
        let b = Builder { rows, labels, cfg, mtry };
        let trees = (0..cfg.trees)
            .map(|t| {
                // Per-tree seeds make each tree independent of build order.
                let mut rng = rng_for(derive_seed(cfg.seed, &format!("tree{t}")), "forest");
                let mut idx: Vec<usize> = if cfg.bootstrap { (0..rows.len()).map(|_| rng.random_range(0..rows.len())).collect() } else { (0..rows.len()).collect() };
                b.build(&mut idx, 0, &mut rng)
            })
            .collect();
        Ok(RandomForest { trees })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive search for the Gini-optimal single split on one feature.
    fn best_split_oracle(xs: &[f64], ys: &[u8]) -> f64 {
        let mut cands: Vec<f64> = xs.to_vec();
        cands.sort_by(f64::total_cmp);
        cands.dedup();
        let mut best = (f64::INFINITY, 0.0);
        for w in cands.windows(2) {
            let t = 0.5 * (w[0] + w[1]);
            let (mut ln, mut lp, mut rn, mut rp) = (0, 0, 0, 0);
            for (&x, &y) in xs.iter().zip(ys) {
                if x <= t {
                    ln += 1;
                    lp += y as usize;
                } else {
                    rn += 1;
                    rp += y as usize;
                }
            }
            let imp = (ln as f64 * gini(lp, ln) + rn as f64 * gini(rp, rn)) / xs.len() as f64;
            if imp < best.0 {
                best = (imp, t);
            }
        }
        best.1
    }

    #[test]
    fn single_stump_reproduces_the_threshold_split() {
        let xs = [0.1, 0.4, 0.35, 0.8, 0.9, 0.65, 0.2, 0.7];
        let ys = [0, 0, 0, 1, 1, 1, 0, 1];
        let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
        let cfg = ForestConfig { trees: 1, max_depth: 1, bootstrap: false, ..ForestConfig::default() };
        let rf = RandomForest::fit(&rows, &ys, &cfg).unwrap();
        match &rf.trees[0] {
            Tree::Split { feature, threshold, .. } => {
                assert_eq!(*feature, 0);
                assert_eq!(*threshold, best_split_oracle(&xs, &ys));
            }
            t => panic!("expected a split, got {t:?}"),
        }
        for (r, &y) in rows.iter().zip(&ys) {
            assert_eq!(rf.predict(r), y as f64);
        }
    }

    #[test]
    fn forest_is_deterministic_and_bounded() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 7) as f64, (i * 3 % 11) as f64, i as f64 / 40.0]).collect();
        let ys: Vec<u8> = (0..40).map(|i| (i >= 20) as u8).collect();
        let a = RandomForest::fit(&rows, &ys, &ForestConfig::default()).unwrap();
        let b = RandomForest::fit(&rows, &ys, &ForestConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&a.predict(r))));
    }
}
