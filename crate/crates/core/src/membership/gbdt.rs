//! Gradient-boosted regression trees for binary classification.
//!
//! Logistic loss, Newton leaf values `-G / (H + l2)`, exact greedy splits.
//! Trees are complete binary trees of fixed depth stored as flat arrays;
//! a node that found no useful split sends every sample left.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct BoostConfig {
    pub rounds: usize,
    pub depth: usize,
    pub shrinkage: f64,
    /// Fraction of rows drawn (without replacement) for each round.
    pub subsample: f64,
    pub l2: f64,
    pub min_child_hessian: f64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            rounds: 100,
            depth: 2,
            shrinkage: 0.1,
            subsample: 1.0,
            l2: 1.0,
            min_child_hessian: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    /// Split feature of each internal node, breadth-first.
    pub features: Vec<u32>,
    /// A sample goes left iff `x[feature] < threshold`.
    pub thresholds: Vec<f64>,
    pub leaves: Vec<f64>,
}

impl Tree {
    pub fn depth(&self) -> usize {
        self.leaves.len().trailing_zeros() as usize
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = 0;
        while node < self.features.len() {
            let go_left = x[self.features[node] as usize] < self.thresholds[node];
            node = 2 * node + if go_left { 1 } else { 2 };
        }
        self.leaves[node - self.features.len()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gbdt {
    pub base_score: f64,
    pub shrinkage: f64,
    pub feature_dim: usize,
    pub trees: Vec<Tree>,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Gbdt {
    /// Raw additive score F(x).
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.base_score + self.trees.iter().map(|t| self.shrinkage * t.predict(x)).sum::<f64>()
    }

    /// σ(F(x)), the probability of the positive class.
    pub fn score(&self, x: &[f64]) -> f64 {
        sigmoid(self.margin(x))
    }

    pub fn fit(x: &[Vec<f64>], y: &[bool], config: &BoostConfig, seed: u64) -> Result<Gbdt> {
        if x.is_empty() {
            return Err(Error::Empty("boosting input"));
        }
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: y.len(),
            });
        }
        let dim = x[0].len();
        if dim == 0 || x.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("feature rows must share a positive length"));
        }
        if x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("boosting features"));
        }
        let pos = y.iter().filter(|&&b| b).count();
        if pos == 0 || pos == y.len() {
            return Err(Error::invalid("boosting needs both classes"));
        }
        if config.depth == 0 || config.depth > 16 || !(config.subsample > 0.0 && config.subsample <= 1.0) {
            return Err(Error::invalid("invalid boosting configuration"));
        }
        let n = x.len();
        let base_score = (pos as f64 / (n - pos) as f64).ln();
        let mut model = Gbdt {
            base_score,
            shrinkage: config.shrinkage,
            feature_dim: dim,
            trees: Vec::with_capacity(config.rounds),
        };
        let mut margin = vec![base_score; n];
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        let mut rng = rng::seeded(rng::derive_seed(seed, "boost"));
        let all: Vec<usize> = (0..n).collect();
        for _ in 0..config.rounds {
            for i in 0..n {
                let p = sigmoid(margin[i]);
                grad[i] = p - if y[i] { 1.0 } else { 0.0 };
                hess[i] = (p * (1.0 - p)).max(1e-16);
            }
            let rows = if config.subsample < 1.0 {
                let k = ((config.subsample * n as f64).ceil() as usize).clamp(1, n);
                rng::sample_sorted(&all, k, &mut rng)
            } else {
                // keep the stream position independent of the subsample setting
                let _ = rng.random::<u64>();
                all.clone()
            };
            let tree = grow_tree(x, &grad, &hess, rows, config);
            for i in 0..n {
                margin[i] += config.shrinkage * tree.predict(&x[i]);
            }
            model.trees.push(tree);
        }
        Ok(model)
    }
}

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
}

fn leaf_weight(g: f64, h: f64, l2: f64) -> f64 {
    -g / (h + l2)
}

fn best_split(x: &[Vec<f64>], grad: &[f64], hess: &[f64], rows: &[usize], config: &BoostConfig) -> Option<Split> {
    let g_total: f64 = rows.iter().map(|&i| grad[i]).sum();
    let h_total: f64 = rows.iter().map(|&i| hess[i]).sum();
    let parent = g_total * g_total / (h_total + config.l2);
    let mut best: Option<Split> = None;
    let mut order = rows.to_vec();
    for f in 0..x[0].len() {
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
        let (mut gl, mut hl) = (0.0, 0.0);
        for k in 0..order.len().saturating_sub(1) {
            let i = order[k];
            gl += grad[i];
            hl += hess[i];
            let (v, next) = (x[i][f], x[order[k + 1]][f]);
            if v == next {
                continue;
            }
            let (gr, hr) = (g_total - gl, h_total - hl);
            if hl < config.min_child_hessian || hr < config.min_child_hessian {
                continue;
            }
            let gain = gl * gl / (hl + config.l2) + gr * gr / (hr + config.l2) - parent;
            if gain > 1e-12 && best.as_ref().is_none_or(|b| gain > b.gain) {
                best = Some(Split {
                    feature: f,
                    threshold: v + 0.5 * (next - v),
                    gain,
                });
            }
        }
    }
    best
}

fn grow_tree(x: &[Vec<f64>], grad: &[f64], hess: &[f64], rows: Vec<usize>, config: &BoostConfig) -> Tree {
    let internal = (1usize << config.depth) - 1;
    let mut features = vec![0u32; internal];
    let mut thresholds = vec![f64::INFINITY; internal];
    let mut level = vec![rows];
    for node_base in (0..config.depth).map(|d| (1usize << d) - 1) {
        let mut next = Vec::with_capacity(level.len() * 2);
        for (j, node_rows) in level.into_iter().enumerate() {
            let node = node_base + j;
            let (left, right) = match best_split(x, grad, hess, &node_rows, config) {
                Some(s) => {
                    features[node] = s.feature as u32;
                    thresholds[node] = s.threshold;
                    node_rows.into_iter().partition(|&i| x[i][s.feature] < s.threshold)
                }
                None => (node_rows, Vec::new()),
            };
            next.push(left);
            next.push(right);
        }
        level = next;
    }
    let leaves = level
        .iter()
        .map(|rows| {
            let g: f64 = rows.iter().map(|&i| grad[i]).sum();
            let h: f64 = rows.iter().map(|&i| hess[i]).sum();
            leaf_weight(g, h, config.l2)
        })
        .collect();
    Tree {
        features,
        thresholds,
        leaves,
    }
}
