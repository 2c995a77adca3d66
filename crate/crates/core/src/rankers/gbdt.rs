//! Gradient-boosted regression trees on logistic loss.
//!
//! Each stage fits a depth-limited tree to the (class-weighted) negative
//! gradients `w_i (y_i − p_i)` using variance-reduction splits, then sets
//! each leaf to the Newton step `Σ residual / (Σ w_i p_i (1 − p_i) + 1e-9)`
//! scaled by the learning rate.

use serde::{Deserialize, Serialize};

use super::mlp::sigmoid;
use super::{check_positive, class_weights, Model, Payload, RankError, RankerKind};
use crate::features::TrainingSet;

const BASE_CLAMP: f64 = 10.0;
const HESSIAN_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtParams {
    pub learning_rate: f64,
    pub n_estimators: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            n_estimators: 100,
            max_depth: 3,
            min_samples_leaf: 2,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<(), RankError> {
        check_positive("learning_rate", self.learning_rate)?;
        if self.min_samples_leaf == 0 {
            return Err(RankError::InvalidHyperparameter(
                "min_samples_leaf must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum Node {
    /// `x[feature] <= threshold` goes left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    pub fn root_split(&self) -> Option<(usize, f64)> {
        match self.nodes.first()? {
            Node::Split {
                feature, threshold, ..
            } => Some((*feature, *threshold)),
            Node::Leaf { .. } => None,
        }
    }
}

/// Base log-odds plus shrunken trees. Leaf values already include the
/// learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub base: f64,
    pub trees: Vec<Tree>,
}

impl Ensemble {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.base + self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }
}

/// Stable `log(1 + e^z) − y z`.
fn logloss(z: f64, y: bool) -> f64 {
    let softplus = if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    };
    softplus - if y { z } else { 0.0 }
}

pub(crate) fn weighted_logloss(scores: &[f64], labels: &[bool], weights: &[f64]) -> f64 {
    let num: f64 = scores
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((&z, &y), &w)| w * logloss(z, y))
        .sum();
    num / weights.iter().sum::<f64>()
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

struct TreeBuilder<'a> {
    rows: &'a [f64],
    dim: usize,
    /// Per feature, example indices sorted by that feature's value.
    sorted: &'a [Vec<u32>],
    residual: &'a [f64],
    hessian: &'a [f64],
    params: &'a GbdtParams,
}

impl TreeBuilder<'_> {
    /// Level-wise exact split search over presorted columns.
    fn build(&self, learning_rate: f64) -> Tree {
        let n = self.residual.len();
        // Index into `nodes` of the frontier node each example belongs to,
        // usize::MAX once it reached a finished leaf.
        let mut node_of = vec![0usize; n];
        let mut nodes: Vec<Option<Node>> = vec![None];
        let mut frontier = vec![0usize];
        for depth in 0..=self.params.max_depth {
            if frontier.is_empty() {
                break;
            }
            let slot_of: std::collections::HashMap<usize, usize> = frontier
                .iter()
                .enumerate()
                .map(|(s, &node)| (node, s))
                .collect();
            let k = frontier.len();
            let mut count = vec![0usize; k];
            let mut sum = vec![0.0f64; k];
            let mut hess = vec![0.0f64; k];
            for i in 0..n {
                if let Some(&s) = slot_of.get(&node_of[i]) {
                    count[s] += 1;
                    sum[s] += self.residual[i];
                    hess[s] += self.hessian[i];
                }
            }
            let mut best: Vec<Option<Candidate>> = vec![None; k];
            let min_leaf = self.params.min_samples_leaf;
            if depth < self.params.max_depth {
                for f in 0..self.dim {
                    let mut lcount = vec![0usize; k];
                    let mut lsum = vec![0.0f64; k];
                    let mut last = vec![f64::NAN; k];
                    for &i in &self.sorted[f] {
                        let i = i as usize;
                        let Some(&s) = slot_of.get(&node_of[i]) else {
                            continue;
                        };
                        if count[s] < 2 * min_leaf {
                            continue;
                        }
                        let v = self.rows[i * self.dim + f];
                        if lcount[s] >= min_leaf && count[s] - lcount[s] >= min_leaf && v > last[s]
                        {
                            let (nl, nr) = (lcount[s] as f64, (count[s] - lcount[s]) as f64);
                            let sl = lsum[s];
                            let sr = sum[s] - sl;
                            let gain =
                                sl * sl / nl + sr * sr / nr - sum[s] * sum[s] / count[s] as f64;
                            if gain > 0.0 && best[s].is_none_or(|b| gain > b.gain) {
                                let mut threshold = (last[s] + v) / 2.0;
                                if !threshold.is_finite() || threshold >= v {
                                    threshold = last[s];
                                }
                                best[s] = Some(Candidate {
                                    gain,
                                    feature: f,
                                    threshold,
                                });
                            }
                        }
                        lcount[s] += 1;
                        lsum[s] += self.residual[i];
                        last[s] = v;
                    }
                }
            }
            let mut next_frontier = Vec::new();
            let mut children: Vec<Option<(usize, usize, usize, f64)>> = vec![None; k];
            for (s, &node) in frontier.iter().enumerate() {
                match best[s] {
                    Some(c) => {
                        let (left, right) = (nodes.len(), nodes.len() + 1);
                        nodes.push(None);
                        nodes.push(None);
                        nodes[node] = Some(Node::Split {
                            feature: c.feature,
                            threshold: c.threshold,
                            left,
                            right,
                        });
                        children[s] = Some((left, right, c.feature, c.threshold));
                        next_frontier.extend([left, right]);
                    }
                    None => {
                        let value = learning_rate * sum[s] / (hess[s] + HESSIAN_EPS);
                        nodes[node] = Some(Node::Leaf { value });
                    }
                }
            }
            for i in 0..n {
                if let Some(&s) = slot_of.get(&node_of[i]) {
                    node_of[i] = match children[s] {
                        Some((l, r, f, t)) => {
                            if self.rows[i * self.dim + f] <= t {
                                l
                            } else {
                                r
                            }
                        }
                        None => usize::MAX,
                    };
                }
            }
            frontier = next_frontier;
        }
        Tree {
            nodes: nodes
                .into_iter()
                .map(|n| n.expect("every node resolved"))
                .collect(),
        }
    }
}

pub struct GbdtFit {
    pub ensemble: Ensemble,
    /// Weighted training logloss before any tree, then after each stage.
    pub loss_trace: Vec<f64>,
}

/// Boosts on raw rows; exposes the per-stage loss trace.
pub fn train_gbdt(rows: &[f64], labels: &[bool], dim: usize, hp: &GbdtParams) -> GbdtFit {
    let n = labels.len();
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let rate = pos / n as f64;
    let base = (rate / (1.0 - rate)).ln().clamp(-BASE_CLAMP, BASE_CLAMP);
    let weights = class_weights(labels);
    let sorted: Vec<Vec<u32>> = (0..dim)
        .map(|f| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| {
                rows[a as usize * dim + f]
                    .total_cmp(&rows[b as usize * dim + f])
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect();

    let mut scores = vec![base; n];
    let mut trees = Vec::with_capacity(hp.n_estimators);
    let mut loss_trace = vec![weighted_logloss(&scores, labels, &weights)];
    let mut residual = vec![0.0; n];
    let mut hessian = vec![0.0; n];
    for _ in 0..hp.n_estimators {
        for i in 0..n {
            let p = sigmoid(scores[i]);
            let y = labels[i] as u8 as f64;
            residual[i] = weights[i] * (y - p);
            hessian[i] = weights[i] * p * (1.0 - p);
        }
        let tree = TreeBuilder {
            rows,
            dim,
            sorted: &sorted,
            residual: &residual,
            hessian: &hessian,
            params: hp,
        }
        .build(hp.learning_rate);
        for (i, s) in scores.iter_mut().enumerate() {
            *s += tree.predict(&rows[i * dim..(i + 1) * dim]);
        }
        trees.push(tree);
        loss_trace.push(weighted_logloss(&scores, labels, &weights));
    }
    GbdtFit {
        ensemble: Ensemble { base, trees },
        loss_trace,
    }
}

pub fn fit_gbdt(ts: &TrainingSet, hp: &GbdtParams) -> Result<Model, RankError> {
    hp.validate()?;
    if ts.is_empty() {
        return Err(RankError::EmptyTrainingSet);
    }
    if ts.single_class {
        return Ok(Model::degenerate(RankerKind::Gbdt, ts.config));
    }
    let fit = train_gbdt(&ts.standardized_rows(), &ts.labels, ts.dim, hp);
    Ok(Model::learned(
        RankerKind::Gbdt,
        ts,
        Payload::Ensemble(fit.ensemble),
    ))
}
