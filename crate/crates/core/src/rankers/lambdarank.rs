//! LambdaRank on a feed-forward scorer with a linear output.
//!
//! Each cycle of the training window is one query. Pair gradients are the
//! RankNet logistic gradients scaled by the NDCG change of swapping the
//! pair, with binary relevance (failed = 1).

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Gradient, Mlp};
use super::{check_positive, Model, Payload, RankError, RankerKind};
use crate::features::TrainingSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrnParams {
    pub hidden: Vec<usize>,
    pub step: f64,
    pub epochs: usize,
    pub restarts: usize,
    pub sigma: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        Self {
            hidden: vec![32, 16],
            step: 0.005,
            epochs: 50,
            restarts: 10,
            sigma: 1.0,
        }
    }
}

impl LrnParams {
    pub fn validate(&self) -> Result<(), RankError> {
        check_positive("step", self.step)?;
        check_positive("sigma", self.sigma)?;
        if self.restarts == 0 || self.hidden.contains(&0) {
            return Err(RankError::InvalidHyperparameter(
                "restarts and hidden sizes must be positive".into(),
            ));
        }
        Ok(())
    }

    fn sizes(&self, input: usize) -> Vec<usize> {
        std::iter::once(input)
            .chain(self.hidden.iter().copied())
            .chain([1])
            .collect()
    }
}

/// A (relevant, irrelevant) pair inside one query with its frozen
/// `|ΔNDCG|` weight. Indices are relative to the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedPair {
    pub hi: usize,
    pub lo: usize,
    pub delta: f64,
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 2) as f64).log2()
}

/// 0-based rank of each item when sorted by score descending, ties by index.
fn ranks(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut rank = vec![0; scores.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    rank
}

fn ideal_dcg(n_relevant: usize) -> f64 {
    (0..n_relevant).map(discount).sum()
}

/// NDCG of the score order with binary gains; `None` without relevant items.
pub fn ndcg(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_rel = labels.iter().filter(|&&l| l).count();
    if n_rel == 0 {
        return None;
    }
    let rank = ranks(scores);
    let dcg: f64 = labels
        .iter()
        .zip(&rank)
        .filter(|(&l, _)| l)
        .map(|(_, &r)| discount(r))
        .sum();
    Some(dcg / ideal_dcg(n_rel))
}

/// All (failed, passed) pairs of a query weighted by the NDCG change of
/// swapping them under the current scores.
pub fn weighted_pairs(scores: &[f64], labels: &[bool]) -> Vec<WeightedPair> {
    let n_rel = labels.iter().filter(|&&l| l).count();
    if n_rel == 0 || n_rel == labels.len() {
        return Vec::new();
    }
    let idcg = ideal_dcg(n_rel);
    let rank = ranks(scores);
    let mut pairs = Vec::with_capacity(n_rel * (labels.len() - n_rel));
    for hi in (0..labels.len()).filter(|&i| labels[i]) {
        for lo in (0..labels.len()).filter(|&j| !labels[j]) {
            let delta = (discount(rank[hi]) - discount(rank[lo])).abs() / idcg;
            pairs.push(WeightedPair { hi, lo, delta });
        }
    }
    pairs
}

/// `Σ_pairs |ΔNDCG| log(1 + exp(−σ (s_hi − s_lo)))` with the weights held
/// fixed; its score gradient is the lambda vector.
pub fn pair_cost(scores: &[f64], pairs: &[WeightedPair], sigma: f64) -> f64 {
    pairs
        .iter()
        .map(|p| {
            let z = -sigma * (scores[p.hi] - scores[p.lo]);
            let softplus = if z > 0.0 {
                z + (-z).exp().ln_1p()
            } else {
                z.exp().ln_1p()
            };
            p.delta * softplus
        })
        .sum()
}

/// Lambdas `∂C/∂s` for one query.
pub fn lambdas(scores: &[f64], pairs: &[WeightedPair], sigma: f64) -> Vec<f64> {
    let mut out = vec![0.0; scores.len()];
    for p in pairs {
        let lambda = -sigma * p.delta / (1.0 + (sigma * (scores[p.hi] - scores[p.lo])).exp());
        out[p.hi] += lambda;
        out[p.lo] -= lambda;
    }
    out
}

/// Scores of the rows in `range` of a row-major matrix.
pub fn query_scores(net: &Mlp, rows: &[f64], range: Range<usize>) -> Vec<f64> {
    let dim = net.input_dim();
    let n = range.len();
    net.forward_batch(&rows[range.start * dim..range.end * dim], n)
        .outputs()
        .to_vec()
}

/// Parameter gradient of [`pair_cost`] for one query, with the pair
/// weights taken at the current scores.
pub fn query_gradient(
    net: &Mlp,
    rows: &[f64],
    labels: &[bool],
    range: Range<usize>,
    sigma: f64,
) -> (Vec<WeightedPair>, Gradient) {
    let dim = net.input_dim();
    let n = range.len();
    let tape = net.forward_batch(&rows[range.start * dim..range.end * dim], n);
    let scores = tape.outputs();
    let pairs = weighted_pairs(scores, &labels[range.clone()]);
    let dout = lambdas(scores, &pairs, sigma);
    (pairs, net.backward(&tape, &dout))
}

fn rankable(labels: &[bool], groups: &[(u64, Range<usize>)]) -> Vec<Range<usize>> {
    groups
        .iter()
        .map(|(_, r)| r.clone())
        .filter(|r| {
            let g = &labels[r.clone()];
            g.iter().any(|&l| l) && g.iter().any(|&l| !l)
        })
        .collect()
}

fn mean_ndcg(net: &Mlp, rows: &[f64], labels: &[bool], queries: &[Range<usize>]) -> f64 {
    let total: f64 = queries
        .iter()
        .map(|r| ndcg(&query_scores(net, rows, r.clone()), &labels[r.clone()]).unwrap_or(0.0))
        .sum();
    total / queries.len() as f64
}

pub(crate) struct LrnFit {
    pub net: Mlp,
    pub ndcg: f64,
}

pub(crate) fn train_lambdarank(
    rows: &[f64],
    labels: &[bool],
    groups: &[(u64, Range<usize>)],
    dim: usize,
    hp: &LrnParams,
    seed: u64,
) -> Result<LrnFit, RankError> {
    let queries = rankable(labels, groups);
    if queries.is_empty() {
        return Err(RankError::NoRankableGroup);
    }
    let sizes = hp.sizes(dim);
    let mut best: Option<LrnFit> = None;
    for restart in 0..hp.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(restart as u64));
        let mut net = Mlp::new(&sizes, Activation::Relu, Activation::Identity, &mut rng);
        let mut order: Vec<usize> = (0..queries.len()).collect();
        for _ in 0..hp.epochs {
            order.shuffle(&mut rng);
            for &q in &order {
                let (_, grad) = query_gradient(&net, rows, labels, queries[q].clone(), hp.sigma);
                net.descend(&grad, hp.step);
            }
        }
        let score = mean_ndcg(&net, rows, labels, &queries);
        if best.as_ref().is_none_or(|b| score > b.ndcg) {
            best = Some(LrnFit { net, ndcg: score });
        }
    }
    Ok(best.expect("at least one restart"))
}

pub fn fit_lambdarank(ts: &TrainingSet, hp: &LrnParams, seed: u64) -> Result<Model, RankError> {
    hp.validate()?;
    if ts.is_empty() {
        return Err(RankError::EmptyTrainingSet);
    }
    let fit = train_lambdarank(
        &ts.standardized_rows(),
        &ts.labels,
        &ts.groups,
        ts.dim,
        hp,
        seed,
    )?;
    Ok(Model::learned(
        RankerKind::Lrn,
        ts,
        Payload::Network(fit.net),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg(&[3.0, 2.0, 1.0], &[true, false, false]), Some(1.0));
        let v = ndcg(&[1.0, 2.0, 3.0], &[true, false, false]).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        assert_eq!(ndcg(&[1.0], &[false]), None);
    }

    #[test]
    fn swap_delta_matches_ndcg_difference() {
        let scores = [0.4, 2.0, -1.0, 0.9, 0.0];
        let labels = [true, false, true, false, false];
        let base = ndcg(&scores, &labels).unwrap();
        for p in weighted_pairs(&scores, &labels) {
            let mut swapped = scores;
            swapped.swap(p.hi, p.lo);
            let after = ndcg(&swapped, &labels).unwrap();
            assert!((p.delta - (after - base).abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_pushes_relevant_up() {
        let scores = [0.0, 1.0];
        let labels = [true, false];
        let pairs = weighted_pairs(&scores, &labels);
        let l = lambdas(&scores, &pairs, 1.0);
        // Descending along ∂C/∂s raises the relevant score.
        assert!(l[0] < 0.0 && l[1] > 0.0);
        assert_eq!(l[0], -l[1]);
    }

    #[test]
    fn lambdas_match_cost_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rng.gen_range(2..12);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
            labels[0] = true;
            labels[1] = false;
            let pairs = weighted_pairs(&scores, &labels);
            let l = lambdas(&scores, &pairs, 1.3);
            for i in 0..n {
                let mut up = scores.clone();
                let mut down = scores.clone();
                up[i] += 1e-6;
                down[i] -= 1e-6;
                let fd = (pair_cost(&up, &pairs, 1.3) - pair_cost(&down, &pairs, 1.3)) / 2e-6;
                assert!((fd - l[i]).abs() < 1e-6, "{fd} vs {}", l[i]);
            }
        }
    }

    #[test]
    fn single_failure_ranked_first() {
        // 20 queries of 6 tests; the failing test has the largest first feature.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dim = 3;
        let (mut rows, mut labels, mut groups) = (Vec::new(), Vec::new(), Vec::new());
        for q in 0..20u64 {
            let start = labels.len();
            let hit = rng.gen_range(0..6);
            for i in 0..6 {
                let x0 = if i == hit {
                    rng.gen_range(1.0..2.0)
                } else {
                    rng.gen_range(-1.0..0.9)
                };
                rows.extend([x0, rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
                labels.push(i == hit);
            }
            groups.push((q, start..labels.len()));
        }
        let hp = LrnParams {
            restarts: 2,
            ..Default::default()
        };
        let fit = train_lambdarank(&rows, &labels, &groups, dim, &hp, 1).unwrap();
        for (_, r) in &groups {
            let s = query_scores(&fit.net, &rows, r.clone());
            let top = (0..s.len()).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
            assert!(labels[r.start + top]);
        }
        assert_eq!(fit.ndcg, 1.0);
    }

    #[test]
    fn no_rankable_group() {
        let ts = TrainingSet::from_rows(
            1,
            vec![1.0, 2.0, 3.0],
            vec![true, false, false],
            vec![(0, 0..1), (1, 1..3)],
            true,
        );
        assert_eq!(
            fit_lambdarank(&ts, &LrnParams::default(), 0).unwrap_err(),
            RankError::NoRankableGroup
        );
    }
}
