//! Feed-forward classifier: ReLU hidden layers, sigmoid output, weighted
//! MSE, mini-batch gradient descent with restarts.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, Mlp};
use super::{check_positive, class_weights, Model, Payload, RankError, RankerKind};
use crate::features::TrainingSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnParams {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub step: f64,
    pub epochs: usize,
    pub restarts: usize,
}

impl Default for AnnParams {
    fn default() -> Self {
        Self {
            hidden: vec![32, 16],
            batch_size: 32,
            step: 0.01,
            epochs: 50,
            restarts: 10,
        }
    }
}

impl AnnParams {
    pub fn validate(&self) -> Result<(), RankError> {
        check_positive("step", self.step)?;
        if self.batch_size == 0 || self.restarts == 0 || self.hidden.contains(&0) {
            return Err(RankError::InvalidHyperparameter(
                "batch_size, restarts and hidden sizes must be positive".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn sizes(&self, input: usize) -> Vec<usize> {
        std::iter::once(input)
            .chain(self.hidden.iter().copied())
            .chain([1])
            .collect()
    }
}

/// Weighted squared error `Σ w_i (p_i − y_i)² / Σ w_i` and its gradient,
/// for the rows `idx` of a row-major matrix.
pub fn weighted_mse_gradient(
    net: &Mlp,
    rows: &[f64],
    targets: &[f64],
    weights: &[f64],
    idx: &[usize],
) -> (f64, super::mlp::Gradient) {
    let dim = net.input_dim();
    let mut xs = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        xs.extend_from_slice(&rows[i * dim..(i + 1) * dim]);
    }
    let tape = net.forward_batch(&xs, idx.len());
    let total_w: f64 = idx.iter().map(|&i| weights[i]).sum();
    let mut loss = 0.0;
    let dout: Vec<f64> = tape
        .outputs()
        .iter()
        .zip(idx)
        .map(|(&p, &i)| {
            let r = p - targets[i];
            loss += weights[i] * r * r;
            2.0 * weights[i] * r / total_w
        })
        .collect();
    (loss / total_w, net.backward(&tape, &dout))
}

fn weighted_mse(net: &Mlp, rows: &[f64], targets: &[f64], weights: &[f64]) -> f64 {
    let dim = net.input_dim();
    let (mut num, mut den) = (0.0, 0.0);
    for (i, x) in rows.chunks_exact(dim).enumerate() {
        let r = net.forward(x) - targets[i];
        num += weights[i] * r * r;
        den += weights[i];
    }
    num / den
}

pub(crate) struct AnnFit {
    pub net: Mlp,
    pub mse: f64,
}

pub(crate) fn train_ann(
    rows: &[f64],
    labels: &[bool],
    dim: usize,
    hp: &AnnParams,
    seed: u64,
) -> AnnFit {
    let targets: Vec<f64> = labels.iter().map(|&l| l as u8 as f64).collect();
    let weights = class_weights(labels);
    let sizes = hp.sizes(dim);
    let mut best: Option<AnnFit> = None;
    for restart in 0..hp.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(restart as u64));
        let mut net = Mlp::new(&sizes, Activation::Relu, Activation::Sigmoid, &mut rng);
        let mut order: Vec<usize> = (0..labels.len()).collect();
        for _ in 0..hp.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(hp.batch_size) {
                let (_, grad) = weighted_mse_gradient(&net, rows, &targets, &weights, batch);
                // Step on the batch sum of weight-normalized losses.
                net.descend(&grad, hp.step * batch.len() as f64);
            }
        }
        let mse = weighted_mse(&net, rows, &targets, &weights);
        let better = match &best {
            None => true,
            Some(b) => mse < b.mse || (b.mse.is_nan() && !mse.is_nan()),
        };
        if better {
            best = Some(AnnFit { net, mse });
        }
    }
    best.expect("at least one restart")
}

pub fn fit_ann(ts: &TrainingSet, hp: &AnnParams, seed: u64) -> Result<Model, RankError> {
    hp.validate()?;
    if ts.is_empty() {
        return Err(RankError::EmptyTrainingSet);
    }
    if ts.single_class {
        return Ok(Model::degenerate(RankerKind::Ann, ts.config));
    }
    let fit = train_ann(&ts.standardized_rows(), &ts.labels, ts.dim, hp, seed);
    Ok(Model::learned(
        RankerKind::Ann,
        ts,
        Payload::Network(fit.net),
    ))
}
