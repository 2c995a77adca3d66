//! Linear SVM trained by stochastic subgradient descent on class-weighted
//! hinge loss with an L2 penalty.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_positive, class_weights, Model, Payload, RankError, RankerKind};
use crate::features::TrainingSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmParams {
    pub lambda: f64,
    pub epochs: usize,
    /// Initial step; epoch `e` (1-based) uses `step / sqrt(e)`.
    pub step: f64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            epochs: 50,
            step: 0.01,
        }
    }
}

impl SvmParams {
    pub fn validate(&self) -> Result<(), RankError> {
        check_positive("step", self.step)?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(RankError::InvalidHyperparameter(
                "lambda must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

pub fn fit_svm(ts: &TrainingSet, hp: &SvmParams, seed: u64) -> Result<Model, RankError> {
    hp.validate()?;
    if ts.is_empty() {
        return Err(RankError::EmptyTrainingSet);
    }
    if ts.single_class {
        return Ok(Model::degenerate(RankerKind::Svm, ts.config));
    }
    let dim = ts.dim;
    let rows = ts.standardized_rows();
    let cost = class_weights(&ts.labels);
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..ts.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for epoch in 1..=hp.epochs {
        let eta = hp.step / (epoch as f64).sqrt();
        let shrink = 1.0 - eta * hp.lambda;
        order.shuffle(&mut rng);
        for &i in &order {
            let x = &rows[i * dim..(i + 1) * dim];
            let y = if ts.labels[i] { 1.0 } else { -1.0 };
            let margin = y * (b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>());
            w.iter_mut().for_each(|a| *a *= shrink);
            if margin < 1.0 {
                let g = eta * cost[i] * y;
                for (a, v) in w.iter_mut().zip(x) {
                    *a += g * v;
                }
                b += g;
            }
        }
    }
    Ok(Model::learned(
        RankerKind::Svm,
        ts,
        Payload::Linear {
            weights: w,
            bias: b,
        },
    ))
}
