//! Prioritization strategies and the shared ranking order.
//!
//! Every strategy ends in [`rank_with_tie_break`]: higher score first, then
//! shorter duration, then smaller test id.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{HistoryWindow, TestIdx};
use crate::features::{
    FeatureConfig, FeatureError, FeatureTracker, FeatureVector, Standardization, TrainingSet,
};

pub mod ann;
pub mod gbdt;
pub mod lambdarank;
pub mod mlp;
pub mod random;
pub mod rocket;
pub mod svm;

pub use ann::{fit_ann, AnnParams};
pub use gbdt::{fit_gbdt, Ensemble, GbdtParams, Tree};
pub use lambdarank::{fit_lambdarank, LrnParams};
pub use mlp::{Activation, Mlp};
pub use random::random_rank;
pub use rocket::{rocket_priorities, rocket_rank, RocketParams};
pub use svm::{fit_svm, SvmParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RankError {
    #[error("score and duration maps have different keys")]
    KeyMismatch,
    #[error("cannot rank an empty test set")]
    EmptyTestSet,
    #[error("history window is empty")]
    EmptyWindow,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("no cycle in the training window contains both passing and failing tests")]
    NoRankableGroup,
    #[error("model expects {expected} features, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("{0} models rank from the history window, not from feature vectors")]
    ScoreUnsupported(RankerKind),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("unknown ranker {0:?}; valid kinds: random, rocket, svm, ann, gbdt, lrn")]
    UnknownKind(String),
    #[error("model serialization: {0}")]
    Serialization(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankerKind {
    Random,
    Rocket,
    Svm,
    Ann,
    Gbdt,
    Lrn,
}

impl RankerKind {
    pub const ALL: [RankerKind; 6] = [
        RankerKind::Random,
        RankerKind::Rocket,
        RankerKind::Svm,
        RankerKind::Ann,
        RankerKind::Gbdt,
        RankerKind::Lrn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RankerKind::Random => "random",
            RankerKind::Rocket => "rocket",
            RankerKind::Svm => "svm",
            RankerKind::Ann => "ann",
            RankerKind::Gbdt => "gbdt",
            RankerKind::Lrn => "lrn",
        }
    }

    pub fn history_dependent(self) -> bool {
        !matches!(self, RankerKind::Random)
    }

    /// Whether the strategy fits a model to a training set.
    pub fn is_learned(self) -> bool {
        matches!(
            self,
            RankerKind::Svm | RankerKind::Ann | RankerKind::Gbdt | RankerKind::Lrn
        )
    }
}

impl fmt::Display for RankerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RankerKind {
    type Err = RankError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| RankError::UnknownKind(s.to_owned()))
    }
}

/// A ranker kind together with its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RankerSpec {
    Random,
    Rocket(RocketParams),
    Svm(SvmParams),
    Ann(AnnParams),
    Gbdt(GbdtParams),
    Lrn(LrnParams),
}

impl RankerSpec {
    pub fn default_for(kind: RankerKind) -> Self {
        match kind {
            RankerKind::Random => RankerSpec::Random,
            RankerKind::Rocket => RankerSpec::Rocket(RocketParams::default()),
            RankerKind::Svm => RankerSpec::Svm(SvmParams::default()),
            RankerKind::Ann => RankerSpec::Ann(AnnParams::default()),
            RankerKind::Gbdt => RankerSpec::Gbdt(GbdtParams::default()),
            RankerKind::Lrn => RankerSpec::Lrn(LrnParams::default()),
        }
    }

    pub fn kind(&self) -> RankerKind {
        match self {
            RankerSpec::Random => RankerKind::Random,
            RankerSpec::Rocket(_) => RankerKind::Rocket,
            RankerSpec::Svm(_) => RankerKind::Svm,
            RankerSpec::Ann(_) => RankerKind::Ann,
            RankerSpec::Gbdt(_) => RankerKind::Gbdt,
            RankerSpec::Lrn(_) => RankerKind::Lrn,
        }
    }

    pub fn validate(&self) -> Result<(), RankError> {
        match self {
            RankerSpec::Random => Ok(()),
            RankerSpec::Rocket(p) => p.validate(),
            RankerSpec::Svm(p) => p.validate(),
            RankerSpec::Ann(p) => p.validate(),
            RankerSpec::Gbdt(p) => p.validate(),
            RankerSpec::Lrn(p) => p.validate(),
        }
    }

    /// Model of a strategy that needs no training; `None` for learned kinds.
    pub fn untrained(&self, seed: u64, features: FeatureConfig) -> Option<Model> {
        match self {
            RankerSpec::Random => Some(Model::random(seed, features)),
            RankerSpec::Rocket(p) => Some(Model::rocket(p.clone(), features)),
            _ => None,
        }
    }

    /// Fits a learned model; Random and Rocket only capture their
    /// parameters. Learned kinds on a single-class set come back as a
    /// degenerate constant model, except LambdaRank which reports
    /// [`RankError::NoRankableGroup`].
    pub fn fit(&self, ts: &TrainingSet, seed: u64) -> Result<Model, RankError> {
        if let Some(m) = self.untrained(seed, ts.config) {
            return Ok(m);
        }
        match self {
            RankerSpec::Random | RankerSpec::Rocket(_) => unreachable!("handled above"),
            RankerSpec::Svm(p) => fit_svm(ts, p, seed),
            RankerSpec::Ann(p) => fit_ann(ts, p, seed),
            RankerSpec::Gbdt(p) => fit_gbdt(ts, p),
            RankerSpec::Lrn(p) => fit_lambdarank(ts, p, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Payload {
    Random {
        seed: u64,
    },
    Rocket(RocketParams),
    Linear {
        weights: Vec<f64>,
        bias: f64,
    },
    Network(Mlp),
    Ensemble(Ensemble),
    /// Every test scores the same value; ranking falls back to the tie rule.
    Constant {
        value: f64,
    },
}

/// A fitted scoring function `g` together with everything needed to
/// reproduce its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub kind: RankerKind,
    pub features: FeatureConfig,
    pub standardization: Standardization,
    pub degenerate: bool,
    pub payload: Payload,
}

pub const MODEL_FORMAT: &str = "tcprio-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    model: Model,
}

impl Model {
    pub(crate) fn random(seed: u64, features: FeatureConfig) -> Self {
        Self {
            kind: RankerKind::Random,
            standardization: Standardization::identity(features.dim()),
            features,
            degenerate: false,
            payload: Payload::Random { seed },
        }
    }

    pub(crate) fn rocket(params: RocketParams, features: FeatureConfig) -> Self {
        Self {
            kind: RankerKind::Rocket,
            standardization: Standardization::identity(features.dim()),
            features,
            degenerate: false,
            payload: Payload::Rocket(params),
        }
    }

    /// Constant-score stand-in used when a window cannot be learned from.
    pub fn degenerate(kind: RankerKind, features: FeatureConfig) -> Self {
        Self {
            kind,
            standardization: Standardization::identity(features.dim()),
            features,
            degenerate: true,
            payload: Payload::Constant { value: 0.0 },
        }
    }

    pub(crate) fn learned(kind: RankerKind, ts: &TrainingSet, payload: Payload) -> Self {
        Self {
            kind,
            features: ts.config,
            standardization: ts.stats.clone(),
            degenerate: false,
            payload,
        }
    }

    pub fn dim(&self) -> usize {
        self.standardization.dim()
    }

    /// Self-describing JSON; floats round-trip exactly.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model: self.clone(),
        })
        .expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RankError> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| RankError::Serialization(e.to_string()))?;
        if file.format != MODEL_FORMAT {
            return Err(RankError::Serialization(format!(
                "unexpected format {:?}",
                file.format
            )));
        }
        if file.version != MODEL_VERSION {
            return Err(RankError::Serialization(format!(
                "unsupported version {}",
                file.version
            )));
        }
        if let Payload::Network(net) = &file.model.payload {
            if !net.chains() {
                return Err(RankError::Serialization(
                    "layer dimensions do not chain".into(),
                ));
            }
        }
        Ok(file.model)
    }

    /// Scores a raw feature vector, applying the stored standardization.
    pub fn score(&self, v: &FeatureVector) -> Result<f64, RankError> {
        if v.values.len() != self.dim() {
            return Err(RankError::DimensionMismatch {
                expected: self.dim(),
                actual: v.values.len(),
            });
        }
        let mut x = v.values.clone();
        self.standardization.apply_in_place(&mut x);
        self.score_standardized(&x)
    }

    pub(crate) fn score_standardized(&self, x: &[f64]) -> Result<f64, RankError> {
        Ok(match &self.payload {
            Payload::Linear { weights, bias } => {
                bias + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            }
            Payload::Network(net) => net.forward(x),
            Payload::Ensemble(e) => e.predict(x),
            Payload::Constant { value } => *value,
            Payload::Random { .. } | Payload::Rocket(_) => {
                return Err(RankError::ScoreUnsupported(self.kind))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedEntry<K = TestIdx> {
    pub test: K,
    pub score: f64,
    pub duration: f64,
}

/// Total order over a cycle's tests, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedSuite<K = TestIdx> {
    pub entries: Vec<RankedEntry<K>>,
}

impl<K> RankedSuite<K> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn order(&self) -> impl Iterator<Item = &K> {
        self.entries.iter().map(|e| &e.test)
    }
}

fn entry_order<K: Ord>(a: &RankedEntry<K>, b: &RankedEntry<K>) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.duration.total_cmp(&b.duration))
        .then_with(|| a.test.cmp(&b.test))
}

/// Sorts entries by (score desc, duration asc, key asc). NaN scores sort last.
pub fn rank_entries<K: Ord>(mut entries: Vec<RankedEntry<K>>) -> RankedSuite<K> {
    for e in &mut entries {
        if e.score.is_nan() {
            e.score = f64::NEG_INFINITY;
        }
    }
    entries.sort_by(entry_order);
    RankedSuite { entries }
}

pub fn rank_with_tie_break<K: Ord + Clone>(
    scores: &BTreeMap<K, f64>,
    durations: &BTreeMap<K, f64>,
) -> Result<RankedSuite<K>, RankError> {
    if scores.len() != durations.len() || !scores.keys().eq(durations.keys()) {
        return Err(RankError::KeyMismatch);
    }
    Ok(rank_entries(
        scores
            .iter()
            .zip(durations.values())
            .map(|((k, &score), &duration)| RankedEntry {
                test: k.clone(),
                score,
                duration,
            })
            .collect(),
    ))
}

/// Ranks `tests` for the cycle at history index `window.range().end`,
/// using features of the window cycles before it. `salt` varies the
/// Random permutation per cycle. Tie-break durations come from the
/// history registry.
pub fn rank_cycle(
    model: &Model,
    window: HistoryWindow<'_>,
    tests: &[TestIdx],
    salt: u64,
) -> Result<RankedSuite, RankError> {
    if tests.is_empty() {
        return Err(RankError::EmptyTestSet);
    }
    let h = window.history();
    let durations: Vec<f64> = tests.iter().map(|&t| h.mean_duration(t)).collect();
    match &model.payload {
        Payload::Random { seed } => random_rank(tests, &durations, crate::seed::mix(*seed, salt)),
        Payload::Rocket(params) => rocket_rank(window, tests, &durations, params),
        _ => {
            let mut tracker = FeatureTracker::new(window, model.features)?;
            tracker.advance_to(window.range().end)?;
            let mut x = Vec::with_capacity(model.dim());
            let mut entries = Vec::with_capacity(tests.len());
            for (&t, &duration) in tests.iter().zip(&durations) {
                x.clear();
                tracker.write(t, &mut x);
                if x.len() != model.dim() {
                    return Err(RankError::DimensionMismatch {
                        expected: model.dim(),
                        actual: x.len(),
                    });
                }
                model.standardization.apply_in_place(&mut x);
                entries.push(RankedEntry {
                    test: t,
                    score: model.score_standardized(&x)?,
                    duration,
                });
            }
            Ok(rank_entries(entries))
        }
    }
}

/// Per-example loss weights: positives get `#neg / #pos`, negatives 1.
pub(crate) fn class_weights(labels: &[bool]) -> Vec<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    let w_pos = if pos == 0 {
        1.0
    } else {
        neg as f64 / pos as f64
    };
    labels
        .iter()
        .map(|&l| if l { w_pos } else { 1.0 })
        .collect()
}

pub(crate) fn check_positive(name: &str, v: f64) -> Result<(), RankError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(RankError::InvalidHyperparameter(format!(
            "{name} must be positive, got {v}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::fixtures::grid;

    fn map(pairs: &[(&'static str, f64)]) -> BTreeMap<&'static str, f64> {
        pairs.iter().copied().collect()
    }

    fn order(r: &RankedSuite<&'static str>) -> Vec<&'static str> {
        r.order().copied().collect()
    }

    #[test]
    fn tie_break_examples() {
        let r = rank_with_tie_break(
            &map(&[("A", 0.9), ("B", 0.1)]),
            &map(&[("A", 1.0), ("B", 1.0)]),
        )
        .unwrap();
        assert_eq!(order(&r), ["A", "B"]);
        let r = rank_with_tie_break(
            &map(&[("A", 0.5), ("B", 0.5)]),
            &map(&[("A", 3.0), ("B", 2.0)]),
        )
        .unwrap();
        assert_eq!(order(&r), ["B", "A"]);
        let r = rank_with_tie_break(
            &map(&[("C", 1.0), ("A", 1.0), ("B", 1.0)]),
            &map(&[("C", 2.0), ("A", 2.0), ("B", 2.0)]),
        )
        .unwrap();
        assert_eq!(order(&r), ["A", "B", "C"]);
        assert_eq!(
            rank_with_tie_break(&map(&[("A", 1.0)]), &map(&[("B", 1.0)])).unwrap_err(),
            RankError::KeyMismatch
        );
    }

    #[test]
    fn kinds_parse() {
        for k in RankerKind::ALL {
            assert_eq!(k.name().parse::<RankerKind>().unwrap(), k);
        }
        assert!(matches!(
            "rl".parse::<RankerKind>(),
            Err(RankError::UnknownKind(_))
        ));
        assert!(!RankerKind::Random.history_dependent());
        assert!(RankerKind::Rocket.history_dependent());
    }

    #[test]
    fn ranker_spec_config() {
        let spec: RankerSpec =
            crate::config::from_str("kind = \"gbdt\"\nn_estimators = 7\n").unwrap();
        match spec {
            RankerSpec::Gbdt(p) => {
                assert_eq!(p.n_estimators, 7);
                assert_eq!(p.learning_rate, 0.1);
            }
            other => panic!("unexpected {other:?}"),
        }
        let spec: RankerSpec = crate::config::from_str("kind = \"random\"\n").unwrap();
        assert_eq!(spec.kind(), RankerKind::Random);
    }

    #[test]
    fn degenerate_model_orders_by_duration() {
        let h = grid(3, &[("a", 3.0), ("b", 1.0), ("c", 2.0)], |_, _| false);
        let m = Model::degenerate(RankerKind::Svm, FeatureConfig::default());
        let tests: Vec<TestIdx> = (0..3).map(TestIdx).collect();
        let r = rank_cycle(&m, h.window(0..2).unwrap(), &tests, 0).unwrap();
        let names: Vec<&str> = r.order().map(|&t| h.test_name(t)).collect();
        assert_eq!(names, ["b", "c", "a"]);
    }

    #[test]
    fn score_checks_dimension() {
        let m = Model {
            kind: RankerKind::Svm,
            features: FeatureConfig {
                verdict_window: 1,
                ..Default::default()
            },
            standardization: Standardization::identity(5),
            degenerate: false,
            payload: Payload::Linear {
                weights: vec![1.0, 0.0, 0.0, 0.0, 0.0],
                bias: 0.0,
            },
        };
        let v = FeatureVector {
            test: TestIdx(0),
            values: vec![2.0, 5.0, 5.0, 5.0, 5.0],
        };
        assert_eq!(m.score(&v).unwrap(), 2.0);
        let short = FeatureVector {
            test: TestIdx(0),
            values: vec![2.0],
        };
        assert_eq!(
            m.score(&short).unwrap_err(),
            RankError::DimensionMismatch {
                expected: 5,
                actual: 1
            }
        );
        let r = Model::random(1, FeatureConfig::default());
        assert!(matches!(
            r.score(&FeatureVector {
                test: TestIdx(0),
                values: vec![0.0; 8]
            }),
            Err(RankError::ScoreUnsupported(RankerKind::Random))
        ));
    }

    #[test]
    fn model_json_rejects_foreign_input() {
        assert!(Model::from_json("{}").is_err());
        let m = Model::degenerate(RankerKind::Gbdt, FeatureConfig::default());
        let text = m.to_json().replace("\"version\":1", "\"version\":9");
        assert!(matches!(
            Model::from_json(&text),
            Err(RankError::Serialization(_))
        ));
    }
}
