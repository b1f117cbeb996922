//! Five-level quality vocabulary, the score ⇄ level mapping, per-metric level
//! heads, and instruction records.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{softmax_in_place, Graph, Var};
use crate::scalar::Real;
use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeadError {
    #[error("score {0} is outside [0, 100]")]
    ScoreOutOfRange(f64),
    #[error("unknown metric {0:?}; expected VMC, VBD or OQ")]
    UnknownMetric(String),
    #[error("unknown level {0:?}")]
    UnknownLevel(String),
}

/// The three assessed quality metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Metric {
    /// Vessel morphology consistency.
    Vmc,
    /// Vessel branch detection.
    Vbd,
    /// Overall quality.
    Oq,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Vmc, Metric::Vbd, Metric::Oq];

    pub fn index(self) -> usize {
        match self {
            Metric::Vmc => 0,
            Metric::Vbd => 1,
            Metric::Oq => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Vmc => "VMC",
            Metric::Vbd => "VBD",
            Metric::Oq => "OQ",
        }
    }

    /// Image placeholder tag used in instruction prompts.
    pub fn placeholder(self) -> &'static str {
        match self {
            Metric::Vmc => "<img1>",
            Metric::Vbd => "<img2>",
            Metric::Oq => "<img3>",
        }
    }

    fn subject(self) -> &'static str {
        match self {
            Metric::Vmc => "vessel morphology consistency",
            Metric::Vbd => "vessel branch detection",
            Metric::Oq => "overall quality",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = HeadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "VMC" => Ok(Metric::Vmc),
            "VBD" => Ok(Metric::Vbd),
            "OQ" => Ok(Metric::Oq),
            _ => Err(HeadError::UnknownMetric(s.to_string())),
        }
    }
}

/// Discrete quality level, ordered from worst to best.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Bad,
    Poor,
    Fair,
    Good,
    Excellent,
}

impl Level {
    pub const ALL: [Level; 5] = [
        Level::Bad,
        Level::Poor,
        Level::Fair,
        Level::Good,
        Level::Excellent,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Level> {
        Self::ALL.get(i).copied()
    }

    pub fn word(self) -> &'static str {
        match self {
            Level::Bad => "bad",
            Level::Poor => "poor",
            Level::Fair => "fair",
            Level::Good => "good",
            Level::Excellent => "excellent",
        }
    }

    /// Midpoint of the level's score interval: 10, 30, 50, 70 or 90.
    pub fn midpoint(self) -> f64 {
        20.0 * self.index() as f64 + 10.0
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl FromStr for Level {
    type Err = HeadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Level::ALL
            .into_iter()
            .find(|l| l.word().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| HeadError::UnknownLevel(s.to_string()))
    }
}

/// Maps a score in `[0, 100]` onto five equal intervals; the top interval is closed.
pub fn level_of_score(score: f64) -> Result<Level, HeadError> {
    if !(0.0..=100.0).contains(&score) {
        return Err(HeadError::ScoreOutOfRange(score));
    }
    let bin = ((score / 20.0).floor() as usize).min(4);
    Ok(Level::ALL[bin])
}

/// Probabilities over the five levels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelDistribution<T> {
    pub probs: [T; 5],
}

impl<T: Real> LevelDistribution<T> {
    pub fn from_logits(logits: &[T; 5]) -> Self {
        let mut probs = *logits;
        softmax_in_place(&mut probs);
        LevelDistribution { probs }
    }

    /// Probability-weighted sum of the level midpoints; always within `[10, 90]`.
    pub fn score(&self) -> T {
        let s = Level::ALL
            .iter()
            .zip(&self.probs)
            .map(|(l, &p)| p * T::lit(l.midpoint()))
            .sum::<T>();
        // rounding can push a saturated distribution a few ulps past the extreme midpoints
        s.max(T::lit(10.0)).min(T::lit(90.0))
    }

    pub fn most_likely(&self) -> Level {
        let (i, _) =
            self.probs
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bp), (i, &p)| {
                    if p > bp {
                        (i, p)
                    } else {
                        (bi, bp)
                    }
                });
        Level::ALL[i]
    }
}

pub fn score_of_logits<T: Real>(logits: &[T; 5]) -> T {
    LevelDistribution::from_logits(logits).score()
}

/// Per-metric level head: mean-pool tokens, then an affine map to five logits.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// `[d × 5]`
    pub weight: Var,
    /// `[5]`
    pub bias: Var,
}

/// `tokens[n×d]` → five logits.
pub fn level_logits<T: Real>(
    g: &mut Graph<T>,
    tokens: Var,
    head: &HeadVars,
) -> Result<Var, TensorError> {
    let pooled = g.mean_rows(tokens)?;
    pooled_logits(g, pooled, head)
}

/// Affine map of an already pooled feature vector to five logits.
pub fn pooled_logits<T: Real>(
    g: &mut Graph<T>,
    pooled: Var,
    head: &HeadVars,
) -> Result<Var, TensorError> {
    let d = g.value(pooled).numel();
    let row = g.reshape(pooled, vec![1, d])?;
    let logits = g.matmul(row, head.weight)?;
    let logits = g.reshape(logits, vec![5])?;
    g.add(logits, head.bias)
}

/// One user/assistant exchange for a single metric.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub metric: Metric,
    pub user: String,
    pub assistant: String,
    pub triplet_id: String,
    pub level: Level,
}

/// User prompt templates per metric; `{}` is replaced by the metric's subject.
const VMC_PROMPTS: &[&str] = &[
    "As an experienced interventional radiologist, how would you rate the vessel morphology consistency of this image?",
    "How consistent is the vessel morphology of this image with the reference angiography?",
    "Please rate the vessel morphology consistency of this image, judging the continuity of the major vessels.",
    "Considering the shape and continuity of the main vessels, how would you score the vessel morphology consistency of this image?",
];

const VBD_PROMPTS: &[&str] = &[
    "From your perspective as an interventional radiologist, how do you assess the vessel branch detection in this image?",
    "How well are the vessel branches of this image reproduced, in number and in orientation?",
    "Please evaluate the vessel branch detection of this image.",
    "Looking at the bifurcations and side branches, how would you rate the vessel branch detection in this image?",
];

const OQ_PROMPTS: &[&str] = &[
    "With your experience in interventional radiology, please provide your evaluation of the overall quality of this image.",
    "How would you rate the overall quality of this image?",
    "Taking vessels, background and artifacts into account, what is the overall quality of this image?",
    "Please give your overall quality assessment of this synthetic angiography.",
];

/// Paraphrase pool for a metric's user prompt.
pub fn prompt_pool(metric: Metric) -> &'static [&'static str] {
    match metric {
        Metric::Vmc => VMC_PROMPTS,
        Metric::Vbd => VBD_PROMPTS,
        Metric::Oq => OQ_PROMPTS,
    }
}

/// Renders the instruction pair for `metric` at `level`; the prompt paraphrase is drawn from `seed`.
pub fn render_instruction(
    metric: Metric,
    level: Level,
    triplet_id: &str,
    seed: u64,
) -> InstructionRecord {
    let pool = prompt_pool(metric);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompt = pool[rng.random_range(0..pool.len())];
    InstructionRecord {
        metric,
        user: format!("{}{}", metric.placeholder(), prompt),
        assistant: format!(
            "The {} of this image is {}.",
            metric.subject(),
            level.word()
        ),
        triplet_id: triplet_id.to_string(),
        level,
    }
}

/// Same as [`render_instruction`] with the metric given by name.
pub fn render_instruction_named(
    metric: &str,
    level: Level,
    triplet_id: &str,
    seed: u64,
) -> Result<InstructionRecord, HeadError> {
    Ok(render_instruction(metric.parse()?, level, triplet_id, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn score_examples() {
        let mut one_hot = [0.0f64; 5];
        one_hot[4] = 30.0;
        assert!((score_of_logits(&one_hot) - 90.0).abs() < 1e-9);
        assert_eq!(score_of_logits(&[0.7f64; 5]), 50.0);
        let probs = [0.1f64, 0.1, 0.2, 0.4, 0.2];
        let logits = probs.map(f64::ln);
        assert!((score_of_logits(&logits) - 60.0).abs() < 1e-12);
    }

    #[test]
    fn one_hot_scores_are_the_midpoints() {
        for level in Level::ALL {
            let mut logits = [0.0f64; 5];
            logits[level.index()] = 1e4;
            assert_eq!(score_of_logits(&logits), level.midpoint());
        }
    }

    #[test]
    fn level_boundaries() {
        let table = [
            (0.0, Level::Bad),
            (19.999, Level::Bad),
            (20.0, Level::Poor),
            (40.0, Level::Fair),
            (59.999, Level::Fair),
            (60.0, Level::Good),
            (80.0, Level::Excellent),
            (100.0, Level::Excellent),
        ];
        for (score, want) in table {
            assert_eq!(level_of_score(score).unwrap(), want, "score {score}");
        }
        assert_eq!(level_of_score(-0.1), Err(HeadError::ScoreOutOfRange(-0.1)));
        assert!(level_of_score(100.5).is_err());
        assert!(level_of_score(f64::NAN).is_err());
    }

    #[test]
    fn level_head_on_zero_tokens_is_zero() {
        let mut g = Graph::<f64>::new();
        let tokens = g.input(crate::Tensor::zeros(vec![4, 3]));
        let head = HeadVars {
            weight: g.param(crate::Tensor::from_fn(vec![3, 5], |i| i as f64)),
            bias: g.param(crate::Tensor::zeros(vec![5])),
        };
        let out = level_logits(&mut g, tokens, &head).unwrap();
        assert_eq!(g.value(out).data(), &[0.0; 5]);
    }

    #[test]
    fn single_token_pooling_is_identity() {
        let mut g = Graph::<f64>::new();
        let token = crate::Tensor::from_f64(vec![1, 2], &[0.5, -2.0]).unwrap();
        let tokens = g.input(token);
        let head = HeadVars {
            weight: g.param(
                crate::Tensor::from_f64(vec![2, 5], &[1., 0., 0., 0., 0., 0., 1., 0., 0., 0.])
                    .unwrap(),
            ),
            bias: g.param(crate::Tensor::zeros(vec![5])),
        };
        let out = level_logits(&mut g, tokens, &head).unwrap();
        assert_eq!(g.value(out).data(), &[0.5, -2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn instruction_rendering_is_deterministic_and_well_formed() {
        let a = render_instruction(Metric::Vmc, Level::Good, "t1", 42);
        let b = render_instruction(Metric::Vmc, Level::Good, "t1", 42);
        assert_eq!(a, b);
        for metric in Metric::ALL {
            for seed in 0..20 {
                let r = render_instruction(metric, Level::Fair, "t", seed);
                let tags = ["<img1>", "<img2>", "<img3>"];
                let count: usize = tags.iter().map(|t| r.user.matches(t).count()).sum();
                assert_eq!(count, 1);
                assert!(r.user.starts_with(metric.placeholder()));
                assert!(r.assistant.contains("fair"));
            }
        }
        let oq = render_instruction(Metric::Oq, Level::Excellent, "t", 7);
        assert_eq!(
            oq.assistant,
            "The overall quality of this image is excellent."
        );
    }

    #[test]
    fn every_paraphrase_is_used() {
        for metric in Metric::ALL {
            let pool = prompt_pool(metric);
            assert!(pool.len() >= 3);
            let seen: HashSet<String> = (0..1000)
                .map(|s| render_instruction(metric, Level::Poor, "t", s).user)
                .collect();
            assert_eq!(seen.len(), pool.len(), "{metric}");
        }
    }

    #[test]
    fn unknown_metric_is_rejected() {
        assert_eq!(
            render_instruction_named("IQ", Level::Bad, "t", 0),
            Err(HeadError::UnknownMetric("IQ".into()))
        );
        assert!(render_instruction_named("vbd", Level::Bad, "t", 0).is_ok());
    }

    proptest! {
        #[test]
        fn score_is_shift_invariant_and_bounded(
            logits in prop::array::uniform5(-40.0f64..40.0),
            shift in -100.0f64..100.0,
        ) {
            let s = score_of_logits(&logits);
            prop_assert!((10.0..=90.0).contains(&s));
            let shifted = logits.map(|l| l + shift);
            prop_assert!((score_of_logits(&shifted) - s).abs() < 1e-9);
        }

        #[test]
        fn distribution_sums_to_one(logits in prop::array::uniform5(-50.0f64..50.0)) {
            let d = LevelDistribution::from_logits(&logits);
            let total: f64 = d.probs.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(d.probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn cross_entropy_against_mos_level_is_finite(
            logits in prop::array::uniform5(-1e3f64..1e3),
            mos in 0.0f64..=100.0,
        ) {
            let level = level_of_score(mos).unwrap();
            let mut g = Graph::<f64>::new();
            let l = g.param(crate::Tensor::from_f64(vec![5], &logits).unwrap());
            let loss = g.cross_entropy(l, level.index()).unwrap();
            let grads = g.backward(loss).unwrap();
            prop_assert!(g.value(loss).data()[0].is_finite());
            prop_assert!(grads.get(l).unwrap().is_finite());
        }
    }

    #[test]
    fn midpoints_round_trip_through_levels() {
        for level in Level::ALL {
            let mut logits = [0.0f64; 5];
            logits[level.index()] = 200.0;
            assert_eq!(level_of_score(score_of_logits(&logits)).unwrap(), level);
        }
    }
}
