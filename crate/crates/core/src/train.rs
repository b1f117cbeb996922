//! AdamW training with a cosine learning-rate schedule, per-epoch evaluation
//! and the fusion ablation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correlation::{Correlation, CorrelationError};
use crate::fusion::{ModelConfig, ModelError, QualityModel, TripletImages};
use crate::head::{level_of_score, Metric};
use crate::params::ParamStore;
use crate::synth::Triplet;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("schedule step {t} is past the end of the schedule ({total} steps)")]
    Schedule { t: usize, total: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("evaluation failed for {metric}: {source}")]
    Correlation {
        metric: &'static str,
        source: CorrelationError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub must_enabled: bool,
    pub dim: usize,
    pub patch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 16,
            peak_lr: 1e-3,
            min_lr: 0.0,
            weight_decay: 0.01,
            seed: 0,
            must_enabled: true,
            dim: ModelConfig::default().dim,
            patch_size: ModelConfig::default().patch_size,
        }
    }
}

/// Learning rate used for LoRA fine-tuning of a large language model; far too small for the toy model.
pub const LARGE_MODEL_LR: f64 = 2e-5;

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return bad(format!(
                "peak lr {} must be finite and non-negative",
                self.peak_lr
            ));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.peak_lr) {
            return bad(format!("min lr {} must lie in [0, peak lr]", self.min_lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!(
                "weight decay {} must be finite and non-negative",
                self.weight_decay
            ));
        }
        Ok(())
    }

    pub fn model(&self, image_size: usize) -> ModelConfig {
        ModelConfig {
            image_size,
            patch_size: self.patch_size,
            dim: self.dim,
            fusion: self.must_enabled,
        }
    }

    /// JSON object, or `key = value` lines with `#` comments.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let config: TrainConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text)?
        } else {
            let mut map = serde_json::Map::new();
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(TrainError::Config(format!(
                        "line {}: expected key = value",
                        i + 1
                    )));
                };
                let value = value.trim();
                let parsed = serde_json::from_str(value)
                    .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
                map.insert(key.trim().to_string(), parsed);
            }
            serde_json::from_value(serde_json::Value::Object(map))?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Cosine annealing from `lr_max` at `t = 0` to `lr_min` at `t = total`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64, TrainError> {
    if t > total {
        return Err(TrainError::Schedule { t, total });
    }
    if total == 0 {
        return Ok(lr_max);
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore<f64>) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update at step `t ≥ 1`: bias-corrected Adam plus weight decay
/// applied directly to the parameters. Nothing is modified if any gradient is non-finite.
pub fn adam_step(
    params: &mut ParamStore<f64>,
    grads: &[Tensor<f64>],
    state: &mut AdamState,
    t: u64,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    if t == 0 {
        return Err(TrainError::Config(
            "optimizer steps are counted from 1".into(),
        ));
    }
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(TrainError::Config(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.tensors()[i].shape()
            || state.m[i].len() != g.numel()
            || state.v[i].len() != g.numel()
        {
            return Err(TrainError::Config(format!(
                "shape mismatch for parameter {}",
                params.names()[i]
            )));
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient(params.names()[i].clone()));
        }
    }
    let c1 = 1.0 - BETA1.powf(t as f64);
    let c2 = 1.0 - BETA2.powf(t as f64);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (theta, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *theta -= lr * weight_decay * *theta;
            *theta -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// A triplet prepared for the model.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub images: TripletImages<f64>,
    pub gt: [f64; 3],
    pub targets: [usize; 3],
}

impl Sample {
    pub fn from_triplet(t: &Triplet) -> Result<Self, TrainError> {
        let gt = t.gt.ok_or_else(|| {
            TrainError::Data(format!("triplet {} has no ground-truth scores", t.id))
        })?;
        let mut targets = [0; 3];
        for (target, &score) in targets.iter_mut().zip(&gt) {
            *target = level_of_score(score)
                .map_err(|e| TrainError::Data(format!("triplet {}: {e}", t.id)))?
                .index();
        }
        Ok(Sample {
            id: t.id.clone(),
            images: images_of(t),
            gt,
            targets,
        })
    }
}

pub fn images_of(t: &Triplet) -> TripletImages<f64> {
    TripletImages {
        mask: t.mask.to_unit(),
        contrast: t.contrast.to_unit(),
        generated: t.generated.to_unit(),
    }
}

pub fn samples(triplets: &[Triplet]) -> Result<Vec<Sample>, TrainError> {
    triplets.iter().map(Sample::from_triplet).collect()
}

/// Gradients of the batch-mean loss. Per-sample passes run in parallel; the
/// reduction runs in batch order so the result does not depend on scheduling.
pub fn batch_gradients(
    model: &QualityModel<f64>,
    batch: &[&Sample],
) -> Result<(f64, Vec<Tensor<f64>>), TrainError> {
    let per_sample = batch
        .par_iter()
        .map(|s| model.loss_and_gradients(&s.images, s.targets))
        .collect::<Result<Vec<_>, _>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut iter = per_sample.into_iter();
    let (mut loss, mut grads) = iter
        .next()
        .ok_or_else(|| TrainError::Data("empty batch".into()))?;
    for (l, g) in iter {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += b;
            }
        }
    }
    for g in &mut grads {
        for x in g.data_mut() {
            *x *= scale;
        }
    }
    Ok((loss * scale, grads))
}

/// Predicted `[vmc, vbd, oq]` scores, in input order.
pub fn predict_scores(
    model: &QualityModel<f64>,
    images: &[TripletImages<f64>],
) -> Result<Vec<[f64; 3]>, TrainError> {
    Ok(images
        .par_iter()
        .map(|im| model.predict(im).map(|p| p.scores()))
        .collect::<Result<Vec<_>, _>>()?)
}

/// Per-metric correlations, serialized by metric name.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCorrelations {
    pub vmc: Correlation,
    pub vbd: Correlation,
    pub oq: Correlation,
}

impl MetricCorrelations {
    pub fn get(&self, metric: Metric) -> &Correlation {
        match metric {
            Metric::Vmc => &self.vmc,
            Metric::Vbd => &self.vbd,
            Metric::Oq => &self.oq,
        }
    }

    pub fn mean_srcc(&self) -> f64 {
        (self.vmc.srcc + self.vbd.srcc + self.oq.srcc) / 3.0
    }

    /// Correlation of predicted against reference scores, per metric.
    pub fn between(predicted: &[[f64; 3]], reference: &[[f64; 3]]) -> Result<Self, TrainError> {
        let one = |metric: Metric| {
            let i = metric.index();
            let p: Vec<f64> = predicted.iter().map(|s| s[i]).collect();
            let r: Vec<f64> = reference.iter().map(|s| s[i]).collect();
            Correlation::compute(&p, &r).map_err(|source| TrainError::Correlation {
                metric: metric.as_str(),
                source,
            })
        };
        Ok(MetricCorrelations {
            vmc: one(Metric::Vmc)?,
            vbd: one(Metric::Vbd)?,
            oq: one(Metric::Oq)?,
        })
    }
}

pub fn evaluate(
    model: &QualityModel<f64>,
    samples: &[Sample],
) -> Result<MetricCorrelations, TrainError> {
    let images: Vec<TripletImages<f64>> = samples.iter().map(|s| s.images.clone()).collect();
    let predicted = predict_scores(model, &images)?;
    let gt: Vec<[f64; 3]> = samples.iter().map(|s| s.gt).collect();
    MetricCorrelations::between(&predicted, &gt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub test: MetricCorrelations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub train_size: usize,
    pub test_size: usize,
    pub epochs: Vec<EpochRecord>,
    pub final_test: MetricCorrelations,
    /// First epoch whose mean test SRCC reaches 95% of the final epoch's.
    pub epochs_to_95pct_final_srcc: usize,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String, TrainError> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn epochs_to_fraction_of_final(mean_srcc: &[f64], fraction: f64) -> usize {
    let Some(&last) = mean_srcc.last() else {
        return 0;
    };
    mean_srcc
        .iter()
        .position(|&s| s >= fraction * last)
        .map_or(mean_srcc.len(), |i| i + 1)
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub model: QualityModel<f64>,
}

const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4521;

/// Trains a fresh model on `train` and evaluates on `test` after every epoch.
pub fn train(
    config: &TrainConfig,
    train: &[Sample],
    test: &[Sample],
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::Data("no training samples".into()));
    }
    if test.len() < 2 {
        return Err(TrainError::Data("need at least two test samples".into()));
    }
    let pixels = train[0].images.mask.len();
    let size = (pixels as f64).sqrt().round() as usize;
    if size * size != pixels {
        return Err(TrainError::Data(format!(
            "images with {pixels} pixels are not square"
        )));
    }
    let mut model = QualityModel::init(config.model(size), config.seed)?;
    let mut state = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let batches = train.len().div_ceil(config.batch_size);
    let total = config.epochs * batches;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = config.peak_lr;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_gradients(&model, &batch)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step: b + 1 });
            }
            lr = cosine_lr(step, total, config.peak_lr, config.min_lr)?;
            step += 1;
            adam_step(
                model.params_mut(),
                &grads,
                &mut state,
                step as u64,
                lr,
                config.weight_decay,
            )?;
            loss_sum += loss * batch.len() as f64;
        }
        epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / train.len() as f64,
            lr,
            test: evaluate(&model, test)?,
        });
    }
    let mean: Vec<f64> = epochs.iter().map(|e| e.test.mean_srcc()).collect();
    let report = TrainReport {
        config: config.clone(),
        model: *model.config(),
        train_size: train.len(),
        test_size: test.len(),
        final_test: epochs.last().expect("at least one epoch").test,
        epochs_to_95pct_final_srcc: epochs_to_fraction_of_final(&mean, 0.95),
        epochs,
        checkpoint: None,
    };
    Ok(TrainOutcome { report, model })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub must_enabled: bool,
    /// Per metric, VMC/VBD/OQ order.
    pub median_plcc: [f64; 3],
    pub median_srcc: [f64; 3],
    pub median_epochs_to_95pct_final_srcc: f64,
}

impl ArmSummary {
    fn of(must_enabled: bool, runs: &[TrainReport]) -> Self {
        let per_metric = |f: &dyn Fn(&Correlation) -> f64| {
            Metric::ALL.map(|m| {
                median(
                    &mut runs
                        .iter()
                        .map(|r| f(r.final_test.get(m)))
                        .collect::<Vec<_>>(),
                )
            })
        };
        ArmSummary {
            must_enabled,
            median_plcc: per_metric(&|c| c.plcc),
            median_srcc: per_metric(&|c| c.srcc),
            median_epochs_to_95pct_final_srcc: median(
                &mut runs
                    .iter()
                    .map(|r| r.epochs_to_95pct_final_srcc as f64)
                    .collect::<Vec<_>>(),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub with_fusion: ArmSummary,
    pub without_fusion: ArmSummary,
    /// Median SRCC with fusion minus without, per metric.
    pub srcc_delta: [f64; 3],
    pub plcc_delta: [f64; 3],
    pub runs: Vec<TrainReport>,
}

/// Trains both arms on every seed with otherwise identical settings. Runs
/// already present in `prior` (matched on their full config) are reused.
pub fn ablate_must(
    config: &TrainConfig,
    seeds: &[u64],
    train_set: &[Sample],
    test_set: &[Sample],
    prior: &[TrainReport],
) -> Result<AblationReport, TrainError> {
    if seeds.len() < 3 {
        return Err(TrainError::Config(format!(
            "ablation needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    let mut runs = Vec::with_capacity(2 * seeds.len());
    for must_enabled in [true, false] {
        for &seed in seeds {
            let arm = TrainConfig {
                seed,
                must_enabled,
                ..config.clone()
            };
            let report = match prior.iter().find(|r| r.config == arm) {
                Some(r) => r.clone(),
                None => train(&arm, train_set, test_set)?.report,
            };
            runs.push(report);
        }
    }
    let (with, without) = runs.split_at(seeds.len());
    let with_fusion = ArmSummary::of(true, with);
    let without_fusion = ArmSummary::of(false, without);
    let delta = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        srcc_delta: delta(with_fusion.median_srcc, without_fusion.median_srcc),
        plcc_delta: delta(with_fusion.median_plcc, without_fusion.median_plcc),
        with_fusion,
        without_fusion,
        runs,
    })
}
