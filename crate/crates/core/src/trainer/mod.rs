//! The K-round boosting pipeline.
//!
//! Round 1 trains a fresh model with uniform weights. Every later round first
//! scores the training set with the previous model, multiplies each weight by
//! `p^{-α}`, and then trains the next model according to the variant:
//!
//! * `V1`: fine-tune from the previous model on all samples,
//! * `V2`: fine-tune from the previous model on its misclassified samples only,
//! * `V3`: train from a fresh initialization on all samples.
//!
//! Inside a round every mini-batch standardizes its weights against running
//! statistics and adapts each sample's softmax scale accordingly.

pub mod run_dir;

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boost::{adapt_scale, HardnessStats, SampleProbs, WeightTable};
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::eval::Ensemble;
use crate::margin::{forward_logits, loss_backward, softmax_prob, weighted_loss, MarginParams};
use crate::numeric::{dot, Architecture, EmbeddingModel, Gradients, Matrix, SgdConfig, SgdState};
use crate::rng::{stream, Purpose};

/// Largest supported number of boosting rounds.
pub const MAX_ROUNDS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    V1,
    V2,
    V3,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::V1, Variant::V2, Variant::V3];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            embed_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub rounds: usize,
    pub variant: Variant,
    /// Exponent in the weight update.
    pub alpha: f64,
    /// Concentration factor on the standardized hardness.
    pub lambda: f64,
    pub ema_momentum: f64,
    /// Floor on the running std when standardizing hardness.
    pub epsilon: f64,
    /// Ensemble weights; the first `rounds` entries are used.
    pub betas: Vec<f64>,
    /// Learning-rate multiplier for rounds that fine-tune a previous model.
    pub finetune_lr_scale: f64,
    /// Rescale weights to sum to N after each update as classical boosting does.
    pub renormalize_weights: bool,
    pub seed: u64,
    pub sgd: SgdConfig,
    pub margin: MarginParams,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_round: 30,
            batch_size: 128,
            rounds: 2,
            variant: Variant::V1,
            alpha: 0.1,
            lambda: 1.0,
            ema_momentum: 0.99,
            epsilon: 1e-6,
            betas: vec![1.0, 0.1],
            finetune_lr_scale: 0.01,
            renormalize_weights: false,
            seed: 0,
            sgd: SgdConfig::default(),
            margin: MarginParams::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Round count after applying the variant (a baseline is one round).
    pub fn effective_rounds(&self) -> usize {
        match self.variant {
            Variant::Baseline => 1,
            _ => self.rounds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.rounds > MAX_ROUNDS {
            return Err(Error::config(
                "train.rounds",
                format!("must be in 1..={MAX_ROUNDS}, got {}", self.rounds),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::config(
                "train.alpha",
                format!("must be non-negative, got {}", self.alpha),
            ));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::config(
                "train.lambda",
                format!("must be positive, got {}", self.lambda),
            ));
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return Err(Error::config(
                "train.ema_momentum",
                format!("must be in (0, 1), got {}", self.ema_momentum),
            ));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::config("train.epsilon", "must be positive"));
        }
        if self.betas.len() < self.effective_rounds() {
            return Err(Error::config(
                "train.betas",
                format!(
                    "need at least {} values for {} rounds, got {}",
                    self.effective_rounds(),
                    self.effective_rounds(),
                    self.betas.len()
                ),
            ));
        }
        if self.betas.iter().any(|b| !b.is_finite()) {
            return Err(Error::config("train.betas", "must be finite"));
        }
        if !(self.finetune_lr_scale.is_finite() && self.finetune_lr_scale > 0.0) {
            return Err(Error::config("train.finetune_lr_scale", "must be positive"));
        }
        if self.model.embed_dim < 2 {
            return Err(Error::config("train.model.embed_dim", "must be at least 2"));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::config("train.model.hidden", "widths must be positive"));
        }
        self.sgd.validate("train.sgd.")?;
        self.margin.validate("train.margin.")?;
        Ok(())
    }

    pub fn betas_used(&self) -> Vec<f64> {
        self.betas[..self.effective_rounds()].to_vec()
    }

    pub fn architecture(&self, input_dim: usize, num_classes: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden: self.model.hidden.clone(),
            embed_dim: self.model.embed_dim,
            num_classes,
        }
    }

    /// Optimizer settings for round `round` (1-based).
    pub fn round_sgd(&self, round: u32) -> SgdConfig {
        let mut sgd = self.sgd.clone();
        if round > 1 && matches!(self.variant, Variant::V1 | Variant::V2) {
            sgd.learning_rate *= self.finetune_lr_scale;
        }
        sgd
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: u32,
    pub final_loss: f64,
    pub metrics: Vec<EpochMetrics>,
    pub trained_samples: usize,
    /// Not persisted; run directories stay byte-reproducible.
    pub wall_clock: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub model: EmbeddingModel,
    pub optimizer: SgdState,
    pub stats: HardnessStats,
    pub record: RoundRecord,
}

/// Trains one round over `samples` (in the given order before shuffling).
///
/// Per batch: embed, standardize weights against the running statistics,
/// adapt each sample's scale, compute the weighted margin loss, backpropagate
/// and take one SGD step.
pub fn train_round(
    init_model: EmbeddingModel,
    samples: &[&LabeledSample],
    table: &WeightTable,
    stats: HardnessStats,
    config: &TrainConfig,
    round: u32,
    sgd: &SgdConfig,
) -> Result<RoundOutcome> {
    let started = Instant::now();
    let mut model = init_model;
    let mut optimizer = SgdState::for_model(&model);
    let mut stats = stats;
    let weights: Vec<f64> = samples
        .iter()
        .map(|s| {
            table.get(s.sample_id).ok_or_else(|| {
                Error::Coverage(format!("weight table has no entry for sample {}", s.sample_id))
            })
        })
        .collect::<Result<_>>()?;
    for s in samples {
        if s.input.len() != model.input_dim() {
            return Err(Error::Dimension(format!(
                "sample {} has {} features, model expects {}",
                s.sample_id,
                s.input.len(),
                model.input_dim()
            )));
        }
        if s.class_id >= model.num_classes() {
            return Err(Error::Contract(format!(
                "sample {} has class {} but the model has {} centers",
                s.sample_id,
                s.class_id,
                model.num_classes()
            )));
        }
    }

    let mut shuffle_rng = stream(config.seed, Purpose::Shuffle, round as u64);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs_per_round);
    for epoch in 0..config.epochs_per_round {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let batch_weights: Vec<f64> = batch.iter().map(|&i| weights[i]).collect();
            stats = stats.update_running_stats(&batch_weights)?;
            let scales: Vec<f64> = batch_weights
                .iter()
                .map(|&d| adapt_scale(config.margin.base_scale, stats.normalize_hardness(d)))
                .collect();
            let diagnose = |what: String| {
                let ids: Vec<u64> = batch.iter().map(|&i| samples[i].sample_id).collect();
                Error::Numeric(format!(
                    "{what} in round {round}, epoch {epoch}, batch {b}; samples {ids:?}"
                ))
            };
            let (loss, grads) = batch_loss_and_grads(
                &model,
                batch.iter().map(|&i| samples[i]),
                &batch_weights,
                &scales,
                &config.margin,
            )
            .map_err(|e| match e {
                Error::Numeric(_) | Error::DegenerateEmbedding { .. } => diagnose(e.to_string()),
                other => other,
            })?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(diagnose("non-finite loss or gradient".into()));
            }
            loss_sum += loss * batch.len() as f64;
            optimizer.step_model(&mut model, &grads, sgd, epoch)?;
        }
        metrics.push(EpochMetrics {
            epoch,
            loss: if samples.is_empty() {
                0.0
            } else {
                loss_sum / samples.len() as f64
            },
            lr: sgd.lr_at(epoch),
        });
    }
    Ok(RoundOutcome {
        model,
        optimizer,
        stats,
        record: RoundRecord {
            round,
            final_loss: metrics.last().map_or(f64::NAN, |m| m.loss),
            metrics,
            trained_samples: samples.len(),
            wall_clock: started.elapsed(),
        },
    })
}

/// Weighted margin loss of one batch and its gradient with respect to every
/// model parameter.
pub fn batch_loss_and_grads<'a>(
    model: &EmbeddingModel,
    batch: impl Iterator<Item = &'a LabeledSample>,
    weights: &[f64],
    scales: &[f64],
    margin: &MarginParams,
) -> Result<(f64, Gradients)> {
    let mut caches = Vec::with_capacity(weights.len());
    let mut labels = Vec::with_capacity(weights.len());
    for s in batch {
        caches.push(model.forward(&s.input)?);
        labels.push(s.class_id);
    }
    let dim = model.embed_dim();
    let mut features = Matrix::zeros(caches.len(), dim);
    for (i, c) in caches.iter().enumerate() {
        features.row_mut(i).copy_from_slice(c.embedding());
    }
    let (centers, norms) = model.normalized_centers()?;
    let rows = forward_logits(&features, &centers, &labels, margin, scales)?;
    let loss = weighted_loss(&rows, weights)?;
    let head = loss_backward(&rows, weights, &features, &centers, margin)?;
    let mut grads = Gradients::zeros_like(model);
    for (i, cache) in caches.iter().enumerate() {
        model.backward_into(cache, head.features.row(i), &mut grads)?;
    }
    EmbeddingModel::center_grads_from_normalized(&centers, &norms, &head.centers, &mut grads.centers);
    Ok((loss, grads))
}

const PROB_CHUNK: usize = 256;

/// True-class probability of every sample under the margin head at the base
/// scale (no per-sample adaptation).
pub fn compute_dataset_probs(
    model: &EmbeddingModel,
    samples: &[LabeledSample],
    margin: &MarginParams,
) -> Result<SampleProbs> {
    let (centers, _) = model.normalized_centers()?;
    let chunks: Vec<Vec<(u64, f64)>> = samples
        .par_chunks(PROB_CHUNK)
        .map(|chunk| {
            let mut features = Matrix::zeros(chunk.len(), model.embed_dim());
            for (i, s) in chunk.iter().enumerate() {
                features.row_mut(i).copy_from_slice(&model.embed(&s.input)?);
            }
            let labels: Vec<usize> = chunk.iter().map(|s| s.class_id).collect();
            let scales = vec![margin.base_scale; chunk.len()];
            let rows = forward_logits(&features, &centers, &labels, margin, &scales)?;
            Ok(chunk
                .iter()
                .zip(&rows)
                .map(|(s, r)| (s.sample_id, softmax_prob(r)))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Predicted class by plain cosine argmax (ties to the lower class id).
pub fn predict_class(model: &EmbeddingModel, centers: &Matrix, input: &[f64]) -> Result<usize> {
    let e = model.embed(input)?;
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..centers.rows() {
        let s = dot(&e, centers.row(c));
        if s > best.1 {
            best = (c, s);
        }
    }
    Ok(best.0)
}

/// Training samples whose cosine argmax differs from their label.
pub fn misclassified<'a>(
    model: &EmbeddingModel,
    samples: &'a [LabeledSample],
) -> Result<Vec<&'a LabeledSample>> {
    let (centers, _) = model.normalized_centers()?;
    let mut out = Vec::new();
    for s in samples {
        if predict_class(model, &centers, &s.input)? != s.class_id {
            out.push(s);
        }
    }
    Ok(out)
}

/// Everything produced by one finished round.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletedRound {
    pub model: EmbeddingModel,
    pub optimizer: SgdState,
    /// Weights the round was trained with.
    pub table: WeightTable,
    pub record: RoundRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoostOutcome {
    pub ensemble: Ensemble,
    pub rounds: Vec<CompletedRound>,
}

/// Runs every round from scratch in memory.
pub fn boost_train(train: &[LabeledSample], num_classes: usize, config: &TrainConfig) -> Result<BoostOutcome> {
    continue_boost(train, num_classes, config, Vec::new(), |_| Ok(()))
}

/// Continues a pipeline given the rounds already completed, calling
/// `on_round` after each new round.
pub fn continue_boost(
    train: &[LabeledSample],
    num_classes: usize,
    config: &TrainConfig,
    mut completed: Vec<CompletedRound>,
    mut on_round: impl FnMut(&CompletedRound) -> Result<()>,
) -> Result<BoostOutcome> {
    config.validate()?;
    let Some(first) = train.first() else {
        return Err(Error::Contract("training set is empty".into()));
    };
    let arch = config.architecture(first.input.len(), num_classes);
    let total = config.effective_rounds();
    if completed.len() > total {
        return Err(Error::Contract(format!(
            "{} rounds already completed but only {total} configured",
            completed.len()
        )));
    }
    while completed.len() < total {
        let round = completed.len() as u32 + 1;
        let next = match completed.last() {
            None => {
                let table = WeightTable::init(train.iter().map(|s| s.sample_id), config.alpha)?;
                let model = EmbeddingModel::init(&arch, &mut stream(config.seed, Purpose::Init, 1))?;
                let samples: Vec<&LabeledSample> = train.iter().collect();
                run_round(model, &samples, table, config, round)?
            }
            Some(prev) => {
                let probs = compute_dataset_probs(&prev.model, train, &config.margin)?;
                let mut table = prev.table.update_weights(&probs)?;
                if config.renormalize_weights {
                    table = table.renormalized();
                }
                let (init, samples) = match config.variant {
                    Variant::V1 => (prev.model.clone(), train.iter().collect()),
                    Variant::V2 => {
                        let hard = misclassified(&prev.model, train)?;
                        if hard.is_empty() {
                            return Err(Error::EmptyHardSet);
                        }
                        (prev.model.clone(), hard)
                    }
                    Variant::V3 => (
                        EmbeddingModel::init(
                            &arch,
                            &mut stream(config.seed, Purpose::Init, round as u64),
                        )?,
                        train.iter().collect(),
                    ),
                    Variant::Baseline => unreachable!("baseline has a single round"),
                };
                run_round(init, &samples, table, config, round)?
            }
        };
        on_round(&next)?;
        completed.push(next);
    }
    let ensemble = Ensemble::new(
        completed.iter().map(|c| c.model.clone()).collect(),
        config.betas_used(),
    )?;
    Ok(BoostOutcome {
        ensemble,
        rounds: completed,
    })
}

fn run_round(
    init: EmbeddingModel,
    samples: &[&LabeledSample],
    table: WeightTable,
    config: &TrainConfig,
    round: u32,
) -> Result<CompletedRound> {
    let trained: Vec<f64> = samples
        .iter()
        .map(|s| table.get(s.sample_id).unwrap_or(f64::NAN))
        .collect();
    let (mean, std) = crate::boost::mean_std(&trained);
    let stats = HardnessStats::new(mean, std, config.ema_momentum, config.lambda, config.epsilon);
    let outcome = train_round(init, samples, &table, stats, config, round, &config.round_sgd(round))?;
    Ok(CompletedRound {
        model: outcome.model,
        optimizer: outcome.optimizer,
        table,
        record: outcome.record,
    })
}
