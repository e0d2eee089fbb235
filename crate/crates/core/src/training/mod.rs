//! Staged training: CTC encoder pre-training, transducer ASR pre-training
//! and SLU fine-tuning under the REF/DEC history regimes.

mod data;
mod regime;
mod schedule;

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusManifest, Split};
use crate::error::{Error, Result};
use crate::eval::corpus_wer;
use crate::nn::{clip_grad_norm, AdamW, Linear, Mat, Parameters};
use crate::slu::{parse_tokens, SluTask};
use crate::transducer::{
    greedy_decode, transcript_targets, Hypothesis, TransducerConfig, TransducerModel, ASR_OUTPUTS,
    DEFAULT_EMISSION_CAP,
};

pub use data::FeatureStore;
pub use regime::{
    build_decoded_histories, evaluate_slu, held_out_fold_histories, history_embeddings, train_slu, DecodedHistoryCache,
    DecodedTurn, HistoryEmbeddings, HistorySource, OracleDecoder, RegimeSpec, SluEvaluation, SluTraining, TransducerDecoder,
    UtteranceDecoder, UtteranceResult,
};
pub use schedule::{one_cycle_lr, OneCycle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    CtcPretrain,
    AsrRnnt,
    Slu,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::CtcPretrain => "ctc-pretrain",
            Stage::AsrRnnt => "asr-rnnt",
            Stage::Slu => "slu",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingPlan {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    /// Defaults to the one-cycle shape compressed into `epochs`.
    #[serde(default)]
    pub schedule: Option<OneCycle>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
    #[serde(default = "default_clip")]
    pub clip_norm: f32,
    #[serde(default)]
    pub seed: u64,
    /// Speed-perturbation factors applied to the training split.
    #[serde(default = "default_speeds")]
    pub speeds: Vec<f64>,
    /// Weight of an auxiliary CTC loss on the encoder during transducer
    /// ASR training. Keeps encoder states frame-local.
    #[serde(default)]
    pub ctc_weight: f32,
}

fn default_weight_decay() -> f32 {
    0.01
}

fn default_clip() -> f32 {
    5.0
}

fn default_speeds() -> Vec<f64> {
    vec![1.0]
}

impl TrainingPlan {
    /// 20 epochs, batch 16, peak 2e-4 on 3-way speed-perturbed data.
    pub fn full_slu() -> Self {
        Self {
            stage: Stage::Slu,
            epochs: 20,
            batch_size: 16,
            max_lr: 2e-4,
            schedule: Some(OneCycle::FULL),
            weight_decay: 0.01,
            clip_norm: 5.0,
            seed: 0,
            speeds: crate::corpus::SPEED_FACTORS.to_vec(),
            ctc_weight: 0.0,
        }
    }

    pub fn desk(stage: Stage) -> Self {
        let (epochs, batch_size, max_lr, speeds, ctc_weight) = match stage {
            Stage::CtcPretrain => (6, 8, 3e-3, crate::corpus::SPEED_FACTORS.to_vec(), 0.0),
            Stage::AsrRnnt => (8, 4, 1e-3, crate::corpus::SPEED_FACTORS.to_vec(), 1.0),
            Stage::Slu => (16, 8, 2e-3, vec![1.0], 0.0),
        };
        Self {
            stage,
            epochs,
            batch_size,
            max_lr,
            schedule: None,
            weight_decay: 0.01,
            clip_norm: 5.0,
            seed: 0,
            speeds,
            ctc_weight,
        }
    }

    pub fn schedule(&self) -> OneCycle {
        self.schedule.unwrap_or_else(|| OneCycle::scaled(self.max_lr, self.epochs))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.max_lr > 0.0) {
            return Err(Error::Config(format!(
                "{} plan needs epochs ≥ 1, batch ≥ 1 and a positive learning rate",
                self.stage
            )));
        }
        if !(self.ctc_weight >= 0.0) || (self.ctc_weight > 0.0 && self.stage != Stage::AsrRnnt) {
            return Err(Error::Config("an auxiliary CTC weight applies only to transducer ASR training".into()));
        }
        if self.speeds.is_empty() || self.speeds.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("speed factors must be positive".into()));
        }
        self.schedule().validate()
    }

    /// Epoch position of batch `b` of `n` within epoch `e` (0-based),
    /// mapped onto the schedule horizon.
    fn position(&self, e: usize, b: usize, n: usize) -> f64 {
        let sched = self.schedule();
        (e as f64 + b as f64 / n as f64) * sched.total_epochs / self.epochs as f64
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
    pub valid_metric: f64,
    pub metric_name: String,
}

/// One supervised utterance.
#[derive(Debug, Clone)]
pub(crate) struct Example {
    pub conv: usize,
    pub turn: usize,
    pub speed: f64,
    pub target: Vec<usize>,
    pub history: Option<Vec<f32>>,
}

fn check_loss(loss: f64, stage: Stage, epoch: usize, corpus: &CorpusManifest, ex: &Example) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!(
            "{stage} loss {loss} at epoch {epoch} on {} turn {} speed {}",
            corpus.conversations[ex.conv].id,
            ex.turn + 1,
            ex.speed
        )))
    }
}

fn map_numeric(e: Error, stage: Stage, epoch: usize, corpus: &CorpusManifest, ex: &Example) -> Error {
    match e {
        Error::Numeric(m) => Error::Divergence(format!(
            "{stage}: {m} at epoch {epoch} on {} turn {}",
            corpus.conversations[ex.conv].id,
            ex.turn + 1
        )),
        other => other,
    }
}

/// Shared minibatch loop. `step` accumulates gradients for one example and
/// returns its loss; `validate` scores the current parameters (higher is
/// better). Returns the best-scoring snapshot and the epoch log.
pub(crate) fn fit<M, S, V>(
    model: &mut M,
    examples: &mut [Example],
    plan: &TrainingPlan,
    corpus: &CorpusManifest,
    metric_name: &str,
    mut step: S,
    mut validate: V,
) -> Result<(M, f64, Vec<EpochRecord>)>
where
    M: Parameters + Clone,
    S: FnMut(&mut M, &Example, f32) -> Result<f64>,
    V: FnMut(&M) -> Result<f64>,
{
    plan.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyInput(format!("{} stage has no training utterances", plan.stage)));
    }
    let sched = plan.schedule();
    let mut opt = AdamW::new(plan.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut best: Option<(M, f64)> = None;
    let mut log = Vec::with_capacity(plan.epochs);
    let n_batches = examples.len().div_ceil(plan.batch_size);
    for epoch in 0..plan.epochs {
        examples.shuffle(&mut rng);
        let mut total = 0.0;
        let mut lr = 0.0;
        for (b, batch) in examples.chunks(plan.batch_size).enumerate() {
            model.zero_grad();
            let scale = 1.0 / batch.len() as f32;
            for ex in batch {
                let loss = step(model, ex, scale).map_err(|e| map_numeric(e, plan.stage, epoch + 1, corpus, ex))?;
                check_loss(loss, plan.stage, epoch + 1, corpus, ex)?;
                total += loss;
            }
            lr = sched.at(plan.position(epoch, b, n_batches));
            let mut params = model.params_mut();
            clip_grad_norm(&mut params, plan.clip_norm);
            opt.step(&mut params, lr as f32);
        }
        let score = validate(model)?;
        log.push(EpochRecord {
            stage: plan.stage,
            epoch: epoch + 1,
            loss: total / examples.len() as f64,
            lr,
            valid_metric: score,
            metric_name: metric_name.into(),
        });
        if best.as_ref().map_or(true, |(_, s)| score > *s) {
            best = Some((model.clone(), score));
        }
    }
    let (m, s) = best.expect("at least one epoch");
    Ok((m, s, log))
}

/// Greedy decoding of one utterance's features.
pub fn decode_features(model: &TransducerModel, feats: &Mat, history: Option<&[f32]>) -> Result<Hypothesis> {
    greedy_decode(model, feats, history, DEFAULT_EMISSION_CAP)
}

/// Corpus WER of an ASR-only model on one split (speed 1.0).
pub fn asr_wer(model: &TransducerModel, corpus: &CorpusManifest, store: &FeatureStore, split: Split) -> Result<f64> {
    let task = SluTask {
        kind: crate::slu::TaskKind::Intent,
        labels: Vec::new(),
    };
    let mut pairs = Vec::new();
    for (ci, c) in corpus.conversations.iter().enumerate() {
        if c.split != split {
            continue;
        }
        for (ti, t) in c.turns.iter().enumerate() {
            let hyp = decode_features(model, store.get(ci, ti, 1.0)?, None)?;
            pairs.push((t.transcript.clone(), parse_tokens(&hyp.tokens, &task).transcript));
        }
    }
    corpus_wer(pairs.iter().map(|(r, h)| (r.as_str(), h.as_str())))
}

fn asr_examples(corpus: &CorpusManifest, speeds: &[f64]) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for &speed in speeds {
        for (ci, c) in corpus.conversations.iter().enumerate() {
            if c.split != Split::Train {
                continue;
            }
            for (ti, t) in c.turns.iter().enumerate() {
                out.push(Example {
                    conv: ci,
                    turn: ti,
                    speed,
                    target: transcript_targets(&t.transcript)?,
                    history: None,
                });
            }
        }
    }
    Ok(out)
}

/// Transducer plus a CTC head on the encoder. With `encoder_only` the
/// predictor and joint are left out of the optimized parameters.
#[derive(Clone)]
struct CtcStage {
    model: TransducerModel,
    head: Linear,
    encoder_only: bool,
}

impl Parameters for CtcStage {
    fn params(&self) -> Vec<(String, &crate::nn::Param)> {
        let mut out: Vec<_> = self
            .model
            .params()
            .into_iter()
            .filter(|(n, _)| !self.encoder_only || n.starts_with("encoder"))
            .collect();
        out.extend(crate::nn::prefixed("ctc_head", self.head.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut crate::nn::Param)> {
        let Self {
            model,
            head,
            encoder_only,
        } = self;
        let mut out: Vec<_> = model
            .params_mut()
            .into_iter()
            .filter(|(n, _)| !*encoder_only || n.starts_with("encoder"))
            .collect();
        out.extend(crate::nn::prefixed("ctc_head", head.params_mut()));
        out
    }
}

/// Result of ASR pre-training.
pub struct AsrTraining {
    pub model: TransducerModel,
    pub best_valid_wer: f64,
    pub log: Vec<EpochRecord>,
}

/// CTC pre-training of the encoder (skipped when `ctc` is `None`), then
/// full transducer training; keeps the best-validation-WER parameters.
/// The CTC head carries over into the transducer stage when it uses an
/// auxiliary CTC loss.
pub fn pretrain_asr(
    corpus: &CorpusManifest,
    store: &FeatureStore,
    config: TransducerConfig,
    ctc: Option<&TrainingPlan>,
    rnnt: &TrainingPlan,
) -> Result<AsrTraining> {
    if !config.label_tokens.is_empty() || config.history_dim != 0 {
        return Err(Error::Config("ASR pre-training expects a plain 42-output model".into()));
    }
    if rnnt.stage != Stage::AsrRnnt || ctc.is_some_and(|p| p.stage != Stage::CtcPretrain) {
        return Err(Error::Config("ASR pre-training plans have the wrong stage".into()));
    }
    let model = TransducerModel::new(config, rnnt.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rnnt.seed ^ 0xc7c);
    let head = Linear::new(model.encoder_dim(), ASR_OUTPUTS, &mut rng);
    let mut stage = CtcStage {
        model,
        head,
        encoder_only: true,
    };
    let mut log = Vec::new();
    if let Some(plan) = ctc {
        let mut examples = asr_examples(corpus, &plan.speeds)?;
        let (best, _, stage_log) = fit(
            &mut stage,
            &mut examples,
            plan,
            corpus,
            "neg_ctc_loss",
            |s, ex, scale| {
                let feats = store.get(ex.conv, ex.turn, ex.speed)?;
                s.model.ctc_loss_and_grad(&mut s.head, feats, None, &ex.target, scale)
            },
            |s| ctc_valid_score(s, corpus, store),
        )?;
        log.extend(stage_log);
        stage = best;
        stage.zero_grad();
    }
    stage.encoder_only = false;
    let weight = rnnt.ctc_weight;
    let mut examples = asr_examples(corpus, &rnnt.speeds)?;
    let (best, score, stage_log) = if weight > 0.0 {
        let (b, score, l) = fit(
            &mut stage,
            &mut examples,
            rnnt,
            corpus,
            "neg_wer",
            |s, ex, scale| {
                let feats = store.get(ex.conv, ex.turn, ex.speed)?;
                let loss = s.model.rnnt_loss_and_grad(feats, None, &ex.target, scale)?;
                s.model.ctc_loss_and_grad(&mut s.head, feats, None, &ex.target, scale * weight)?;
                Ok(loss)
            },
            |s| Ok(-asr_wer(&s.model, corpus, store, Split::Valid)?),
        )?;
        (b.model, score, l)
    } else {
        let mut model = stage.model;
        fit(
            &mut model,
            &mut examples,
            rnnt,
            corpus,
            "neg_wer",
            |m, ex, scale| {
                let feats = store.get(ex.conv, ex.turn, ex.speed)?;
                m.rnnt_loss_and_grad(feats, None, &ex.target, scale)
            },
            |m| Ok(-asr_wer(m, corpus, store, Split::Valid)?),
        )?
    };
    log.extend(stage_log);
    let mut model = best;
    model.zero_grad();
    model.provenance = serde_json::json!({"stage": "asr", "corpus_seed": corpus.seed});
    Ok(AsrTraining {
        model,
        best_valid_wer: -score,
        log,
    })
}

/// Negative mean CTC loss on the validation split.
fn ctc_valid_score(stage: &CtcStage, corpus: &CorpusManifest, store: &FeatureStore) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (ci, c) in corpus.conversations.iter().enumerate() {
        if c.split != Split::Valid {
            continue;
        }
        for (ti, t) in c.turns.iter().enumerate() {
            let enc = stage.model.encode(store.get(ci, ti, 1.0)?, None)?;
            let mut lp = stage.head.forward(&enc);
            for r in 0..lp.rows {
                crate::nn::log_softmax_in_place(lp.row_mut(r));
            }
            let lp: Vec<f64> = lp.data.iter().map(|&v| v as f64).collect();
            total += crate::transducer::ctc_loss(&lp, ASR_OUTPUTS, &transcript_targets(&t.transcript)?, 0)?.loss;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { -total / n as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_validation() {
        assert!(TrainingPlan::full_slu().validate().is_ok());
        let bad = TrainingPlan {
            epochs: 0,
            ..TrainingPlan::desk(Stage::Slu)
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainingPlan {
            max_lr: 0.0,
            ..TrainingPlan::desk(Stage::Slu)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn plan_position_spans_horizon() {
        let p = TrainingPlan {
            schedule: Some(OneCycle::FULL),
            epochs: 10,
            ..TrainingPlan::desk(Stage::Slu)
        };
        assert_eq!(p.position(0, 0, 4), 0.0);
        assert_eq!(p.position(5, 0, 4), 10.0);
        assert_eq!(p.position(9, 2, 4), 19.0);
    }
}
