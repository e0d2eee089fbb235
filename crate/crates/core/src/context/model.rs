use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{render_history, HistorySpec, HistoryTurn, TokenSequence, Vocabulary};
use crate::corpus::{Conversation, CorpusManifest, DialogAct, Intent, Split};
use crate::error::{Error, Result};
use crate::eval::{dialog_act_f1, intent_accuracy, Rollup};
use crate::nn::transformer::TransformerEncoder;
use crate::nn::{clip_grad_norm, prefixed, sigmoid, softmax_in_place, AdamW, Checkpoint, Linear, Mat, Param, Parameters};
use crate::slu::TaskKind;
use crate::transducer::HISTORY_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff: usize,
    pub max_len: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            dim: 128,
            ff: 256,
            max_len: 256,
        }
    }
}

impl ContextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.ff == 0 || self.max_len < 4 {
            return Err(Error::Config("context encoder dimensions must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config("context width must divide evenly into heads".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    #[serde(default = "default_wd")]
    pub weight_decay: f32,
    #[serde(default)]
    pub seed: u64,
}

fn default_wd() -> f32 {
    0.01
}

impl ContextTrainConfig {
    /// Fine-tuning values for a pre-trained encoder.
    pub fn full() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 2e-5,
            weight_decay: 0.01,
            seed: 0,
        }
    }

    /// From-scratch training needs a far larger step size than fine-tuning.
    pub fn desk() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("context training needs epochs, batch and lr > 0".into()));
        }
        Ok(())
    }
}

/// Transformer encoder, tanh projection of the CLS state to 128 dims, and
/// a task head on top of the projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextModel {
    pub config: ContextConfig,
    pub task: TaskKind,
    pub spec: HistorySpec,
    pub vocab: Vocabulary,
    pub encoder: TransformerEncoder,
    pub proj: Linear,
    pub head: Linear,
}

/// Supervision for one training sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContextTarget {
    Intent(Intent),
    Acts(BTreeSet<DialogAct>),
}

impl ContextModel {
    pub fn new(config: ContextConfig, task: TaskKind, spec: HistorySpec, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = TransformerEncoder::new(
            vocab.len(),
            config.max_len,
            config.dim,
            config.heads,
            config.ff,
            config.layers,
            &mut rng,
        );
        let proj = Linear::new(config.dim, HISTORY_DIM, &mut rng);
        let head = Linear::new(HISTORY_DIM, Self::label_count(task), &mut rng);
        Ok(Self {
            config,
            task,
            spec,
            vocab,
            encoder,
            proj,
            head,
        })
    }

    pub fn label_count(task: TaskKind) -> usize {
        match task {
            TaskKind::Intent => Intent::ALL.len(),
            TaskKind::DialogAct => DialogAct::ALL.len(),
        }
    }

    /// Sequence for the current model's history spec and length budget.
    pub fn sequence(&self, previous: &[HistoryTurn], current: Option<&str>) -> TokenSequence {
        render_history(previous, current, &self.spec).to_sequence(&self.vocab, self.config.max_len)
    }

    fn check(&self, seq: &TokenSequence) -> Result<()> {
        if seq.len() > self.config.max_len {
            return Err(Error::Length {
                len: seq.len(),
                max: self.config.max_len,
            });
        }
        if seq.is_empty() {
            return Err(Error::EmptyInput("token sequence is empty".into()));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&i| i >= self.vocab.len()) {
            return Err(Error::Domain(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    /// 128-dim tanh projection of the CLS state.
    pub fn embed(&self, seq: &TokenSequence) -> Result<Vec<f32>> {
        self.check(seq)?;
        let (h, _) = self.encoder.forward(&seq.ids);
        let mut e = vec![0.0; HISTORY_DIM];
        self.proj.forward_vec(h.row(0), &mut e);
        e.iter_mut().for_each(|v| *v = v.tanh());
        Ok(e)
    }

    pub fn logits(&self, seq: &TokenSequence) -> Result<Vec<f32>> {
        let e = self.embed(seq)?;
        let mut z = vec![0.0; self.head.output_dim()];
        self.head.forward_vec(&e, &mut z);
        Ok(z)
    }

    /// Intent: softmax distribution. Dialog acts: independent probabilities.
    pub fn classify(&self, seq: &TokenSequence) -> Result<Vec<f32>> {
        let mut z = self.logits(seq)?;
        match self.task {
            TaskKind::Intent => softmax_in_place(&mut z),
            TaskKind::DialogAct => z.iter_mut().for_each(|v| *v = sigmoid(*v)),
        }
        Ok(z)
    }

    pub fn predict_intent(&self, seq: &TokenSequence) -> Result<Intent> {
        let p = self.classify(seq)?;
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        Intent::from_index(best).ok_or_else(|| Error::Contract("model is not an intent classifier".into()))
    }

    pub fn predict_acts(&self, seq: &TokenSequence) -> Result<BTreeSet<DialogAct>> {
        let p = self.classify(seq)?;
        Ok(p.iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.5)
            .filter_map(|(i, _)| DialogAct::from_index(i))
            .collect())
    }

    /// Embedding-extraction form `[CLS] c [SEP]` for the given history.
    pub fn embed_history(&self, previous: &[HistoryTurn]) -> Result<Vec<f32>> {
        self.embed(&self.sequence(previous, None))
    }

    /// Accumulates gradients for one example, scaled by `scale`.
    pub fn loss_and_grad(&mut self, seq: &TokenSequence, target: &ContextTarget, scale: f32) -> Result<f64> {
        self.check(seq)?;
        let (h, cache) = self.encoder.forward(&seq.ids);
        let cls = Mat::from_vec(1, self.config.dim, h.row(0).to_vec());
        let mut e = self.proj.forward(&cls);
        e.data.iter_mut().for_each(|v| *v = v.tanh());
        let z = self.head.forward(&e);
        let mut dz = Mat::zeros(1, z.cols);
        let loss = match (self.task, target) {
            (TaskKind::Intent, ContextTarget::Intent(intent)) => {
                let mut p = z.data.clone();
                softmax_in_place(&mut p);
                let k = intent.index();
                for (i, d) in dz.data.iter_mut().enumerate() {
                    *d = scale * (p[i] - if i == k { 1.0 } else { 0.0 });
                }
                -(p[k].max(f32::MIN_POSITIVE) as f64).ln()
            }
            (TaskKind::DialogAct, ContextTarget::Acts(acts)) => {
                let mut loss = 0.0;
                for (i, d) in dz.data.iter_mut().enumerate() {
                    let y = acts.iter().any(|a| a.index() == i);
                    let x = z.data[i] as f64;
                    // -log σ(x) = softplus(-x); -log(1-σ(x)) = softplus(x)
                    let softplus = |v: f64| v.max(0.0) + (-v.abs()).exp().ln_1p();
                    loss += if y { softplus(-x) } else { softplus(x) };
                    *d = scale * (sigmoid(z.data[i]) - if y { 1.0 } else { 0.0 });
                }
                loss
            }
            _ => return Err(Error::Contract("target kind does not match the model task".into())),
        };
        let de = self.head.backward(&e, &dz);
        let mut dpre = de;
        for (d, v) in dpre.data.iter_mut().zip(&e.data) {
            *d *= 1.0 - v * v;
        }
        let dcls = self.proj.backward(&cls, &dpre);
        let mut dh = Mat::zeros(h.rows, h.cols);
        dh.row_mut(0).copy_from_slice(&dcls.data);
        self.encoder.backward(&cache, &dh);
        Ok(loss)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(
            json!({
                "kind": "context",
                "config": self.config,
                "task": self.task,
                "spec": self.spec,
                "vocab": self.vocab,
                "vocab_hash": self.vocab.fingerprint(),
            }),
            self,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.config.get("kind").and_then(Value::as_str) != Some("context") {
            return Err(Error::Contract("checkpoint does not hold a context model".into()));
        }
        let config: ContextConfig = serde_json::from_value(ck.config["config"].clone())?;
        let task: TaskKind = serde_json::from_value(ck.config["task"].clone())?;
        let spec: HistorySpec = serde_json::from_value(ck.config["spec"].clone())?;
        let vocab: Vocabulary = serde_json::from_value(ck.config["vocab"].clone())?;
        let mut model = Self::new(config, task, spec, vocab, 0)?;
        ck.load_into(&mut model)?;
        Ok(model)
    }
}

impl Parameters for ContextModel {
    fn params(&self) -> Vec<(String, &Param)> {
        prefixed("encoder", self.encoder.params())
            .chain(prefixed("proj", self.proj.params()))
            .chain(prefixed("head", self.head.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let Self {
            encoder, proj, head, ..
        } = self;
        prefixed("encoder", encoder.params_mut())
            .chain(prefixed("proj", proj.params_mut()))
            .chain(prefixed("head", head.params_mut()))
            .collect()
    }
}

/// Reference-history embedding for turn `t` (1-based) under `spec`.
pub fn embed_context(model: &ContextModel, conversation: &Conversation, t: usize, spec: &HistorySpec) -> Result<Vec<f32>> {
    conversation.turn(t)?;
    let refs = HistoryTurn::reference(conversation);
    let seq = render_history(&refs[..t - 1], None, spec).to_sequence(&model.vocab, model.config.max_len);
    model.embed(&seq)
}

/// Exported embedding for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub conversation: String,
    pub turn: usize,
    pub embedding: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn write_jsonl(records: &[EmbeddingRecord], path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for r in records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f32,
    pub valid_metric: f64,
}

pub struct TrainedContext {
    pub model: ContextModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid: f64,
}

fn examples(corpus: &CorpusManifest, split: Split, task: TaskKind) -> Vec<(HistoryTurnsRef, ContextTarget)> {
    let mut out = Vec::new();
    for (ci, c) in corpus.conversations.iter().enumerate() {
        if c.split != split {
            continue;
        }
        for (ti, turn) in c.turns.iter().enumerate() {
            let target = match task {
                TaskKind::Intent => ContextTarget::Intent(c.intent),
                TaskKind::DialogAct => ContextTarget::Acts(turn.dialog_acts.clone()),
            };
            out.push(((ci, ti), target));
        }
    }
    out
}

type HistoryTurnsRef = (usize, usize);

fn training_sequence(model: &ContextModel, corpus: &CorpusManifest, (ci, ti): HistoryTurnsRef) -> TokenSequence {
    let conv = &corpus.conversations[ci];
    let refs = HistoryTurn::reference(conv);
    model.sequence(&refs[..ti], Some(&conv.turns[ti].transcript))
}

/// Utterance-level accuracy (intent) or micro-F1 (acts) on a split, using
/// the fine-tuning sequence form.
pub fn evaluate_context(model: &ContextModel, corpus: &CorpusManifest, split: Split) -> Result<f64> {
    let items = examples(corpus, split, model.task);
    match model.task {
        TaskKind::Intent => {
            let mut refs = Vec::new();
            let mut hyps = Vec::new();
            for (r, target) in &items {
                if let ContextTarget::Intent(i) = target {
                    refs.push(*i);
                    hyps.push(Some(model.predict_intent(&training_sequence(model, corpus, *r))?));
                }
            }
            intent_accuracy(&refs, &hyps, None, Rollup::Utterance)
        }
        TaskKind::DialogAct => {
            let mut refs = Vec::new();
            let mut hyps = Vec::new();
            for (r, target) in &items {
                if let ContextTarget::Acts(a) = target {
                    refs.push(a.clone());
                    hyps.push(model.predict_acts(&training_sequence(model, corpus, *r))?);
                }
            }
            dialog_act_f1(&refs, &hyps)
        }
    }
}

/// Trains on the train split with the fine-tuning form and keeps the epoch
/// with the best validation metric.
pub fn train_context_model(
    corpus: &CorpusManifest,
    task: TaskKind,
    spec: HistorySpec,
    config: ContextConfig,
    hyper: &ContextTrainConfig,
) -> Result<TrainedContext> {
    hyper.validate()?;
    let vocab = Vocabulary::from_corpus(corpus);
    let mut model = ContextModel::new(config, task, spec, vocab, hyper.seed)?;
    let mut train = examples(corpus, Split::Train, task);
    if train.is_empty() {
        return Err(Error::EmptyInput("training split has no utterances".into()));
    }
    if corpus.split(Split::Valid).next().is_none() {
        return Err(Error::EmptyInput("validation split has no conversations".into()));
    }
    let mut opt = AdamW::new(hyper.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed_c0de);
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);
    let mut log = Vec::with_capacity(hyper.epochs);
    for epoch in 1..=hyper.epochs {
        train.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in train.chunks(hyper.batch_size) {
            model.zero_grad();
            let scale = 1.0 / batch.len() as f32;
            for (r, target) in batch {
                let seq = training_sequence(&model, corpus, *r);
                total += model.loss_and_grad(&seq, target, scale)?;
            }
            let mut params = model.params_mut();
            clip_grad_norm(&mut params, 5.0);
            opt.step(&mut params, hyper.learning_rate);
        }
        let loss = total / train.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("context loss became {loss} in epoch {epoch}")));
        }
        let valid = evaluate_context(&model, corpus, Split::Valid)?;
        log.push(EpochLog {
            epoch,
            loss,
            lr: hyper.learning_rate,
            valid_metric: valid,
        });
        if valid > best.2 {
            best = (model.clone(), epoch, valid);
        }
    }
    Ok(TrainedContext {
        model: best.0,
        log,
        best_epoch: best.1,
        best_valid: best.2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::build_history_sequence;
    use crate::corpus::{generate_corpus, CorpusConfig};

    fn tiny_config() -> ContextConfig {
        ContextConfig {
            layers: 1,
            heads: 2,
            dim: 16,
            ff: 32,
            max_len: 64,
        }
    }

    fn corpus() -> CorpusManifest {
        generate_corpus(3, &CorpusConfig::default()).unwrap()
    }

    #[test]
    fn intent_loss_matches_definition() {
        let m = corpus();
        let vocab = Vocabulary::from_corpus(&m);
        let c = &m.conversations[0];
        let mut model = ContextModel::new(tiny_config(), TaskKind::Intent, HistorySpec::speaker_text(), vocab, 1).unwrap();
        let seq = model.sequence(&HistoryTurn::reference(c)[..1], Some(&c.turns[1].transcript));
        let p = model.classify(&seq).unwrap();
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        let loss = model.loss_and_grad(&seq, &ContextTarget::Intent(Intent::PayBill), 1.0).unwrap();
        assert!((loss + (p[Intent::PayBill.index()] as f64).ln()).abs() < 1e-5);
    }

    #[test]
    fn act_loss_matches_definition() {
        let m = corpus();
        let vocab = Vocabulary::from_corpus(&m);
        let mut model = ContextModel::new(tiny_config(), TaskKind::DialogAct, HistorySpec::current_only(), vocab, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        model.head = Linear::new(HISTORY_DIM, 16, &mut rng);
        let seq = model.sequence(&[], Some("hello there"));
        let z = model.logits(&seq).unwrap();
        let acts: BTreeSet<_> = [DialogAct::Greeting].into_iter().collect();
        let expected: f64 = z
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let p = 1.0 / (1.0 + (-(v as f64)).exp());
                if i == DialogAct::Greeting.index() {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum();
        let got = model.loss_and_grad(&seq, &ContextTarget::Acts(acts), 1.0).unwrap();
        assert!((got - expected).abs() < 1e-6);
    }

    #[test]
    fn intent_probabilities_normalized_and_length_checked() {
        let m = corpus();
        let vocab = Vocabulary::from_corpus(&m);
        let mut model = ContextModel::new(tiny_config(), TaskKind::Intent, HistorySpec::text(), vocab, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        model.head = Linear::new(HISTORY_DIM, 8, &mut rng);
        for c in m.conversations.iter().filter(|c| c.turns.len() > 2).take(10) {
            let seq = model.sequence(&HistoryTurn::reference(c)[..2], Some(&c.turns[2].transcript));
            let p = model.classify(&seq).unwrap();
            assert!((p.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let long = TokenSequence { ids: vec![2; 65] };
        assert!(matches!(model.classify(&long), Err(Error::Length { len: 65, max: 64 })));
    }

    #[test]
    fn embeddings_shape_and_determinism() {
        let m = corpus();
        let vocab = Vocabulary::from_corpus(&m);
        let spec = HistorySpec::speaker_text();
        let model = ContextModel::new(tiny_config(), TaskKind::Intent, spec, vocab, 4).unwrap();
        let first: Vec<_> = m
            .conversations
            .iter()
            .take(5)
            .map(|c| embed_context(&model, c, 1, &spec).unwrap())
            .collect();
        assert!(first.iter().all(|e| e.len() == 128 && e == &first[0]));
        let c = &m.conversations[3];
        let a = embed_context(&model, c, 3, &spec).unwrap();
        let mut other = c.clone();
        other.turns[2].transcript = "something else entirely".into();
        other.turns.truncate(3);
        assert_eq!(a, embed_context(&model, &other, 3, &spec).unwrap());
        assert!(a.iter().all(|v| v.is_finite()));
        let r = build_history_sequence(c, 3, &spec, false).unwrap();
        assert_eq!(model.embed(&r.to_sequence(&model.vocab, 64)).unwrap(), a);
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let m = corpus();
        let vocab = Vocabulary::from_corpus(&m);
        let mut model = ContextModel::new(tiny_config(), TaskKind::Intent, HistorySpec::text(), vocab, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        model.head = Linear::new(HISTORY_DIM, 8, &mut rng);
        let seq = model.sequence(&[], Some("i want to pay my bill"));
        let target = ContextTarget::Intent(Intent::PayBill);
        model.zero_grad();
        model.loss_and_grad(&seq, &target, 1.0).unwrap();
        let g = model.proj.weight.g.data.clone();
        let eps = 1e-2;
        for i in (0..g.len()).step_by(97) {
            let mut a = model.clone();
            a.proj.weight.w.data[i] += eps;
            let mut b = model.clone();
            b.proj.weight.w.data[i] -= eps;
            let fd = (a.loss_and_grad(&seq, &target, 1.0).unwrap() - b.loss_and_grad(&seq, &target, 1.0).unwrap())
                / (2.0 * eps as f64);
            assert!((fd - g[i] as f64).abs() < 1e-3 + 2e-2 * fd.abs());
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = corpus();
        let model = ContextModel::new(tiny_config(), TaskKind::DialogAct, HistorySpec::speaker_acts(), Vocabulary::from_corpus(&m), 6).unwrap();
        let back = ContextModel::from_checkpoint(&model.to_checkpoint()).unwrap();
        assert_eq!(back, model);
    }
}
