use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{decode_features, fit, EpochRecord, Example, FeatureStore, TrainingPlan};
use crate::context::{render_history, ContextModel, HistoryTurn};
use crate::corpus::{CorpusManifest, DialogAct, Intent, Split};
use crate::error::{Error, Result};
use crate::eval::{corpus_wer, dialog_act_f1, intent_accuracy, Rollup};
use crate::nn::Parameters;
use crate::slu::{parse_tokens, serialize_target, ParsedHypothesis, SluTask, TaskKind};
use crate::transducer::{TransducerModel, HISTORY_DIM};

/// Where history embeddings come from: references or baseline decodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HistorySource {
    #[serde(rename = "REF")]
    Ref,
    #[serde(rename = "DEC")]
    Dec,
}

impl fmt::Display for HistorySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HistorySource::Ref => "REF",
            HistorySource::Dec => "DEC",
        })
    }
}

/// Train/test history sources. Both absent means the no-history baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSpec {
    #[serde(default)]
    pub train: Option<HistorySource>,
    #[serde(default)]
    pub test: Option<HistorySource>,
    /// Fingerprint of the baseline checkpoint used for DEC decoding.
    #[serde(default)]
    pub baseline: Option<String>,
}

impl RegimeSpec {
    pub fn baseline() -> Self {
        Self {
            train: None,
            test: None,
            baseline: None,
        }
    }

    pub fn new(train: HistorySource, test: HistorySource, baseline: Option<String>) -> Self {
        Self {
            train: Some(train),
            test: Some(test),
            baseline,
        }
    }

    pub fn uses_history(&self) -> bool {
        self.train.is_some()
    }

    pub fn uses_dec(&self) -> bool {
        self.train == Some(HistorySource::Dec) || self.test == Some(HistorySource::Dec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.is_some() != self.test.is_some() {
            return Err(Error::Regime("train and test history sources must both be set or both absent".into()));
        }
        if self.uses_dec() && self.baseline.is_none() {
            return Err(Error::Regime("a DEC history source needs a baseline checkpoint".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match (self.train, self.test) {
            (Some(a), Some(b)) => format!("{a}/{b}"),
            _ => String::new(),
        }
    }
}

/// A baseline decode of one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedTurn {
    pub conversation: String,
    /// 1-based turn index.
    pub turn: usize,
    pub transcript: String,
    pub acts: BTreeSet<DialogAct>,
    #[serde(default)]
    pub intent: Option<Intent>,
}

/// Decoded transcripts and labels keyed by (conversation id, turn).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DecodedHistoryCache {
    pub baseline: String,
    pub entries: BTreeMap<(String, usize), DecodedTurn>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    baseline: String,
    #[serde(flatten)]
    turn: DecodedTurn,
}

impl DecodedHistoryCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, conversation: &str, turn: usize) -> Option<&DecodedTurn> {
        self.entries.get(&(conversation.to_string(), turn))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for turn in self.entries.values() {
            let line = CacheLine {
                baseline: self.baseline.clone(),
                turn: turn.clone(),
            };
            serde_json::to_writer(&mut f, &line)?;
            f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut cache = Self::default();
        for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CacheLine =
                serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            if i > 0 && rec.baseline != cache.baseline {
                return Err(Error::format(path, "records from more than one baseline"));
            }
            cache.baseline = rec.baseline;
            cache.entries.insert((rec.turn.conversation.clone(), rec.turn.turn), rec.turn);
        }
        Ok(cache)
    }
}

/// Anything that can produce a hypothesis for a corpus utterance.
pub trait UtteranceDecoder {
    fn id(&self) -> String;
    /// `conv` and `turn` are 0-based positions in the manifest.
    fn decode(&self, conv: usize, turn: usize) -> Result<ParsedHypothesis>;
}

/// The no-history baseline transducer.
pub struct TransducerDecoder<'a> {
    pub model: &'a TransducerModel,
    pub store: &'a FeatureStore,
    pub task: SluTask,
}

impl UtteranceDecoder for TransducerDecoder<'_> {
    fn id(&self) -> String {
        self.model.to_checkpoint().fingerprint()
    }

    fn decode(&self, conv: usize, turn: usize) -> Result<ParsedHypothesis> {
        if self.model.config.history_dim != 0 {
            return Err(Error::Contract("history decoding needs a no-history baseline".into()));
        }
        let hyp = decode_features(self.model, self.store.get(conv, turn, 1.0)?, None)?;
        Ok(parse_tokens(&hyp.tokens, &self.task))
    }
}

/// Returns the references verbatim.
pub struct OracleDecoder<'a> {
    pub corpus: &'a CorpusManifest,
    pub task: SluTask,
}

impl UtteranceDecoder for OracleDecoder<'_> {
    fn id(&self) -> String {
        "oracle".into()
    }

    fn decode(&self, conv: usize, turn: usize) -> Result<ParsedHypothesis> {
        let c = &self.corpus.conversations[conv];
        let t = &c.turns[turn];
        Ok(ParsedHypothesis {
            transcript: t.transcript.clone(),
            acts: t.dialog_acts.clone(),
            intent: (self.task.kind == TaskKind::Intent).then_some(c.intent),
            multiple_intents: false,
        })
    }
}

/// Decodes every utterance of `splits` in conversation order.
pub fn build_decoded_histories(
    decoder: &dyn UtteranceDecoder,
    corpus: &CorpusManifest,
    splits: &[Split],
) -> Result<DecodedHistoryCache> {
    let mut cache = DecodedHistoryCache {
        baseline: decoder.id(),
        entries: BTreeMap::new(),
    };
    for (ci, c) in corpus.conversations.iter().enumerate() {
        if !splits.contains(&c.split) {
            continue;
        }
        for (ti, t) in c.turns.iter().enumerate() {
            let p = decoder.decode(ci, ti)?;
            cache.entries.insert(
                (c.id.clone(), t.index),
                DecodedTurn {
                    conversation: c.id.clone(),
                    turn: t.index,
                    transcript: p.transcript,
                    acts: p.acts,
                    intent: p.intent,
                },
            );
        }
    }
    Ok(cache)
}

/// Held-out-fold decoding for the training split: each fold is decoded by
/// a baseline trained without it, so DEC training histories carry realistic
/// errors. Other splits are decoded by `full`.
pub fn held_out_fold_histories<F>(
    corpus: &CorpusManifest,
    full: &dyn UtteranceDecoder,
    folds: usize,
    mut train_baseline: F,
) -> Result<DecodedHistoryCache>
where
    F: FnMut(&CorpusManifest) -> Result<Box<dyn UtteranceDecoder>>,
{
    if folds < 2 {
        return Err(Error::Config("held-out decoding needs at least two folds".into()));
    }
    let mut cache = build_decoded_histories(full, corpus, &[Split::Valid, Split::Test])?;
    let train: Vec<usize> = (0..corpus.conversations.len())
        .filter(|&i| corpus.conversations[i].split == Split::Train)
        .collect();
    let mut ids = vec![cache.baseline.clone()];
    for k in 0..folds {
        let held: BTreeSet<usize> = train.iter().copied().skip(k).step_by(folds).collect();
        let mut sub = corpus.clone();
        for &i in &held {
            sub.conversations[i].split = Split::Test;
        }
        let decoder = train_baseline(&sub)?;
        ids.push(decoder.id());
        for &ci in &held {
            let c = &corpus.conversations[ci];
            for (ti, t) in c.turns.iter().enumerate() {
                let p = decoder.decode(ci, ti)?;
                cache.entries.insert(
                    (c.id.clone(), t.index),
                    DecodedTurn {
                        conversation: c.id.clone(),
                        turn: t.index,
                        transcript: p.transcript,
                        acts: p.acts,
                        intent: p.intent,
                    },
                );
            }
        }
    }
    cache.baseline = ids.join("+");
    Ok(cache)
}

/// Context embedding per (conversation position, turn position).
pub type HistoryEmbeddings = BTreeMap<(usize, usize), Vec<f32>>;

/// Embeds the history preceding every utterance of `splits`. DEC histories
/// take transcripts and acts from `cache` and speaker roles from the corpus.
pub fn history_embeddings(
    context: &ContextModel,
    corpus: &CorpusManifest,
    source: HistorySource,
    cache: Option<&DecodedHistoryCache>,
    splits: &[Split],
) -> Result<HistoryEmbeddings> {
    let mut out = BTreeMap::new();
    for (ci, c) in corpus.conversations.iter().enumerate() {
        if !splits.contains(&c.split) {
            continue;
        }
        let turns: Vec<HistoryTurn> = match source {
            HistorySource::Ref => HistoryTurn::reference(c),
            HistorySource::Dec => {
                let cache = cache.ok_or_else(|| Error::Regime("DEC histories need a decoded-history cache".into()))?;
                c.turns
                    .iter()
                    .map(|t| {
                        let d = cache.get(&c.id, t.index).ok_or_else(|| {
                            Error::Regime(format!("decoded-history cache has no entry for {} turn {}", c.id, t.index))
                        })?;
                        Ok(HistoryTurn {
                            speaker: t.speaker,
                            transcript: d.transcript.clone(),
                            acts: d.acts.clone(),
                        })
                    })
                    .collect::<Result<_>>()?
            }
        };
        for ti in 0..c.turns.len() {
            let seq = render_history(&turns[..ti], None, &context.spec).to_sequence(&context.vocab, context.config.max_len);
            out.insert((ci, ti), context.embed(&seq)?);
        }
    }
    Ok(out)
}

/// Per-utterance SLU output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub conversation: String,
    pub turn: usize,
    pub reference: String,
    #[serde(flatten)]
    pub parsed: ParsedHypothesis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SluEvaluation {
    pub metric_name: String,
    pub metric: f64,
    pub wer: f64,
    pub per_conversation: BTreeMap<String, f64>,
    pub utterances: Vec<UtteranceResult>,
}

/// Decodes `split` and scores the task metric and WER.
pub fn evaluate_slu(
    model: &TransducerModel,
    corpus: &CorpusManifest,
    store: &FeatureStore,
    task: &SluTask,
    split: Split,
    histories: Option<&HistoryEmbeddings>,
) -> Result<SluEvaluation> {
    let mut utterances = Vec::new();
    let mut ref_acts = Vec::new();
    let mut ref_intents = Vec::new();
    let mut conv_ids = Vec::new();
    for (ci, c) in corpus.conversations.iter().enumerate() {
        if c.split != split {
            continue;
        }
        for (ti, t) in c.turns.iter().enumerate() {
            let history = match histories {
                Some(h) => Some(
                    h.get(&(ci, ti))
                        .ok_or_else(|| Error::Regime(format!("no history embedding for {} turn {}", c.id, t.index)))?
                        .as_slice(),
                ),
                None => None,
            };
            let hyp = decode_features(model, store.get(ci, ti, 1.0)?, history)?;
            utterances.push(UtteranceResult {
                conversation: c.id.clone(),
                turn: t.index,
                reference: t.transcript.clone(),
                parsed: parse_tokens(&hyp.tokens, task),
            });
            ref_acts.push(t.dialog_acts.clone());
            ref_intents.push(c.intent);
            conv_ids.push(c.id.clone());
        }
    }
    if utterances.is_empty() {
        return Err(Error::EmptyInput(format!("{split} split has no utterances")));
    }
    let wer = corpus_wer(utterances.iter().map(|u| (u.reference.as_str(), u.parsed.transcript.as_str())))?;
    let score = |idx: &[usize]| -> Result<f64> {
        match task.kind {
            TaskKind::Intent => intent_accuracy(
                &idx.iter().map(|&i| ref_intents[i]).collect::<Vec<_>>(),
                &idx.iter().map(|&i| utterances[i].parsed.intent).collect::<Vec<_>>(),
                None,
                Rollup::Utterance,
            ),
            TaskKind::DialogAct => dialog_act_f1(
                &idx.iter().map(|&i| ref_acts[i].clone()).collect::<Vec<_>>(),
                &idx.iter().map(|&i| utterances[i].parsed.acts.clone()).collect::<Vec<_>>(),
            ),
        }
    };
    let all: Vec<usize> = (0..utterances.len()).collect();
    let metric = score(&all)?;
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, id) in conv_ids.iter().enumerate() {
        groups.entry(id).or_default().push(i);
    }
    let mut per_conversation = BTreeMap::new();
    for (id, idx) in groups {
        per_conversation.insert(id.to_string(), score(&idx)?);
    }
    Ok(SluEvaluation {
        metric_name: match task.kind {
            TaskKind::Intent => "accuracy".into(),
            TaskKind::DialogAct => "f1".into(),
        },
        metric,
        wer,
        per_conversation,
        utterances,
    })
}

pub struct SluTraining {
    pub model: TransducerModel,
    pub best_valid: f64,
    pub log: Vec<EpochRecord>,
}

/// Trains a surgically adapted model on serialized SLU targets. History
/// regimes embed each utterance's preceding turns with `context`; model
/// selection on the validation split uses the regime's test-side source.
#[allow(clippy::too_many_arguments)]
pub fn train_slu(
    model: &TransducerModel,
    corpus: &CorpusManifest,
    store: &FeatureStore,
    task: &SluTask,
    regime: &RegimeSpec,
    context: Option<&ContextModel>,
    cache: Option<&DecodedHistoryCache>,
    plan: &TrainingPlan,
) -> Result<SluTraining> {
    regime.validate()?;
    let n = model.config.label_tokens.len();
    if n < task.labels.len() || model.config.label_tokens[n - task.labels.len()..] != task.labels[..] {
        return Err(Error::Contract("model output layer does not carry this task's labels".into()));
    }
    let (train_h, valid_h) = match (regime.train, regime.test) {
        (Some(train_src), Some(test_src)) => {
            if model.config.history_dim != HISTORY_DIM {
                return Err(Error::Contract("history regime needs an input-extended model".into()));
            }
            let context = context.ok_or_else(|| Error::Regime("history regime needs a context model".into()))?;
            if regime.uses_dec() && cache.is_none() {
                return Err(Error::Regime("DEC regime needs a decoded-history cache".into()));
            }
            (
                Some(history_embeddings(context, corpus, train_src, cache, &[Split::Train])?),
                Some(history_embeddings(context, corpus, test_src, cache, &[Split::Valid])?),
            )
        }
        _ => {
            if model.config.history_dim != 0 {
                return Err(Error::Contract("baseline regime expects a model without history inputs".into()));
            }
            (None, None)
        }
    };
    let mut examples = Vec::new();
    for &speed in &plan.speeds {
        for (ci, c) in corpus.conversations.iter().enumerate() {
            if c.split != Split::Train {
                continue;
            }
            for (ti, t) in c.turns.iter().enumerate() {
                examples.push(Example {
                    conv: ci,
                    turn: ti,
                    speed,
                    target: serialize_target(t, Some(c.intent), task)?,
                    history: train_h.as_ref().map(|h| h[&(ci, ti)].clone()),
                });
            }
        }
    }
    let mut m = model.clone();
    m.zero_grad();
    let metric = match task.kind {
        TaskKind::Intent => "accuracy",
        TaskKind::DialogAct => "f1",
    };
    let (mut best, score, log) = fit(
        &mut m,
        &mut examples,
        plan,
        corpus,
        metric,
        |m, ex, scale| {
            let feats = store.get(ex.conv, ex.turn, ex.speed)?;
            m.rnnt_loss_and_grad(feats, ex.history.as_deref(), &ex.target, scale)
        },
        |m| Ok(evaluate_slu(m, corpus, store, task, Split::Valid, valid_h.as_ref())?.metric),
    )?;
    best.zero_grad();
    Ok(SluTraining {
        model: best,
        best_valid: score,
        log,
    })
}
