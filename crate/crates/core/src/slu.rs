//! SLU adaptation of a trained ASR transducer: label-token surgery on the
//! output side, history-embedding surgery on the input side, and the
//! target serialization that ties transcripts to semantic labels.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{DialogAct, Intent, Turn};
use crate::error::{Error, Result};
use crate::nn::{Mat, Parameters};
use crate::transducer::{output_char, transcript_targets, Hypothesis, TransducerModel, ASR_OUTPUTS, HISTORY_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    DialogAct,
    Intent,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::DialogAct => "dialog-act",
            TaskKind::Intent => "intent",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dialog-act" | "dialog_act" | "act" => Ok(TaskKind::DialogAct),
            "intent" => Ok(TaskKind::Intent),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// A task and the label tokens it appends to the output vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SluTask {
    pub kind: TaskKind,
    pub labels: Vec<String>,
}

impl SluTask {
    pub fn new(kind: TaskKind) -> Self {
        let labels = match kind {
            TaskKind::DialogAct => DialogAct::ALL.iter().map(|a| a.token()).collect(),
            TaskKind::Intent => Intent::ALL.iter().map(|i| i.token()).collect(),
        };
        Self { kind, labels }
    }

    pub fn dialog_act() -> Self {
        Self::new(TaskKind::DialogAct)
    }

    pub fn intent() -> Self {
        Self::new(TaskKind::Intent)
    }

    pub fn output_size(&self) -> usize {
        ASR_OUTPUTS + self.labels.len()
    }

    pub fn act_output(act: DialogAct) -> usize {
        ASR_OUTPUTS + act.index()
    }

    pub fn intent_output(intent: Intent) -> usize {
        ASR_OUTPUTS + intent.index()
    }
}

/// Transcript characters followed by the utterance's label tokens.
pub fn serialize_target(turn: &Turn, intent: Option<Intent>, task: &SluTask) -> Result<Vec<usize>> {
    let mut out = transcript_targets(&turn.transcript)?;
    match task.kind {
        TaskKind::DialogAct => {
            // BTreeSet iteration follows the canonical label order.
            out.extend(turn.dialog_acts.iter().map(|&a| SluTask::act_output(a)));
        }
        TaskKind::Intent => {
            let intent = intent.ok_or_else(|| Error::Contract("intent task requires an intent label".into()))?;
            out.push(SluTask::intent_output(intent));
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyTarget("transcript and labels are both empty".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedHypothesis {
    pub transcript: String,
    pub acts: BTreeSet<DialogAct>,
    pub intent: Option<Intent>,
    /// More than one intent token was emitted; the last one was kept.
    #[serde(default)]
    pub multiple_intents: bool,
}

/// Splits emitted outputs into transcript characters and label tokens.
/// Total: any interleaving partitions, unknown outputs are dropped.
pub fn parse_tokens(tokens: &[usize], task: &SluTask) -> ParsedHypothesis {
    let mut parsed = ParsedHypothesis::default();
    for &k in tokens {
        if let Some(c) = output_char(k) {
            parsed.transcript.push(c);
            continue;
        }
        if k < ASR_OUTPUTS || k >= task.output_size() {
            continue;
        }
        let idx = k - ASR_OUTPUTS;
        match task.kind {
            TaskKind::DialogAct => {
                parsed.acts.insert(DialogAct::from_index(idx).expect("index below label count"));
            }
            TaskKind::Intent => {
                if parsed.intent.is_some() {
                    parsed.multiple_intents = true;
                }
                parsed.intent = Intent::from_index(idx);
            }
        }
    }
    parsed
}

pub fn parse_hypothesis(hyp: &Hypothesis, task: &SluTask) -> ParsedHypothesis {
    parse_tokens(&hyp.tokens, task)
}

fn push_provenance(model: &mut TransducerModel, source: String, record: Value) {
    let mut prov = match std::mem::take(&mut model.provenance) {
        Value::Object(m) => m,
        Value::Null => serde_json::Map::new(),
        other => {
            let mut m = serde_json::Map::new();
            m.insert("previous".into(), other);
            m
        }
    };
    let entry = prov.entry("surgery").or_insert_with(|| Value::Array(Vec::new()));
    if let Value::Array(list) = entry {
        let mut record = record;
        record["source"] = Value::String(source);
        list.push(record);
    }
    model.provenance = Value::Object(prov);
}

fn append_rows(m: &Mat, extra: Mat) -> Mat {
    let mut data = m.data.clone();
    data.extend_from_slice(&extra.data);
    Mat::from_vec(m.rows + extra.rows, m.cols, data)
}

/// Adds the task's label tokens as new outputs and new prediction-network
/// embedding rows. Existing parameters are copied untouched.
pub fn extend_output_layer(model: &TransducerModel, task: &SluTask, seed: u64) -> Result<TransducerModel> {
    let mut config = model.config.clone();
    config.label_tokens.extend(task.labels.iter().cloned());
    config.validate()?;
    let extra = task.labels.len();
    let source = model.to_checkpoint().fingerprint();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = model.clone();
    out.config = config;

    let joint_dim = out.joint.out.input_dim();
    let bound = 1.0 / (joint_dim as f32).sqrt();
    let w = append_rows(&out.joint.out.weight.w, Mat::uniform(extra, joint_dim, bound, &mut rng));
    let b = append_rows(
        &Mat::from_vec(out.joint.out.output_dim(), 1, out.joint.out.bias.w.data.clone()),
        Mat::uniform(extra, 1, bound, &mut rng),
    );
    out.joint.out.weight = crate::nn::Param::new(w);
    out.joint.out.bias = crate::nn::Param::new(Mat::from_vec(1, b.rows, b.data));

    let dim = out.embedding.dim();
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let rows = Mat::from_vec(extra, dim, (0..extra * dim).map(|_| normal.sample(&mut rng)).collect());
    out.embedding.table = crate::nn::Param::new(append_rows(&out.embedding.table.w, rows));

    push_provenance(
        &mut out,
        source,
        json!({"op": "extend_output_layer", "task": task.kind.to_string(), "added_tokens": task.labels}),
    );
    out.zero_grad();
    Ok(out)
}

/// Widens the first encoder layer to accept an `extra_dim` history vector
/// appended to every frame. New input columns are randomly initialized.
pub fn extend_input_layer(model: &TransducerModel, extra_dim: usize, seed: u64) -> Result<TransducerModel> {
    if model.config.history_dim != 0 {
        return Err(Error::Contract("model input layer is already extended".into()));
    }
    if extra_dim == 0 {
        return Err(Error::Config("history dimension must be positive".into()));
    }
    let source = model.to_checkpoint().fingerprint();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = model.clone();
    out.config.history_dim = extra_dim;
    let first = &mut out.encoder[0];
    for lstm in [&mut first.fwd, &mut first.bwd] {
        let bound = 1.0 / (lstm.hidden as f32).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let old = &lstm.w_ih.w;
        let mut w = Mat::zeros(old.rows, old.cols + extra_dim);
        for r in 0..old.rows {
            let row = w.row_mut(r);
            row[..old.cols].copy_from_slice(old.row(r));
            for v in &mut row[old.cols..] {
                *v = dist.sample(&mut rng);
            }
        }
        lstm.w_ih = crate::nn::Param::new(w);
    }
    push_provenance(
        &mut out,
        source,
        json!({"op": "extend_input_layer", "extra_dim": extra_dim}),
    );
    out.zero_grad();
    Ok(out)
}

/// Both surgeries for a history-conditioned SLU model.
pub fn adapt(model: &TransducerModel, task: &SluTask, history: bool, seed: u64) -> Result<TransducerModel> {
    let m = extend_output_layer(model, task, seed)?;
    if history {
        extend_input_layer(&m, HISTORY_DIM, seed.wrapping_add(1))
    } else {
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusConfig, Role};
    use crate::transducer::TransducerConfig;
    use rand::Rng;

    fn turn(text: &str, acts: &[DialogAct]) -> Turn {
        Turn {
            index: 1,
            speaker: Role::User,
            transcript: text.into(),
            dialog_acts: acts.iter().copied().collect(),
            waveform_ref: String::new(),
        }
    }

    fn small_model() -> TransducerModel {
        TransducerModel::new(
            TransducerConfig {
                feature_dim: 10,
                encoder_layers: 2,
                encoder_hidden: 6,
                predictor_hidden: 5,
                embed_dim: 4,
                joint_dim: 7,
                ..TransducerConfig::desk()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn serialization_examples() {
        let t = serialize_target(&turn("hi", &[DialogAct::Greeting]), None, &SluTask::dialog_act()).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t[2], SluTask::act_output(DialogAct::Greeting));

        let t = serialize_target(&turn("pay bill", &[]), Some(Intent::PayBill), &SluTask::intent()).unwrap();
        assert_eq!(t.len(), 9);
        assert_eq!(t[8], SluTask::intent_output(Intent::PayBill));

        let t = serialize_target(
            &turn("ok", &[DialogAct::Response, DialogAct::Greeting]),
            None,
            &SluTask::dialog_act(),
        )
        .unwrap();
        assert_eq!(
            &t[2..],
            &[SluTask::act_output(DialogAct::Greeting), SluTask::act_output(DialogAct::Response)]
        );
        assert!(matches!(
            serialize_target(&turn("", &[]), None, &SluTask::dialog_act()),
            Err(Error::EmptyTarget(_))
        ));
    }

    #[test]
    fn parse_inverts_serialize_on_corpus() {
        let m = generate_corpus(5, &CorpusConfig::default()).unwrap();
        for task in [SluTask::dialog_act(), SluTask::intent()] {
            for conv in &m.conversations {
                for t in &conv.turns {
                    let toks = serialize_target(t, Some(conv.intent), &task).unwrap();
                    let p = parse_tokens(&toks, &task);
                    assert_eq!(p.transcript, t.transcript);
                    match task.kind {
                        TaskKind::DialogAct => assert_eq!(p.acts, t.dialog_acts),
                        TaskKind::Intent => assert_eq!(p.intent, Some(conv.intent)),
                    }
                }
            }
        }
    }

    #[test]
    fn parse_edge_cases() {
        let task = SluTask::intent();
        let p = parse_tokens(&[8, 1, 9], &task);
        assert!(p.acts.is_empty() && p.intent.is_none());
        let p = parse_tokens(
            &[SluTask::intent_output(Intent::PayBill), 3, SluTask::intent_output(Intent::CheckBalance)],
            &task,
        );
        assert_eq!(p.intent, Some(Intent::CheckBalance));
        assert!(p.multiple_intents);
        assert_eq!(p.transcript, "b");
    }

    #[test]
    fn output_surgery_sizes_and_exactness() {
        let m = small_model();
        let act = extend_output_layer(&m, &SluTask::dialog_act(), 1).unwrap();
        assert_eq!(act.outputs(), 58);
        assert_eq!(extend_output_layer(&m, &SluTask::intent(), 1).unwrap().outputs(), 50);
        assert!(matches!(
            extend_output_layer(&act, &SluTask::dialog_act(), 1),
            Err(Error::Config(_))
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let x = Mat::uniform(9, 7, 2.0, &mut rng);
            let before = m.joint.out.forward(&x);
            let after = act.joint.out.forward(&x);
            for r in 0..9 {
                assert_eq!(before.row(r), &after.row(r)[..42]);
            }
        }
        assert!(act.provenance["surgery"][0]["source"].is_string());
    }

    #[test]
    fn input_surgery_zero_history_matches() {
        let m = small_model();
        let h = extend_input_layer(&m, HISTORY_DIM, 2).unwrap();
        assert_eq!(h.config.input_dim(), 10 + 128);
        assert!(matches!(extend_input_layer(&h, HISTORY_DIM, 2), Err(Error::Contract(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Mat::uniform(6, 10, 1.0, &mut rng);
        let zero = vec![0.0; HISTORY_DIM];
        let a = m.encode(&x, None).unwrap();
        let b = h.encode(&x, Some(&zero)).unwrap();
        for (p, q) in a.data.iter().zip(&b.data) {
            assert!((p - q).abs() <= 1e-6);
        }
        let hist: Vec<f32> = (0..HISTORY_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_ne!(a, h.encode(&x, Some(&hist)).unwrap());
    }
}
