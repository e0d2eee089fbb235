//! Dialog-history serialization and the transformer context encoder that
//! turns a history into a fixed 128-dim embedding.

mod model;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Conversation, CorpusManifest, DialogAct, Role, Split};
use crate::error::{Error, Result};

pub use model::{
    embed_context, evaluate_context, train_context_model, ContextConfig, ContextModel, ContextTarget, ContextTrainConfig,
    EmbeddingRecord, EpochLog,
    TrainedContext,
};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

/// Word vocabulary plus the marker, role and dialog-act tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    pub fn special_tokens() -> Vec<String> {
        let mut out: Vec<String> = [PAD, UNK, CLS, SEP, Role::User.token(), Role::Agent.token()]
            .iter()
            .map(|s| s.to_string())
            .collect();
        out.extend(DialogAct::ALL.iter().map(|a| a.token()));
        out
    }

    /// Special tokens followed by the sorted words of the given transcripts.
    pub fn from_words<'a>(transcripts: impl IntoIterator<Item = &'a str>) -> Self {
        let specials = Self::special_tokens();
        let words: BTreeSet<&str> = transcripts
            .into_iter()
            .flat_map(str::split_whitespace)
            .filter(|w| !specials.iter().any(|s| s == w))
            .collect();
        let mut tokens = specials;
        tokens.extend(words.into_iter().map(String::from));
        tokens.into()
    }

    /// Built from the training split only, so held-out words map to UNK.
    pub fn from_corpus(corpus: &CorpusManifest) -> Self {
        Self::from_words(
            corpus
                .split(Split::Train)
                .flat_map(|c| c.turns.iter().map(|t| t.transcript.as_str())),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.index[UNK])
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < Self::special_tokens().len()
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0]);
        }
        format!("{:x}", h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Window {
    All,
    Last(usize),
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::All => f.write_str("all"),
            Window::Last(k) => write!(f, "last-{k}"),
        }
    }
}

impl FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(Window::All);
        }
        s.strip_prefix("last-")
            .and_then(|k| k.parse().ok())
            .filter(|&k| k > 0)
            .map(Window::Last)
            .ok_or_else(|| Error::Config(format!("bad history window `{s}`")))
    }
}

impl Serialize for Window {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Window {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which parts of the preceding turns are rendered into the history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistorySpec {
    #[serde(default)]
    pub use_speaker: bool,
    #[serde(default)]
    pub use_history_text: bool,
    #[serde(default)]
    pub use_dialog_acts: bool,
    #[serde(default = "default_window")]
    pub window: Window,
}

fn default_window() -> Window {
    Window::All
}

impl HistorySpec {
    pub const fn current_only() -> Self {
        Self {
            use_speaker: false,
            use_history_text: false,
            use_dialog_acts: false,
            window: Window::All,
        }
    }

    pub const fn text() -> Self {
        Self {
            use_history_text: true,
            ..Self::current_only()
        }
    }

    pub const fn speaker_text() -> Self {
        Self {
            use_speaker: true,
            use_history_text: true,
            ..Self::current_only()
        }
    }

    pub const fn speaker_acts() -> Self {
        Self {
            use_speaker: true,
            use_dialog_acts: true,
            ..Self::current_only()
        }
    }

    pub const fn speaker_text_acts() -> Self {
        Self {
            use_speaker: true,
            use_history_text: true,
            use_dialog_acts: true,
            window: Window::All,
        }
    }

    pub fn with_window(self, window: Window) -> Self {
        Self { window, ..self }
    }

    /// Whether any preceding turn contributes tokens.
    pub fn uses_history(&self) -> bool {
        self.use_history_text || self.use_dialog_acts
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_speaker && !self.uses_history() {
            return Err(Error::Config(
                "speaker tokens need history text or dialog acts to attach to".into(),
            ));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        if !self.uses_history() {
            return "current-utterance".into();
        }
        let mut parts = Vec::new();
        if self.use_speaker {
            parts.push("speaker");
        }
        if self.use_history_text {
            parts.push("history");
        }
        if self.use_dialog_acts {
            parts.push("acts");
        }
        let mut s = parts.join("+");
        if self.window != Window::All {
            s.push_str(&format!("/{}", self.window));
        }
        s
    }
}

/// One preceding turn as seen by the history renderer; either the
/// reference or a decoded version of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryTurn {
    pub speaker: Role,
    pub transcript: String,
    pub acts: BTreeSet<DialogAct>,
}

impl HistoryTurn {
    pub fn reference(conv: &Conversation) -> Vec<HistoryTurn> {
        conv.turns
            .iter()
            .map(|t| HistoryTurn {
                speaker: t.speaker,
                transcript: t.transcript.clone(),
                acts: t.dialog_acts.clone(),
            })
            .collect()
    }
}

/// Untruncated token strings: history block and optional current utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedHistory {
    pub history: Vec<String>,
    pub current: Option<Vec<String>>,
}

/// Renders `previous` (turns 1..t−1, oldest first) under `spec`.
pub fn render_history(previous: &[HistoryTurn], current: Option<&str>, spec: &HistorySpec) -> RenderedHistory {
    let start = match spec.window {
        Window::All => 0,
        Window::Last(k) => previous.len().saturating_sub(k),
    };
    let mut history = Vec::new();
    if spec.uses_history() {
        for turn in &previous[start..] {
            if spec.use_speaker {
                history.push(turn.speaker.token().to_string());
            }
            if spec.use_history_text {
                history.extend(turn.transcript.split_whitespace().map(String::from));
            }
            if spec.use_dialog_acts {
                history.extend(turn.acts.iter().map(|a| a.token()));
            }
        }
    }
    RenderedHistory {
        history,
        current: current.map(|c| c.split_whitespace().map(String::from).collect()),
    }
}

/// Token ids ready for the encoder; always begins with CLS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl RenderedHistory {
    /// `[CLS] c [SEP]` or `[CLS] c [SEP] u [SEP]`, cut to `max_len` by
    /// dropping the oldest history tokens. If the current utterance alone
    /// does not fit, its tail is cut as a last resort.
    pub fn to_sequence(&self, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
        let fixed = 2 + usize::from(self.current.is_some());
        let cur_len = self.current.as_ref().map_or(0, Vec::len);
        let budget = max_len.saturating_sub(fixed);
        let keep_cur = cur_len.min(budget);
        let keep_hist = self.history.len().min(budget - keep_cur);
        let mut ids = Vec::with_capacity(fixed + keep_hist + keep_cur);
        ids.push(vocab.id(CLS));
        ids.extend(self.history[self.history.len() - keep_hist..].iter().map(|t| vocab.id(t)));
        ids.push(vocab.id(SEP));
        if let Some(cur) = &self.current {
            ids.extend(cur[..keep_cur].iter().map(|t| vocab.id(t)));
            ids.push(vocab.id(SEP));
        }
        TokenSequence { ids }
    }

    pub fn tokens(&self) -> Vec<String> {
        let mut out = vec![CLS.to_string()];
        out.extend(self.history.iter().cloned());
        out.push(SEP.into());
        if let Some(cur) = &self.current {
            out.extend(cur.iter().cloned());
            out.push(SEP.into());
        }
        out
    }
}

/// Reference rendering for turn `t` (1-based) of `conv`.
pub fn build_history_sequence(
    conv: &Conversation,
    t: usize,
    spec: &HistorySpec,
    include_current: bool,
) -> Result<RenderedHistory> {
    let turn = conv.turn(t)?;
    let refs = HistoryTurn::reference(conv);
    let current = include_current.then_some(turn.transcript.as_str());
    Ok(render_history(&refs[..t - 1], current, spec))
}
