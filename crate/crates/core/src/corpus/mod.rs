//! Synthetic banking-dialog corpus: data model, generator, persistence.

pub mod audio;
mod generate;
pub mod labels;
pub mod normalize;

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::Waveform;

pub use audio::{perturb_speed, synthesize_waveform, Synthesizer, SPEED_FACTORS};
pub use generate::{generate_corpus, intent_keywords};
pub use labels::{DialogAct, Intent};
pub use normalize::{normalize_transcript, ALPHABET};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Agent,
}

impl Role {
    pub fn token(self) -> &'static str {
        match self {
            Role::User => "<user>",
            Role::Agent => "<agent>",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    /// 1-based position within the conversation.
    pub index: usize,
    pub speaker: Role,
    pub transcript: String,
    pub dialog_acts: BTreeSet<DialogAct>,
    pub waveform_ref: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub intent: Intent,
    pub caller_id: String,
    pub agent_id: String,
    pub split: Split,
    pub turns: Vec<Turn>,
}

impl Conversation {
    pub fn speaker_id(&self, turn: &Turn) -> &str {
        match turn.speaker {
            Role::User => &self.caller_id,
            Role::Agent => &self.agent_id,
        }
    }

    /// Turn at 1-based index `t`.
    pub fn turn(&self, t: usize) -> Result<&Turn> {
        if t == 0 || t > self.turns.len() {
            return Err(Error::Index(format!(
                "turn {t} outside 1..={} of conversation {}",
                self.turns.len(),
                self.id
            )));
        }
        Ok(&self.turns[t - 1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::Contract(format!("conversation {} has no turns", self.id)));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.index != i + 1 {
                return Err(Error::Contract(format!(
                    "conversation {} turn indices are not contiguous from 1",
                    self.id
                )));
            }
            if turn.dialog_acts.is_empty() {
                return Err(Error::Contract(format!(
                    "conversation {} turn {} has no dialog acts",
                    self.id, turn.index
                )));
            }
            if normalize_transcript(&turn.transcript) != turn.transcript {
                return Err(Error::Contract(format!(
                    "conversation {} turn {} transcript is not normalized",
                    self.id, turn.index
                )));
            }
        }
        Ok(())
    }
}

/// Size parameters of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub conversations_per_intent: usize,
    pub num_agents: usize,
    pub num_callers: usize,
    pub valid_callers: usize,
    pub test_callers: usize,
    pub ms_per_char: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            conversations_per_intent: 12,
            num_agents: 3,
            num_callers: 14,
            valid_callers: 2,
            test_callers: 4,
            ms_per_char: audio::DEFAULT_MS_PER_CHAR,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_agents < 1 {
            return Err(Error::Config("at least one agent is required".into()));
        }
        if self.test_callers < 1 {
            return Err(Error::Config("at least one test caller is required".into()));
        }
        if self.num_callers < self.test_callers + self.valid_callers + 1 {
            return Err(Error::Config(format!(
                "{} callers cannot cover {} test and {} valid callers plus a training caller",
                self.num_callers, self.test_callers, self.valid_callers
            )));
        }
        if self.conversations_per_intent < 1 {
            return Err(Error::Config("conversations_per_intent must be >= 1".into()));
        }
        if self.ms_per_char < 30 {
            return Err(Error::Config("ms_per_char must be at least 30".into()));
        }
        Ok(())
    }
}

/// The full corpus with split assignment and generation provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub seed: u64,
    pub config: CorpusConfig,
    pub alphabet: Vec<char>,
    pub conversations: Vec<Conversation>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusMeta {
    seed: u64,
    config: CorpusConfig,
    alphabet: String,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const META_FILE: &str = "corpus.json";

impl CorpusManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Conversation> {
        self.conversations.iter().filter(move |c| c.split == split)
    }

    pub fn conversation(&self, id: &str) -> Option<&Conversation> {
        self.conversations.iter().find(|c| c.id == id)
    }

    pub fn num_utterances(&self, split: Split) -> usize {
        self.split(split).map(|c| c.turns.len()).sum()
    }

    pub fn synthesizer(&self) -> Synthesizer {
        Synthesizer {
            ms_per_char: self.config.ms_per_char,
        }
    }

    /// Noise seed for one utterance's audio.
    pub fn utterance_seed(&self, conversation: &Conversation, turn: &Turn) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(conversation.id.as_bytes());
        h.update((turn.index as u64).to_le_bytes());
        u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
    }

    pub fn waveform(&self, conversation: &Conversation, turn: &Turn) -> Result<Waveform> {
        let w = self.synthesizer().synthesize(
            &turn.transcript,
            conversation.speaker_id(turn),
            self.utterance_seed(conversation, turn),
        )?;
        Ok(audio::quantize(&w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphabet.len() != 41 {
            return Err(Error::Contract(format!(
                "alphabet has {} characters, expected 41",
                self.alphabet.len()
            )));
        }
        let mut ids = HashSet::new();
        for c in &self.conversations {
            c.validate()?;
            if !ids.insert(c.id.as_str()) {
                return Err(Error::Contract(format!("duplicate conversation id {}", c.id)));
            }
        }
        let train_callers: HashSet<&str> =
            self.split(Split::Train).map(|c| c.caller_id.as_str()).collect();
        let train_agents: HashSet<&str> =
            self.split(Split::Train).map(|c| c.agent_id.as_str()).collect();
        for c in self.split(Split::Test) {
            if train_callers.contains(c.caller_id.as_str()) {
                return Err(Error::Contract(format!(
                    "test caller {} also appears in training",
                    c.caller_id
                )));
            }
            if !train_agents.contains(c.agent_id.as_str()) {
                return Err(Error::Contract(format!(
                    "test agent {} never appears in training",
                    c.agent_id
                )));
            }
        }
        Ok(())
    }

    /// One conversation per line, JSON encoded.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.conversations {
            out.push_str(&serde_json::to_string(c)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Hex SHA-256 over the seed, size config and manifest lines.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(serde_json::to_vec(&self.config)?);
        h.update(self.to_jsonl()?.as_bytes());
        Ok(format!("{:x}", h.finalize()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = CorpusMeta {
            seed: self.seed,
            config: self.config.clone(),
            alphabet: self.alphabet.iter().collect(),
        };
        let meta_path = dir.join(META_FILE);
        fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
            .map_err(|e| Error::io(&meta_path, e))?;
        let path = dir.join(MANIFEST_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl()?.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))
    }

    /// Writes one 16-bit PCM file per turn under `dir`.
    pub fn write_waveforms(&self, dir: &Path) -> Result<()> {
        for c in &self.conversations {
            for t in &c.turns {
                let path = dir.join(&t.waveform_ref);
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                }
                audio::write_wav(&path, &self.waveform(c, t)?)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let meta: CorpusMeta = serde_json::from_str(
            &fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
        )?;
        let path = dir.join(MANIFEST_FILE);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut conversations = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            conversations.push(serde_json::from_str(&line)?);
        }
        let manifest = Self {
            seed: meta.seed,
            config: meta.config,
            alphabet: meta.alphabet.chars().collect(),
            conversations,
        };
        manifest.validate()?;
        Ok(manifest)
    }
}

/// One (possibly speed-perturbed) utterance of the corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtteranceRef {
    pub conversation: usize,
    pub turn: usize,
    pub speed: f64,
}

/// Utterances of `split` in conversation order, replicated per speed factor.
pub fn utterances(manifest: &CorpusManifest, split: Split, speeds: &[f64]) -> Vec<UtteranceRef> {
    let mut out = Vec::new();
    for &speed in speeds {
        for (ci, c) in manifest.conversations.iter().enumerate() {
            if c.split != split {
                continue;
            }
            for ti in 0..c.turns.len() {
                out.push(UtteranceRef {
                    conversation: ci,
                    turn: ti,
                    speed,
                });
            }
        }
    }
    out
}
