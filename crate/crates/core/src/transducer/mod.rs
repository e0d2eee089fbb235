//! RNN transducer: bidirectional LSTM transcription network, LSTM prediction
//! network, multiplicative tanh joint network, losses and greedy decoding.

mod decode;
pub mod loss;
mod model;

use serde::{Deserialize, Serialize};

use crate::corpus::normalize::{char_index, ALPHABET};
use crate::error::{Error, Result};

pub use decode::{greedy_decode, Hypothesis, DEFAULT_EMISSION_CAP};
pub use loss::{ctc_loss, rnnt_loss, Lattice, LossOutput};
pub use model::{EncoderOutput, Joint, PredictorState, TransducerModel};

/// Output index of the blank symbol. Characters occupy `1..=41`, SLU label
/// tokens are appended after them.
pub const BLANK: usize = 0;
/// Blank plus the 41 corpus characters.
pub const ASR_OUTPUTS: usize = 42;
/// Dimensionality of a dialog-history context embedding.
pub const HISTORY_DIM: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransducerConfig {
    /// Acoustic feature dimension (240).
    pub feature_dim: usize,
    /// Extra per-frame input appended to the features (0 or 128).
    #[serde(default)]
    pub history_dim: usize,
    pub encoder_layers: usize,
    pub encoder_hidden: usize,
    pub predictor_layers: usize,
    pub predictor_hidden: usize,
    pub embed_dim: usize,
    pub joint_dim: usize,
    /// SLU label tokens appended after the character outputs.
    #[serde(default)]
    pub label_tokens: Vec<String>,
}

impl TransducerConfig {
    /// Desk-scale default: 2×64 BiLSTM encoder, 1×64 predictor, joint 64.
    pub fn desk() -> Self {
        Self {
            feature_dim: crate::features::STACKED_DIM,
            history_dim: 0,
            encoder_layers: 2,
            encoder_hidden: 64,
            predictor_layers: 1,
            predictor_hidden: 64,
            embed_dim: 64,
            joint_dim: 64,
            label_tokens: Vec::new(),
        }
    }

    /// Full-size configuration: 6×640 BiLSTM, 1×1024 predictor, joint 256.
    pub fn full_scale() -> Self {
        Self {
            encoder_layers: 6,
            encoder_hidden: 640,
            predictor_hidden: 1024,
            embed_dim: 1024,
            joint_dim: 256,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full_scale()),
            other => Err(Error::Config(format!("unknown transducer preset `{other}`"))),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.feature_dim + self.history_dim
    }

    pub fn output_size(&self) -> usize {
        ASR_OUTPUTS + self.label_tokens.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.encoder_layers == 0 || self.encoder_hidden == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.predictor_layers == 0 || self.predictor_hidden == 0 || self.embed_dim == 0 || self.joint_dim == 0 {
            return Err(Error::Config("predictor/joint dimensions must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.label_tokens {
            if !seen.insert(t) {
                return Err(Error::Config(format!("duplicate label token `{t}`")));
            }
            if t.chars().count() == 1 && char_index(t.chars().next().unwrap()).is_some() {
                return Err(Error::Config(format!("label token `{t}` collides with a character")));
            }
        }
        Ok(())
    }

    /// Printable name of output `k`.
    pub fn token_name(&self, k: usize) -> String {
        match k {
            BLANK => "<blank>".into(),
            k if k < ASR_OUTPUTS => ALPHABET.chars().nth(k - 1).unwrap().to_string(),
            k => self.label_tokens.get(k - ASR_OUTPUTS).cloned().unwrap_or_else(|| format!("<{k}>")),
        }
    }
}

/// Character output index for `c`.
pub fn char_output(c: char) -> Option<usize> {
    char_index(c).map(|i| i + 1)
}

/// Character for a character output index.
pub fn output_char(k: usize) -> Option<char> {
    if (1..ASR_OUTPUTS).contains(&k) {
        ALPHABET.chars().nth(k - 1)
    } else {
        None
    }
}

/// Character targets of a normalized transcript.
pub fn transcript_targets(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| char_output(c).ok_or_else(|| Error::Domain(format!("character {c:?} outside alphabet"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_sizes() {
        assert_eq!(TransducerConfig::full_scale().output_size(), 42);
        assert_eq!(TransducerConfig::desk().output_size(), 42);
        assert_eq!(TransducerConfig::desk().input_dim(), 240);
    }

    #[test]
    fn char_mapping_roundtrip() {
        for c in ALPHABET.chars() {
            let k = char_output(c).unwrap();
            assert!(k != BLANK && k < ASR_OUTPUTS);
            assert_eq!(output_char(k), Some(c));
        }
        assert_eq!(output_char(BLANK), None);
        assert_eq!(output_char(ASR_OUTPUTS), None);
    }

    #[test]
    fn duplicate_labels_rejected() {
        let cfg = TransducerConfig {
            label_tokens: vec!["<x>".into(), "<x>".into()],
            ..TransducerConfig::desk()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
