use std::collections::BTreeMap;

use crate::corpus::{perturb_speed, CorpusManifest, Split};
use crate::error::{Error, Result};
use crate::features::{compute_norm_stats, FeaturePipeline, NormStats, STACKED_DIM};
use crate::nn::Mat;

fn speed_key(speed: f64) -> i64 {
    (speed * 1000.0).round() as i64
}

/// In-memory 240-dim features for every utterance a run touches.
/// Held-out splits are stored at speed 1.0 only.
pub struct FeatureStore {
    pub stats: NormStats,
    pub train_speeds: Vec<f64>,
    feats: BTreeMap<(usize, usize, i64), Mat>,
}

impl FeatureStore {
    /// Normalization statistics come from the unperturbed training split.
    pub fn build(corpus: &CorpusManifest, train_speeds: &[f64]) -> Result<Self> {
        if train_speeds.is_empty() || train_speeds.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("training speeds must be positive and non-empty".into()));
        }
        let probe = FeaturePipeline::new(NormStats::identity(crate::features::NUM_MEL))?;
        let mut train_logmel = Vec::new();
        for c in corpus.split(Split::Train) {
            for t in &c.turns {
                train_logmel.push(probe.logmel(&corpus.waveform(c, t)?)?);
            }
        }
        let stats = compute_norm_stats(&train_logmel)?;
        drop(train_logmel);
        let pipeline = FeaturePipeline::new(stats.clone())?;
        let mut feats = BTreeMap::new();
        for (ci, c) in corpus.conversations.iter().enumerate() {
            let speeds: &[f64] = if c.split == Split::Train { train_speeds } else { &[1.0] };
            for (ti, t) in c.turns.iter().enumerate() {
                let wave = corpus.waveform(c, t)?;
                for &s in speeds {
                    let w = if s == 1.0 { wave.clone() } else { perturb_speed(&wave, s)? };
                    let f = pipeline.process(&w)?;
                    feats.insert((ci, ti, speed_key(s)), Mat::from_vec(f.num_frames(), STACKED_DIM, f.to_f32()));
                }
            }
        }
        Ok(Self {
            stats,
            train_speeds: train_speeds.to_vec(),
            feats,
        })
    }

    pub fn get(&self, conversation: usize, turn: usize, speed: f64) -> Result<&Mat> {
        self.feats
            .get(&(conversation, turn, speed_key(speed)))
            .ok_or_else(|| Error::Index(format!("no features for conversation {conversation} turn {turn} speed {speed}")))
    }

    pub fn len(&self) -> usize {
        self.feats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feats.is_empty()
    }
}
