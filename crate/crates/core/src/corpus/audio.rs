//! Tonal speech stand-in: each character is a fixed-length two-tone chord,
//! shaped by a per-speaker spectral tilt and pitch offset, plus noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::corpus::normalize::char_index;
use crate::error::{Error, Result};
use crate::features::{Waveform, SAMPLE_RATE};

pub const DEFAULT_MS_PER_CHAR: u32 = 80;
pub const SPEED_FACTORS: [f64; 3] = [0.9, 1.0, 1.1];

const LOW_TONES_HZ: [f64; 7] = [250.0, 340.0, 460.0, 620.0, 840.0, 1130.0, 1530.0];
const HIGH_TONES_HZ: [f64; 6] = [2000.0, 2600.0, 3380.0, 4400.0, 5300.0, 6300.0];
const RAMP_MS: f64 = 12.0;

/// Acoustic rendering of one speaker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeakerProfile {
    pub tilt: f64,
    pub pitch: f64,
    pub noise_std: f64,
}

impl SpeakerProfile {
    pub fn for_speaker(speaker_id: &str) -> Self {
        let mut rng = ChaCha8Rng::from_seed(digest32(&["speaker", speaker_id]));
        Self {
            tilt: rng.gen_range(0.6..1.4),
            pitch: rng.gen_range(0.97..1.03),
            noise_std: rng.gen_range(0.004..0.015),
        }
    }
}

fn digest32(parts: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    h.finalize().into()
}

/// Chord frequencies of a corpus character.
pub fn char_tones(c: char) -> Option<(f64, f64)> {
    char_index(c).map(|k| (LOW_TONES_HZ[k % 7], HIGH_TONES_HZ[k / 7]))
}

#[derive(Debug, Clone, Copy)]
pub struct Synthesizer {
    pub ms_per_char: u32,
}

impl Default for Synthesizer {
    fn default() -> Self {
        Self {
            ms_per_char: DEFAULT_MS_PER_CHAR,
        }
    }
}

impl Synthesizer {
    pub fn samples_per_char(&self) -> usize {
        (SAMPLE_RATE as usize * self.ms_per_char as usize) / 1000
    }

    pub fn synthesize(&self, transcript: &str, speaker_id: &str, seed: u64) -> Result<Waveform> {
        if transcript.is_empty() {
            return Err(Error::EmptyInput("cannot synthesize an empty transcript".into()));
        }
        let profile = SpeakerProfile::for_speaker(speaker_id);
        let seed_text = seed.to_string();
        let mut rng = ChaCha8Rng::from_seed(digest32(&["utt", &seed_text, speaker_id, transcript]));
        let noise = Normal::new(0.0, profile.noise_std).expect("positive std");
        let per_char = self.samples_per_char();
        let ramp = ((RAMP_MS / 1000.0) * SAMPLE_RATE as f64) as usize;
        let sr = SAMPLE_RATE as f64;
        let mut samples = Vec::with_capacity(per_char * transcript.chars().count());
        for c in transcript.chars() {
            let (lo, hi) = char_tones(c).ok_or_else(|| {
                Error::Domain(format!("character {c:?} is outside the corpus alphabet"))
            })?;
            let (lo, hi) = (lo * profile.pitch, hi * profile.pitch);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            for n in 0..per_char {
                let env = if n < ramp {
                    0.5 - 0.5 * (std::f64::consts::PI * n as f64 / ramp as f64).cos()
                } else if n + ramp >= per_char {
                    0.5 - 0.5 * (std::f64::consts::PI * (per_char - 1 - n) as f64 / ramp as f64).cos()
                } else {
                    1.0
                };
                let time = n as f64 / sr;
                let s = 0.3 * (std::f64::consts::TAU * lo * time + phase).sin()
                    + 0.3 * profile.tilt * (std::f64::consts::TAU * hi * time).sin();
                samples.push((env * s + noise.sample(&mut rng)) as f32);
            }
        }
        Waveform::new(samples, SAMPLE_RATE)
    }
}

pub fn synthesize_waveform(transcript: &str, speaker_id: &str, seed: u64) -> Result<Waveform> {
    Synthesizer::default().synthesize(transcript, speaker_id, seed)
}

/// Speed perturbation by linear-interpolation resampling: duration scales by
/// `1 / factor` and pitch by `factor`.
pub fn perturb_speed(waveform: &Waveform, factor: f64) -> Result<Waveform> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::Domain(format!("speed factor must be positive, got {factor}")));
    }
    if factor == 1.0 {
        return Ok(waveform.clone());
    }
    let n = waveform.len();
    let out_len = (n as f64 / factor).round() as usize;
    let src = &waveform.samples;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * factor;
            let j = pos.floor() as usize;
            if j + 1 >= n {
                src[n - 1]
            } else {
                let frac = (pos - j as f64) as f32;
                src[j] * (1.0 - frac) + src[j + 1] * frac
            }
        })
        .collect();
    Waveform::new(samples, waveform.sample_rate)
}

/// Writes 16-bit linear PCM mono.
pub fn write_wav(path: &Path, waveform: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: waveform.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in &waveform.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 {
        return Err(Error::format(path, "expected 16-bit mono PCM"));
    }
    let samples = r
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32767.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Round-trips a waveform through 16-bit quantization, matching what is
/// stored on disk.
pub fn quantize(waveform: &Waveform) -> Waveform {
    let samples = waveform
        .samples
        .iter()
        .map(|&s| (s.clamp(-1.0, 1.0) * 32767.0).round() as i16 as f32 / 32767.0)
        .collect();
    Waveform {
        samples,
        sample_rate: waveform.sample_rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duration_arithmetic() {
        let w = synthesize_waveform("a", "spk", 1).unwrap();
        assert_eq!(w.len(), 1280);
        assert_eq!(w.sample_rate, 16000);
    }

    #[test]
    fn deterministic_and_order_sensitive() {
        let a = synthesize_waveform("ab", "spk", 5).unwrap();
        assert_eq!(a, synthesize_waveform("ab", "spk", 5).unwrap());
        assert_ne!(a, synthesize_waveform("ba", "spk", 5).unwrap());
        assert_ne!(a, synthesize_waveform("ab", "other", 5).unwrap());
    }

    #[test]
    fn empty_and_foreign_input() {
        assert!(matches!(synthesize_waveform("", "s", 0), Err(Error::EmptyInput(_))));
        assert!(matches!(synthesize_waveform("A", "s", 0), Err(Error::Domain(_))));
    }

    #[test]
    fn every_char_has_distinct_chord() {
        let mut seen: Vec<(u64, u64)> = crate::corpus::normalize::alphabet()
            .into_iter()
            .map(|c| {
                let (a, b) = char_tones(c).unwrap();
                (a as u64, b as u64)
            })
            .collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 41);
    }

    #[test]
    fn speed_perturbation() {
        let w = Waveform::new((0..16000).map(|i| (i as f32 * 0.01).sin()).collect(), 16000).unwrap();
        assert_eq!(perturb_speed(&w, 1.0).unwrap(), w);
        let slow = perturb_speed(&w, 0.9).unwrap().len();
        assert!(slow == 17777 || slow == 17778);
        let fast = perturb_speed(&w, 1.1).unwrap().len();
        assert!((fast as f64 - 16000.0 / 1.1).abs() <= 1.0);
        assert!(matches!(perturb_speed(&w, 0.0), Err(Error::Domain(_))));
        assert!(matches!(perturb_speed(&w, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn wav_roundtrip_matches_quantize() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = synthesize_waveform("hi", "s", 2).unwrap();
        write_wav(&p, &w).unwrap();
        assert_eq!(read_wav(&p).unwrap(), quantize(&w));
    }
}
