//! Acoustic front end: 40-dim log-Mel filterbanks every 10 ms, global
//! mean/variance normalization, Δ/ΔΔ, and two-frame stacking down to
//! 240-dim vectors every 20 ms.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW_SAMPLES: usize = 400;
pub const HOP_SAMPLES: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const NUM_MEL: usize = 40;
pub const DELTA_WIDTH: usize = 2;
pub const ENERGY_FLOOR: f64 = 1e-10;
pub const STD_FLOOR: f64 = 1e-8;
/// Final per-frame dimension fed to the transcription network.
pub const STACKED_DIM: usize = 6 * NUM_MEL;

/// Mono audio with real-valued samples in roughly [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Domain("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("waveform contains non-finite samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Time-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub dim: usize,
    pub frame_period_ms: u32,
    data: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(dim: usize, frame_period_ms: u32, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form frames of dim {dim}",
                data.len()
            )));
        }
        Ok(Self {
            dim,
            frame_period_ms,
            data,
        })
    }

    pub fn from_frames(frames: &[Vec<f64>], frame_period_ms: u32) -> Result<Self> {
        let dim = frames.first().map(|f| f.len()).unwrap_or(0);
        if frames.iter().any(|f| f.len() != dim) {
            return Err(Error::Shape("frames have inconsistent dimension".into()));
        }
        let data = frames.iter().flatten().copied().collect();
        Ok(Self {
            dim,
            frame_period_ms,
            data,
        })
    }

    pub fn empty(dim: usize, frame_period_ms: u32) -> Self {
        Self {
            dim,
            frame_period_ms,
            data: Vec::new(),
        }
    }

    pub fn num_frames(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Copies columns `start..end` of every frame.
    pub fn slice_dims(&self, start: usize, end: usize) -> FeatureSequence {
        let data = self
            .frames()
            .flat_map(|f| f[start..end].iter().copied())
            .collect();
        FeatureSequence {
            dim: end - start,
            frame_period_ms: self.frame_period_ms,
            data,
        }
    }
}

/// Per-dimension global normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular Mel filterbank over the positive FFT bins, 0 to Nyquist.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    edges_hz: Vec<f64>,
    weights: Vec<Vec<f64>>,
}

impl MelFilterbank {
    pub fn new(num_filters: usize, fft_size: usize, sample_rate: u32) -> Self {
        let nyquist = sample_rate as f64 / 2.0;
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
        let edges_hz: Vec<f64> = (0..num_filters + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (num_filters + 1) as f64))
            .collect();
        let bins = fft_size / 2 + 1;
        let bin_hz = sample_rate as f64 / fft_size as f64;
        let weights = (0..num_filters)
            .map(|m| {
                let (left, center, right) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
                (0..bins)
                    .map(|b| {
                        let f = b as f64 * bin_hz;
                        if f <= left || f >= right {
                            0.0
                        } else if f <= center {
                            (f - left) / (center - left)
                        } else {
                            (right - f) / (right - center)
                        }
                    })
                    .collect()
            })
            .collect();
        Self { edges_hz, weights }
    }

    pub fn centers_hz(&self) -> Vec<f64> {
        self.edges_hz[1..self.edges_hz.len() - 1].to_vec()
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Reusable log-Mel extractor (FFT plan, window and filterbank cached).
pub struct LogMelExtractor {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: MelFilterbank,
}

impl Default for LogMelExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMelExtractor {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        let window = (0..WINDOW_SAMPLES)
            .map(|n| {
                0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (WINDOW_SAMPLES - 1) as f64).cos()
            })
            .collect();
        Self {
            fft,
            window,
            filterbank: MelFilterbank::new(NUM_MEL, FFT_SIZE, SAMPLE_RATE),
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn extract(&self, waveform: &Waveform) -> Result<FeatureSequence> {
        if waveform.sample_rate != SAMPLE_RATE {
            return Err(Error::Domain(format!(
                "expected {SAMPLE_RATE} Hz audio, got {}",
                waveform.sample_rate
            )));
        }
        let n = waveform.len();
        if n < WINDOW_SAMPLES {
            return Err(Error::EmptyInput(format!(
                "waveform of {n} samples is shorter than one {WINDOW_SAMPLES}-sample window"
            )));
        }
        let num_frames = (n - WINDOW_SAMPLES) / HOP_SAMPLES + 1;
        let mut data = Vec::with_capacity(num_frames * NUM_MEL);
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let mut power = vec![0.0; FFT_SIZE / 2 + 1];
        for t in 0..num_frames {
            let start = t * HOP_SAMPLES;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < WINDOW_SAMPLES {
                    Complex::new(waveform.samples[start + i] as f64 * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            data.extend(
                self.filterbank
                    .apply(&power)
                    .into_iter()
                    .map(|e| e.max(ENERGY_FLOOR).ln()),
            );
        }
        FeatureSequence::new(NUM_MEL, 10, data)
    }
}

/// 40-dim log-Mel filterbank features, 25 ms window, 10 ms hop.
pub fn logmel(waveform: &Waveform) -> Result<FeatureSequence> {
    LogMelExtractor::new().extract(waveform)
}

fn regression_deltas(data: &[f64], frames: usize, dim: usize) -> Vec<f64> {
    let denom: f64 = 2.0 * (1..=DELTA_WIDTH).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = vec![0.0; frames * dim];
    if frames == 0 {
        return out;
    }
    let clamp = |t: isize| t.clamp(0, frames as isize - 1) as usize;
    for t in 0..frames {
        for n in 1..=DELTA_WIDTH {
            let fwd = clamp(t as isize + n as isize);
            let back = clamp(t as isize - n as isize);
            for d in 0..dim {
                out[t * dim + d] += n as f64 * (data[fwd * dim + d] - data[back * dim + d]);
            }
        }
        for d in 0..dim {
            out[t * dim + d] /= denom;
        }
    }
    out
}

/// Appends Δ and ΔΔ blocks: `[static | Δ | ΔΔ]`.
pub fn add_deltas(seq: &FeatureSequence) -> FeatureSequence {
    let (frames, dim) = (seq.num_frames(), seq.dim);
    let delta = regression_deltas(&seq.data, frames, dim);
    let delta2 = regression_deltas(&delta, frames, dim);
    let mut data = Vec::with_capacity(frames * dim * 3);
    for t in 0..frames {
        data.extend_from_slice(seq.frame(t));
        data.extend_from_slice(&delta[t * dim..(t + 1) * dim]);
        data.extend_from_slice(&delta2[t * dim..(t + 1) * dim]);
    }
    FeatureSequence {
        dim: dim * 3,
        frame_period_ms: seq.frame_period_ms,
        data,
    }
}

pub fn normalize(seq: &FeatureSequence, stats: &NormStats) -> Result<FeatureSequence> {
    if stats.mean.len() != seq.dim || stats.std.len() != seq.dim {
        return Err(Error::Shape(format!(
            "stats of dim {} applied to features of dim {}",
            stats.mean.len(),
            seq.dim
        )));
    }
    let data = seq
        .frames()
        .flat_map(|f| {
            f.iter()
                .zip(stats.mean.iter().zip(&stats.std))
                .map(|(x, (m, s))| (x - m) / s)
        })
        .collect();
    Ok(FeatureSequence {
        dim: seq.dim,
        frame_period_ms: seq.frame_period_ms,
        data,
    })
}

/// Concatenates frames `2t` and `2t+1`; an odd tail is padded by repeating
/// the final frame.
pub fn stack_and_skip(seq: &FeatureSequence) -> FeatureSequence {
    let frames = seq.num_frames();
    let out_frames = frames.div_ceil(2);
    let mut data = Vec::with_capacity(out_frames * seq.dim * 2);
    for t in 0..out_frames {
        let a = 2 * t;
        let b = (2 * t + 1).min(frames - 1);
        data.extend_from_slice(seq.frame(a));
        data.extend_from_slice(seq.frame(b));
    }
    FeatureSequence {
        dim: seq.dim * 2,
        frame_period_ms: seq.frame_period_ms * 2,
        data,
    }
}

/// Pooled per-dimension mean and standard deviation (two-pass).
pub fn compute_norm_stats<'a, I>(corpus: I) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a FeatureSequence>,
    I::IntoIter: Clone,
{
    let iter = corpus.into_iter();
    let dim = match iter.clone().next() {
        Some(s) => s.dim,
        None => return Err(Error::EmptyInput("no sequences for normalization stats".into())),
    };
    let mut mean = vec![0.0; dim];
    let mut count = 0usize;
    for seq in iter.clone() {
        if seq.dim != dim {
            return Err(Error::Shape(format!("mixed dims {dim} and {}", seq.dim)));
        }
        for f in seq.frames() {
            for (m, x) in mean.iter_mut().zip(f) {
                *m += x;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("sequences contain no frames".into()));
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; dim];
    for seq in iter {
        for f in seq.frames() {
            for ((v, x), m) in var.iter_mut().zip(f).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
    }
    let std = var
        .into_iter()
        .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormStats { mean, std })
}

/// Full front end once normalization statistics are known.
pub struct FeaturePipeline {
    extractor: LogMelExtractor,
    stats: NormStats,
}

impl FeaturePipeline {
    pub fn new(stats: NormStats) -> Result<Self> {
        if stats.mean.len() != NUM_MEL {
            return Err(Error::Shape(format!(
                "normalization stats must be {NUM_MEL}-dim, got {}",
                stats.mean.len()
            )));
        }
        Ok(Self {
            extractor: LogMelExtractor::new(),
            stats,
        })
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn logmel(&self, waveform: &Waveform) -> Result<FeatureSequence> {
        self.extractor.extract(waveform)
    }

    pub fn process(&self, waveform: &Waveform) -> Result<FeatureSequence> {
        let static_feats = normalize(&self.extractor.extract(waveform)?, &self.stats)?;
        Ok(stack_and_skip(&add_deltas(&static_feats)))
    }
}

/// Expected number of 240-dim frames for `n` input samples.
pub fn expected_frames(n: usize) -> usize {
    if n < WINDOW_SAMPLES {
        0
    } else {
        ((n - WINDOW_SAMPLES) / HOP_SAMPLES + 1).div_ceil(2)
    }
}

const FEATURE_MAGIC: &[u8; 8] = b"CSLUFEAT";

/// Writes a feature cache file: magic, dim, frame count, frame period, then
/// row-major little-endian f32 values.
pub fn write_feature_file(path: &Path, seq: &FeatureSequence) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(FEATURE_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(seq.dim as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(seq.num_frames() as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(seq.frame_period_ms).map_err(io)?;
    for &v in &seq.data {
        w.write_f32::<LittleEndian>(v as f32).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_feature_file(path: &Path) -> Result<FeatureSequence> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::format(path, "bad feature file magic"));
    }
    let dim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let frames = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let period = r.read_u32::<LittleEndian>().map_err(io)?;
    let mut data = vec![0f32; dim * frames];
    r.read_f32_into::<LittleEndian>(&mut data).map_err(io)?;
    FeatureSequence::new(dim.max(1), period, data.into_iter().map(f64::from).collect())
}
