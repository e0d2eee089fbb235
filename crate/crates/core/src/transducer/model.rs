use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::loss::{ctc_loss, rnnt_loss, Lattice};
use super::{TransducerConfig, BLANK};
use crate::error::{Error, Result};
use crate::nn::lstm::{BiLstmCache, LstmCache, LstmState};
use crate::nn::transformer::Embedding;
use crate::nn::{log_softmax_in_place, prefixed, BiLstm, Checkpoint, Linear, Lstm, Mat, Param, Parameters};

/// `log_softmax(W · tanh(P_enc(enc) ⊙ P_pred(pred)) + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub enc_proj: Linear,
    pub pred_proj: Linear,
    pub out: Linear,
}

impl Joint {
    pub fn new(enc_dim: usize, pred_dim: usize, joint_dim: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            enc_proj: Linear::new(enc_dim, joint_dim, rng),
            pred_proj: Linear::new(pred_dim, joint_dim, rng),
            out: Linear::new(joint_dim, outputs, rng),
        }
    }

    pub fn outputs(&self) -> usize {
        self.out.output_dim()
    }

    /// Unnormalized scores from already-projected vectors.
    pub fn logits_projected(&self, enc: &[f32], pred: &[f32]) -> Vec<f32> {
        let z: Vec<f32> = enc.iter().zip(pred).map(|(a, b)| (a * b).tanh()).collect();
        let mut out = vec![0.0; self.outputs()];
        self.out.forward_vec(&z, &mut out);
        out
    }

    pub fn log_probs_projected(&self, enc: &[f32], pred: &[f32]) -> Vec<f32> {
        let mut out = self.logits_projected(enc, pred);
        log_softmax_in_place(&mut out);
        out
    }

    /// Log-distribution over all outputs for raw encoder/predictor states.
    pub fn forward(&self, enc_state: &[f32], pred_state: &[f32]) -> Vec<f32> {
        let mut pe = vec![0.0; self.enc_proj.output_dim()];
        let mut pp = vec![0.0; self.pred_proj.output_dim()];
        self.enc_proj.forward_vec(enc_state, &mut pe);
        self.pred_proj.forward_vec(pred_state, &mut pp);
        self.log_probs_projected(&pe, &pp)
    }
}

impl Parameters for Joint {
    fn params(&self) -> Vec<(String, &Param)> {
        prefixed("enc_proj", self.enc_proj.params())
            .chain(prefixed("pred_proj", self.pred_proj.params()))
            .chain(prefixed("out", self.out.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let Self { enc_proj, pred_proj, out } = self;
        prefixed("enc_proj", enc_proj.params_mut())
            .chain(prefixed("pred_proj", pred_proj.params_mut()))
            .chain(prefixed("out", out.params_mut()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransducerModel {
    pub config: TransducerConfig,
    pub encoder: Vec<BiLstm>,
    /// Prediction-network input embedding; row 0 (blank) is the start symbol.
    pub embedding: Embedding,
    pub predictor: Vec<Lstm>,
    pub joint: Joint,
    /// Free-form lineage record carried into checkpoints.
    pub provenance: Value,
}

/// Encoder activations kept for the backward pass.
pub struct EncoderOutput {
    pub states: Mat,
    inputs: Vec<Mat>,
    caches: Vec<BiLstmCache>,
}

struct PredictorTrace {
    ids: Vec<usize>,
    inputs: Vec<Mat>,
    caches: Vec<LstmCache>,
}

/// Recurrent state of the prediction network during decoding.
#[derive(Debug, Clone)]
pub struct PredictorState {
    layers: Vec<LstmState>,
    pub output: Vec<f32>,
}

impl TransducerModel {
    pub fn new(config: TransducerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for i in 0..config.encoder_layers {
            let input = if i == 0 { config.input_dim() } else { 2 * config.encoder_hidden };
            encoder.push(BiLstm::new(input, config.encoder_hidden, &mut rng));
        }
        let embedding = Embedding::new(config.output_size(), config.embed_dim, 1.0, &mut rng);
        let predictor = (0..config.predictor_layers)
            .map(|i| {
                let input = if i == 0 { config.embed_dim } else { config.predictor_hidden };
                Lstm::new(input, config.predictor_hidden, &mut rng)
            })
            .collect();
        let joint = Joint::new(
            2 * config.encoder_hidden,
            config.predictor_hidden,
            config.joint_dim,
            config.output_size(),
            &mut rng,
        );
        Ok(Self {
            config,
            encoder,
            embedding,
            predictor,
            joint,
            provenance: Value::Null,
        })
    }

    pub fn outputs(&self) -> usize {
        self.config.output_size()
    }

    pub fn encoder_dim(&self) -> usize {
        2 * self.config.encoder_hidden
    }

    fn encoder_input(&self, feats: &Mat, history: Option<&[f32]>) -> Result<Mat> {
        let cfg = &self.config;
        if feats.cols != cfg.feature_dim {
            return Err(Error::Shape(format!(
                "features are {}-dim, model expects {}",
                feats.cols, cfg.feature_dim
            )));
        }
        match (cfg.history_dim, history) {
            (0, None) => Ok(feats.clone()),
            (0, Some(_)) => Err(Error::Shape(
                "history embedding supplied to a model without history inputs".into(),
            )),
            (_, None) => Err(Error::Contract(
                "model was built with history inputs but no history was supplied".into(),
            )),
            (d, Some(h)) if h.len() != d => Err(Error::Shape(format!(
                "history is {}-dim, model expects {d}",
                h.len()
            ))),
            (d, Some(h)) => {
                let mut x = Mat::zeros(feats.rows, cfg.feature_dim + d);
                for r in 0..feats.rows {
                    let row = x.row_mut(r);
                    row[..cfg.feature_dim].copy_from_slice(feats.row(r));
                    row[cfg.feature_dim..].copy_from_slice(h);
                }
                Ok(x)
            }
        }
    }

    /// Input projection of the first encoder layer for both directions.
    pub fn first_layer_preactivation(&self, feats: &Mat, history: Option<&[f32]>) -> Result<(Mat, Mat)> {
        let x = self.encoder_input(feats, history)?;
        let l = &self.encoder[0];
        Ok((l.fwd.input_projection(&x), l.bwd.input_projection(&x)))
    }

    pub fn encode_traced(&self, feats: &Mat, history: Option<&[f32]>) -> Result<EncoderOutput> {
        let mut x = self.encoder_input(feats, history)?;
        let mut inputs = Vec::with_capacity(self.encoder.len());
        let mut caches = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let cache = layer.forward(&x);
            let next = cache.output.clone();
            inputs.push(std::mem::replace(&mut x, next));
            caches.push(cache);
        }
        Ok(EncoderOutput {
            states: x,
            inputs,
            caches,
        })
    }

    /// One state vector per input frame.
    pub fn encode(&self, feats: &Mat, history: Option<&[f32]>) -> Result<Mat> {
        Ok(self.encode_traced(feats, history)?.states)
    }

    fn encoder_backward(&mut self, trace: &EncoderOutput, d_states: Mat) {
        let mut d = d_states;
        for i in (0..self.encoder.len()).rev() {
            let need_dx = i > 0;
            match self.encoder[i].backward(&trace.inputs[i], &trace.caches[i], &d, need_dx) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    fn predictor_traced(&self, target: &[usize]) -> (Mat, PredictorTrace) {
        let ids: Vec<usize> = std::iter::once(BLANK).chain(target.iter().copied()).collect();
        let mut x = self.embedding.forward(&ids);
        let mut inputs = Vec::new();
        let mut caches = Vec::new();
        for layer in &self.predictor {
            let cache = layer.forward(&x, false);
            let next = cache.output.clone();
            inputs.push(std::mem::replace(&mut x, next));
            caches.push(cache);
        }
        (x, PredictorTrace { ids, inputs, caches })
    }

    fn predictor_backward(&mut self, trace: &PredictorTrace, d_out: Mat) {
        let mut d = d_out;
        for i in (0..self.predictor.len()).rev() {
            d = self.predictor[i]
                .backward(&trace.inputs[i], &trace.caches[i], &d, true)
                .expect("dx requested");
        }
        self.embedding.backward(&trace.ids, &d);
    }

    pub fn predictor_start(&self) -> PredictorState {
        let layers = self
            .predictor
            .iter()
            .map(|l| LstmState::zeros(l.hidden))
            .collect();
        self.predictor_step(
            &PredictorState {
                layers,
                output: Vec::new(),
            },
            BLANK,
        )
    }

    pub fn predictor_step(&self, state: &PredictorState, token: usize) -> PredictorState {
        let mut x = self.embedding.table.w.row(token).to_vec();
        let mut layers = Vec::with_capacity(self.predictor.len());
        for (layer, s) in self.predictor.iter().zip(&state.layers) {
            let next = layer.step(&x, s);
            x = next.h.clone();
            layers.push(next);
        }
        PredictorState { layers, output: x }
    }

    /// Full lattice of output log-probabilities for a labelled utterance.
    pub fn lattice(&self, feats: &Mat, history: Option<&[f32]>, target: &[usize]) -> Result<Lattice> {
        let enc = self.encode(feats, history)?;
        let (pred, _) = self.predictor_traced(target);
        let pe = self.joint.enc_proj.forward(&enc);
        let pp = self.joint.pred_proj.forward(&pred);
        let mut log_probs = Vec::with_capacity(enc.rows * pred.rows * self.outputs());
        for t in 0..enc.rows {
            for u in 0..pred.rows {
                log_probs.extend(
                    self.joint
                        .log_probs_projected(pe.row(t), pp.row(u))
                        .into_iter()
                        .map(f64::from),
                );
            }
        }
        Lattice::new(enc.rows, self.outputs(), BLANK, target.to_vec(), log_probs)
    }

    /// Forward + backward for one utterance. Gradients are accumulated
    /// (scaled by `scale`) into the parameters; returns the loss.
    pub fn rnnt_loss_and_grad(
        &mut self,
        feats: &Mat,
        history: Option<&[f32]>,
        target: &[usize],
        scale: f32,
    ) -> Result<f64> {
        let enc = self.encode_traced(feats, history)?;
        let (pred, ptrace) = self.predictor_traced(target);
        let pe = self.joint.enc_proj.forward(&enc.states);
        let pp = self.joint.pred_proj.forward(&pred);
        let (t_len, u1, j) = (enc.states.rows, pred.rows, self.config.joint_dim);
        let v = self.outputs();

        let mut z = Mat::zeros(t_len * u1, j);
        for t in 0..t_len {
            for u in 0..u1 {
                let row = z.row_mut(t * u1 + u);
                for ((o, a), b) in row.iter_mut().zip(pe.row(t)).zip(pp.row(u)) {
                    *o = (a * b).tanh();
                }
            }
        }
        let mut logp = self.joint.out.forward(&z);
        for r in 0..logp.rows {
            log_softmax_in_place(logp.row_mut(r));
        }
        let lattice = Lattice::new(
            t_len,
            v,
            BLANK,
            target.to_vec(),
            logp.data.iter().map(|&x| x as f64).collect(),
        )?;
        let out = rnnt_loss(&lattice)?;
        if !out.loss.is_finite() {
            return Err(Error::Numeric("transducer loss is not finite".into()));
        }

        let mut dlogits = Mat::zeros(logp.rows, v);
        for r in 0..logp.rows {
            let g = &out.grad[r * v..(r + 1) * v];
            let gsum: f64 = g.iter().sum();
            for ((d, &gk), &lk) in dlogits.row_mut(r).iter_mut().zip(g).zip(logp.row(r)) {
                *d = scale * (gk - (lk as f64).exp() * gsum) as f32;
            }
        }
        let mut dz = self.joint.out.backward(&z, &dlogits);
        for (d, zv) in dz.data.iter_mut().zip(&z.data) {
            *d *= 1.0 - zv * zv;
        }
        let mut dpe = Mat::zeros(t_len, j);
        let mut dpp = Mat::zeros(u1, j);
        for t in 0..t_len {
            for u in 0..u1 {
                let d = dz.row(t * u1 + u);
                let (a, b) = (pe.row(t), pp.row(u));
                let dpe_row = dpe.row_mut(t);
                for k in 0..j {
                    dpe_row[k] += d[k] * b[k];
                }
                let dpp_row = dpp.row_mut(u);
                for k in 0..j {
                    dpp_row[k] += d[k] * a[k];
                }
            }
        }
        let d_enc = self.joint.enc_proj.backward(&enc.states, &dpe);
        let d_pred = self.joint.pred_proj.backward(&pred, &dpp);
        self.predictor_backward(&ptrace, d_pred);
        self.encoder_backward(&enc, d_enc);
        Ok(out.loss)
    }

    /// CTC pre-training of the encoder through a separate output head.
    pub fn ctc_loss_and_grad(
        &mut self,
        head: &mut Linear,
        feats: &Mat,
        history: Option<&[f32]>,
        target: &[usize],
        scale: f32,
    ) -> Result<f64> {
        let enc = self.encode_traced(feats, history)?;
        let mut logp = head.forward(&enc.states);
        for r in 0..logp.rows {
            log_softmax_in_place(logp.row_mut(r));
        }
        let v = logp.cols;
        let lp: Vec<f64> = logp.data.iter().map(|&x| x as f64).collect();
        let out = ctc_loss(&lp, v, target, BLANK)?;
        if !out.loss.is_finite() {
            return Err(Error::Numeric("CTC loss is not finite".into()));
        }
        let mut dlogits = Mat::zeros(logp.rows, v);
        for r in 0..logp.rows {
            let g = &out.grad[r * v..(r + 1) * v];
            let gsum: f64 = g.iter().sum();
            for ((d, &gk), &lk) in dlogits.row_mut(r).iter_mut().zip(g).zip(logp.row(r)) {
                *d = scale * (gk - (lk as f64).exp() * gsum) as f32;
            }
        }
        let d_enc = head.backward(&enc.states, &dlogits);
        self.encoder_backward(&enc, d_enc);
        Ok(out.loss)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(
            json!({
                "kind": "transducer",
                "config": self.config,
                "provenance": self.provenance,
            }),
            self,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.config.get("kind").and_then(Value::as_str) != Some("transducer") {
            return Err(Error::Contract("checkpoint does not hold a transducer".into()));
        }
        let config: TransducerConfig = serde_json::from_value(ck.config["config"].clone())?;
        let mut model = Self::new(config, 0)?;
        ck.load_into(&mut model)?;
        model.provenance = ck.config.get("provenance").cloned().unwrap_or(Value::Null);
        Ok(model)
    }
}

impl Parameters for TransducerModel {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            out.extend(prefixed(&format!("encoder{i}"), l.params()));
        }
        out.extend(prefixed("embedding", self.embedding.params()));
        for (i, l) in self.predictor.iter().enumerate() {
            out.extend(prefixed(&format!("predictor{i}"), l.params()));
        }
        out.extend(prefixed("joint", self.joint.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let Self {
            encoder,
            embedding,
            predictor,
            joint,
            ..
        } = self;
        let mut out = Vec::new();
        for (i, l) in encoder.iter_mut().enumerate() {
            out.extend(prefixed(&format!("encoder{i}"), l.params_mut()));
        }
        out.extend(prefixed("embedding", embedding.params_mut()));
        for (i, l) in predictor.iter_mut().enumerate() {
            out.extend(prefixed(&format!("predictor{i}"), l.params_mut()));
        }
        out.extend(prefixed("joint", joint.params_mut()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transducer::HISTORY_DIM;
    use rand::Rng;

    fn tiny(history_dim: usize) -> TransducerConfig {
        TransducerConfig {
            feature_dim: 6,
            history_dim,
            encoder_layers: 2,
            encoder_hidden: 4,
            predictor_layers: 1,
            predictor_hidden: 5,
            embed_dim: 3,
            joint_dim: 4,
            label_tokens: vec![],
        }
    }

    fn feats(t: usize, d: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::uniform(t, d, 1.0, &mut rng)
    }

    #[test]
    fn encode_preserves_length() {
        let m = TransducerModel::new(tiny(0), 1).unwrap();
        assert_eq!(m.encode(&feats(7, 6, 0), None).unwrap().rows, 7);
    }

    #[test]
    fn history_contract() {
        let m = TransducerModel::new(tiny(HISTORY_DIM), 1).unwrap();
        let x = feats(3, 6, 0);
        assert!(matches!(m.encode(&x, None), Err(Error::Contract(_))));
        let zero = vec![0.0; HISTORY_DIM];
        assert!(m.encode(&x, Some(&zero)).is_ok());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h1: Vec<f32> = (0..HISTORY_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h2: Vec<f32> = (0..HISTORY_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_ne!(m.encode(&x, Some(&h1)).unwrap(), m.encode(&x, Some(&h2)).unwrap());
        assert!(matches!(m.encode(&feats(3, 5, 0), Some(&zero)), Err(Error::Shape(_))));
        let base = TransducerModel::new(tiny(0), 1).unwrap();
        assert!(matches!(base.encode(&x, Some(&zero)), Err(Error::Shape(_))));
    }

    #[test]
    fn joint_is_normalized_and_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let j = Joint::new(8, 5, 4, 42, &mut rng);
        for _ in 0..20 {
            let e: Vec<f32> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let p: Vec<f32> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let lp = j.forward(&e, &p);
            assert_eq!(lp.len(), 42);
            let s: f64 = lp.iter().map(|&x| (x as f64).exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let mut bias = j.out.bias.w.data.clone();
        log_softmax_in_place(&mut bias);
        let lp = j.log_probs_projected(&[0.0; 4], &[0.3, -2.0, 1.0, 0.5]);
        for (a, b) in lp.iter().zip(&bias) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rnnt_gradient_through_whole_model() {
        let mut m = TransducerModel::new(tiny(0), 4).unwrap();
        let x = feats(4, 6, 1);
        let target = [3usize, 7];
        m.zero_grad();
        let loss = m.rnnt_loss_and_grad(&x, None, &target, 1.0).unwrap();
        let lat = m.lattice(&x, None, &target).unwrap();
        assert!((rnnt_loss(&lat).unwrap().loss - loss).abs() < 1e-4);
        let grads: Vec<Vec<f32>> = m.params().iter().map(|(_, p)| p.g.data.clone()).collect();
        let eps = 1e-2f32;
        let f = |m: &TransducerModel| rnnt_loss(&m.lattice(&x, None, &target).unwrap()).unwrap().loss;
        for (pi, g) in grads.iter().enumerate() {
            for i in (0..g.len()).step_by(11) {
                let mut a = m.clone();
                a.params_mut()[pi].1.w.data[i] += eps;
                let mut b = m.clone();
                b.params_mut()[pi].1.w.data[i] -= eps;
                let fd = (f(&a) - f(&b)) / (2.0 * eps as f64);
                assert!((fd - g[i] as f64).abs() < 3e-3 + 3e-2 * fd.abs(), "param {pi}[{i}] fd {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn ctc_gradient_through_encoder() {
        let mut m = TransducerModel::new(tiny(0), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut head = Linear::new(8, 42, &mut rng);
        let x = feats(5, 6, 2);
        let target = [2usize, 4];
        let loss = m.ctc_loss_and_grad(&mut head, &x, None, &target, 1.0).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        let eps = 1e-2f32;
        let f = |m: &TransducerModel| {
            let mut lp = head.forward(&m.encode(&x, None).unwrap());
            for r in 0..lp.rows {
                log_softmax_in_place(lp.row_mut(r));
            }
            let lp: Vec<f64> = lp.data.iter().map(|&v| v as f64).collect();
            ctc_loss(&lp, 42, &target, BLANK).unwrap().loss
        };
        let g = m.encoder[0].fwd.w_ih.g.data.clone();
        for i in (0..g.len()).step_by(5) {
            let mut a = m.clone();
            a.encoder[0].fwd.w_ih.w.data[i] += eps;
            let mut b = m.clone();
            b.encoder[0].fwd.w_ih.w.data[i] -= eps;
            let fd = (f(&a) - f(&b)) / (2.0 * eps as f64);
            assert!((fd - g[i] as f64).abs() < 3e-3 + 3e-2 * fd.abs());
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut m = TransducerModel::new(tiny(0), 6).unwrap();
        m.provenance = json!({"source": "test"});
        let back = TransducerModel::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back, m);
    }
}
