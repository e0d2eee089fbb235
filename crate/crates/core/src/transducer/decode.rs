use super::model::TransducerModel;
use super::BLANK;
use crate::error::Result;
use crate::nn::Mat;

/// Maximum non-blank emissions per encoder frame before forcing a move.
pub const DEFAULT_EMISSION_CAP: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted non-blank outputs.
    pub tokens: Vec<usize>,
    /// Encoder frame at which each token was emitted.
    pub frames: Vec<usize>,
    pub log_score: f64,
}

/// Greedy transducer search: at each frame emit the arg-max output until
/// blank wins or `cap` symbols have been emitted, then advance.
pub fn greedy_decode(
    model: &TransducerModel,
    feats: &Mat,
    history: Option<&[f32]>,
    cap: usize,
) -> Result<Hypothesis> {
    let enc = model.encode(feats, history)?;
    let pe = model.joint.enc_proj.forward(&enc);
    let mut state = model.predictor_start();
    let mut pp = vec![0.0; model.config.joint_dim];
    model.joint.pred_proj.forward_vec(&state.output, &mut pp);
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        frames: Vec::new(),
        log_score: 0.0,
    };
    for t in 0..enc.rows {
        let mut emitted = 0;
        loop {
            let lp = model.joint.log_probs_projected(pe.row(t), &pp);
            let (best, score) = argmax(&lp);
            if best == BLANK || emitted >= cap {
                hyp.log_score += lp[BLANK] as f64;
                break;
            }
            hyp.log_score += score as f64;
            hyp.tokens.push(best);
            hyp.frames.push(t);
            emitted += 1;
            state = model.predictor_step(&state, best);
            model.joint.pred_proj.forward_vec(&state.output, &mut pp);
        }
    }
    Ok(hyp)
}

fn argmax(xs: &[f32]) -> (usize, f32) {
    let mut best = (0, f32::NEG_INFINITY);
    for (i, &x) in xs.iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transducer::TransducerConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> TransducerModel {
        TransducerModel::new(
            TransducerConfig {
                feature_dim: 4,
                history_dim: 0,
                encoder_layers: 1,
                encoder_hidden: 3,
                predictor_layers: 1,
                predictor_hidden: 3,
                embed_dim: 3,
                joint_dim: 3,
                label_tokens: vec![],
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn blank_dominant_model_emits_nothing() {
        let mut m = model();
        m.joint.out.bias.w.data[BLANK] = 100.0;
        let x = Mat::uniform(6, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let h = greedy_decode(&m, &x, None, DEFAULT_EMISSION_CAP).unwrap();
        assert!(h.tokens.is_empty());
    }

    #[test]
    fn emission_cap_bounds_output() {
        let mut m = model();
        m.joint.out.bias.w.data[5] = 100.0;
        let x = Mat::uniform(4, 4, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let h = greedy_decode(&m, &x, None, 3).unwrap();
        assert_eq!(h.tokens, vec![5; 12]);
        assert_eq!(h.frames, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
    }

    #[test]
    fn empty_input_gives_empty_hypothesis() {
        let m = model();
        let h = greedy_decode(&m, &Mat::zeros(0, 4), None, 10).unwrap();
        assert!(h.tokens.is_empty());
    }
}
