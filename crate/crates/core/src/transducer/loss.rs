//! RNN-T and CTC negative log-likelihoods with analytic gradients, computed
//! by log-space forward-backward recursions.

use crate::error::{Error, Result};

/// Log-space zero. Values at or below it are treated as impossible and stay
/// impossible under addition.
pub const LOG_ZERO: f64 = -1e30;

#[inline]
fn clamp_log(x: f64) -> f64 {
    if x <= LOG_ZERO {
        LOG_ZERO
    } else {
        x
    }
}

#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a <= LOG_ZERO {
        return clamp_log(b);
    }
    if b <= LOG_ZERO {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[inline]
fn log_mul(a: f64, b: f64) -> f64 {
    if a <= LOG_ZERO || b <= LOG_ZERO {
        LOG_ZERO
    } else {
        clamp_log(a + b)
    }
}

/// Output log-probabilities over the `T × (U+1)` transducer grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub frames: usize,
    pub vocab: usize,
    pub blank: usize,
    pub target: Vec<usize>,
    /// Row-major `[t][u][k]`.
    pub log_probs: Vec<f64>,
}

impl Lattice {
    pub fn new(frames: usize, vocab: usize, blank: usize, target: Vec<usize>, log_probs: Vec<f64>) -> Result<Self> {
        let expected = frames * (target.len() + 1) * vocab;
        if log_probs.len() != expected {
            return Err(Error::Shape(format!(
                "lattice has {} log-probs, expected {frames}x{}x{vocab}",
                log_probs.len(),
                target.len() + 1
            )));
        }
        Ok(Self {
            frames,
            vocab,
            blank,
            target,
            log_probs,
        })
    }

    pub fn labels(&self) -> usize {
        self.target.len()
    }

    #[inline]
    pub fn index(&self, t: usize, u: usize, k: usize) -> usize {
        (t * (self.target.len() + 1) + u) * self.vocab + k
    }

    #[inline]
    pub fn lp(&self, t: usize, u: usize, k: usize) -> f64 {
        clamp_log(self.log_probs[self.index(t, u, k)])
    }
}

fn check_inputs(log_probs: &[f64], target: &[usize], vocab: usize, blank: usize) -> Result<()> {
    if log_probs.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Numeric("log-probabilities contain NaN or +inf".into()));
    }
    if blank >= vocab {
        return Err(Error::Domain(format!("blank {blank} outside vocabulary of {vocab}")));
    }
    if let Some(&bad) = target.iter().find(|&&y| y >= vocab || y == blank) {
        return Err(Error::Domain(format!("target label {bad} is blank or outside the vocabulary")));
    }
    Ok(())
}

/// Loss value and gradient with respect to every input log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Transducer loss `-log Σ_alignments Π P`, where every alignment ends with
/// a blank emitted from node `(T-1, U)`.
///
/// The gradient is zero everywhere except at the blank and next-label
/// entries of each node; an impossible target yields `+∞` and a zero
/// gradient.
pub fn rnnt_loss(lattice: &Lattice) -> Result<LossOutput> {
    let (t_len, u_len, blank) = (lattice.frames, lattice.labels(), lattice.blank);
    check_inputs(&lattice.log_probs, &lattice.target, lattice.vocab, blank)?;
    if t_len == 0 {
        return Err(Error::ImpossibleAlignment(format!(
            "{u_len} labels cannot be aligned to zero frames"
        )));
    }
    let width = u_len + 1;
    let y = &lattice.target;
    let mut alpha = vec![LOG_ZERO; t_len * width];
    alpha[0] = 0.0;
    for t in 0..t_len {
        for u in 0..width {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = LOG_ZERO;
            if t > 0 {
                a = log_mul(alpha[(t - 1) * width + u], lattice.lp(t - 1, u, blank));
            }
            if u > 0 {
                a = log_add(a, log_mul(alpha[t * width + u - 1], lattice.lp(t, u - 1, y[u - 1])));
            }
            alpha[t * width + u] = a;
        }
    }
    let final_blank = lattice.lp(t_len - 1, u_len, blank);
    let log_likelihood = log_mul(alpha[(t_len - 1) * width + u_len], final_blank);
    let mut grad = vec![0.0; lattice.log_probs.len()];
    if log_likelihood <= LOG_ZERO {
        return Ok(LossOutput {
            loss: f64::INFINITY,
            grad,
        });
    }

    let mut beta = vec![LOG_ZERO; t_len * width];
    beta[(t_len - 1) * width + u_len] = final_blank;
    for t in (0..t_len).rev() {
        for u in (0..width).rev() {
            if t == t_len - 1 && u == u_len {
                continue;
            }
            let mut b = LOG_ZERO;
            if t + 1 < t_len {
                b = log_mul(beta[(t + 1) * width + u], lattice.lp(t, u, blank));
            }
            if u < u_len {
                b = log_add(b, log_mul(beta[t * width + u + 1], lattice.lp(t, u, y[u])));
            }
            beta[t * width + u] = b;
        }
    }

    for t in 0..t_len {
        for u in 0..width {
            let a = alpha[t * width + u];
            if a <= LOG_ZERO {
                continue;
            }
            let next_blank = if t + 1 < t_len {
                beta[(t + 1) * width + u]
            } else if u == u_len {
                0.0
            } else {
                LOG_ZERO
            };
            let occ = log_mul(log_mul(a, next_blank), lattice.lp(t, u, blank));
            if occ > LOG_ZERO {
                grad[lattice.index(t, u, blank)] = -(occ - log_likelihood).exp();
            }
            if u < u_len {
                let occ = log_mul(log_mul(a, beta[t * width + u + 1]), lattice.lp(t, u, y[u]));
                if occ > LOG_ZERO {
                    grad[lattice.index(t, u, y[u])] = -(occ - log_likelihood).exp();
                }
            }
        }
    }
    Ok(LossOutput {
        loss: -log_likelihood,
        grad,
    })
}

/// CTC loss over frame-level log-probabilities (`T × V`, row-major).
pub fn ctc_loss(frame_log_probs: &[f64], vocab: usize, target: &[usize], blank: usize) -> Result<LossOutput> {
    check_inputs(frame_log_probs, target, vocab, blank)?;
    if vocab == 0 || frame_log_probs.len() % vocab != 0 {
        return Err(Error::Shape(format!(
            "{} log-probs do not form frames of {vocab}",
            frame_log_probs.len()
        )));
    }
    let t_len = frame_log_probs.len() / vocab;
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    if t_len < target.len() + repeats || (t_len == 0 && target.is_empty()) {
        return Err(Error::ImpossibleAlignment(format!(
            "{t_len} frames cannot carry {} labels with {repeats} repeats",
            target.len()
        )));
    }
    let lp = |t: usize, k: usize| clamp_log(frame_log_probs[t * vocab + k]);
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.iter().flat_map(|&y| [y, blank]))
        .collect();
    let s_len = ext.len();
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![LOG_ZERO; t_len * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                a = log_add(a, alpha[(t - 1) * s_len + s - 1]);
            }
            if can_skip(s) {
                a = log_add(a, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = log_mul(a, lp(t, ext[s]));
        }
    }
    let last = (t_len - 1) * s_len;
    let mut log_likelihood = alpha[last + s_len - 1];
    if s_len > 1 {
        log_likelihood = log_add(log_likelihood, alpha[last + s_len - 2]);
    }
    let mut grad = vec![0.0; frame_log_probs.len()];
    if log_likelihood <= LOG_ZERO {
        return Ok(LossOutput {
            loss: f64::INFINITY,
            grad,
        });
    }

    let mut beta = vec![LOG_ZERO; t_len * s_len];
    beta[last + s_len - 1] = lp(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                b = log_add(b, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add(b, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] = log_mul(b, lp(t, ext[s]));
        }
    }

    // α and β both include the emission at t, so one copy is divided out.
    let mut occupancy = vec![LOG_ZERO; vocab];
    for t in 0..t_len {
        occupancy.iter_mut().for_each(|o| *o = LOG_ZERO);
        for s in 0..s_len {
            let ab = log_mul(alpha[t * s_len + s], beta[t * s_len + s]);
            occupancy[ext[s]] = log_add(occupancy[ext[s]], ab);
        }
        for k in 0..vocab {
            if occupancy[k] > LOG_ZERO {
                grad[t * vocab + k] = -(occupancy[k] - lp(t, k) - log_likelihood).exp();
            }
        }
    }
    Ok(LossOutput {
        loss: -log_likelihood,
        grad,
    })
}
