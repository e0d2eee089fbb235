//! Pre-LayerNorm transformer encoder over a single unpadded sequence.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{gemm, matmul, prefixed, softmax_in_place, Linear, Mat, Param, Parameters};

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub table: Param,
}

impl Embedding {
    pub fn new(count: usize, dim: usize, std: f32, rng: &mut ChaCha8Rng) -> Self {
        let normal = rand_distr::Normal::new(0.0, std).expect("positive std");
        let data = (0..count * dim).map(|_| rng.sample(normal)).collect();
        Self {
            table: Param::new(Mat::from_vec(count, dim, data)),
        }
    }

    pub fn dim(&self) -> usize {
        self.table.w.cols
    }

    pub fn count(&self) -> usize {
        self.table.w.rows
    }

    pub fn forward(&self, ids: &[usize]) -> Mat {
        let mut out = Mat::zeros(ids.len(), self.dim());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.table.w.row(id));
        }
        out
    }

    pub fn backward(&mut self, ids: &[usize], dy: &Mat) {
        for (r, &id) in ids.iter().enumerate() {
            for (g, d) in self.table.g.row_mut(id).iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
    }
}

impl Parameters for Embedding {
    fn params(&self) -> Vec<(String, &Param)> {
        vec![("table".into(), &self.table)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("table".into(), &mut self.table)]
    }
}

const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

pub struct LayerNormCache {
    normed: Mat,
    inv_std: Vec<f32>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::new(Mat::from_vec(1, dim, vec![1.0; dim])),
            beta: Param::new(Mat::zeros(1, dim)),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LayerNormCache) {
        let d = x.cols;
        let mut normed = Mat::zeros(x.rows, d);
        let mut out = Mat::zeros(x.rows, d);
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let n = (row[j] - mean) * is;
                normed.row_mut(r)[j] = n;
                out.row_mut(r)[j] = n * self.gamma.w.data[j] + self.beta.w.data[j];
            }
        }
        (out, LayerNormCache { normed, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Mat) -> Mat {
        let d = dy.cols;
        let mut dx = Mat::zeros(dy.rows, d);
        for r in 0..dy.rows {
            let n = cache.normed.row(r);
            let g = dy.row(r);
            let mut dn = vec![0.0f32; d];
            for j in 0..d {
                self.gamma.g.data[j] += g[j] * n[j];
                self.beta.g.data[j] += g[j];
                dn[j] = g[j] * self.gamma.w.data[j];
            }
            let mean_dn = dn.iter().sum::<f32>() / d as f32;
            let mean_dn_n = dn.iter().zip(n).map(|(a, b)| a * b).sum::<f32>() / d as f32;
            let is = cache.inv_std[r];
            for j in 0..d {
                dx.row_mut(r)[j] = is * (dn[j] - mean_dn - n[j] * mean_dn_n);
            }
        }
        dx
    }
}

impl Parameters for LayerNorm {
    fn params(&self) -> Vec<(String, &Param)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("gamma".into(), &mut self.gamma), ("beta".into(), &mut self.beta)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

pub struct AttentionCache {
    q: Mat,
    k: Mat,
    v: Mat,
    /// Attention weights per head, each `L × L`.
    probs: Vec<Mat>,
    context: Mat,
}

fn head_slice(m: &Mat, h: usize, dk: usize) -> Mat {
    m.cols_slice(h * dk, (h + 1) * dk)
}

impl MultiHeadAttention {
    pub fn new(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert_eq!(dim % heads, 0, "model width must divide by head count");
        Self {
            query: Linear::new(dim, dim, rng),
            key: Linear::new(dim, dim, rng),
            value: Linear::new(dim, dim, rng),
            out: Linear::new(dim, dim, rng),
            heads,
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, AttentionCache) {
        let dim = x.cols;
        let dk = dim / self.heads;
        let scale = 1.0 / (dk as f32).sqrt();
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let mut context = Mat::zeros(x.rows, dim);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (head_slice(&q, h, dk), head_slice(&k, h, dk), head_slice(&v, h, dk));
            let mut s = Mat::zeros(x.rows, x.rows);
            gemm(scale, &qh, false, &kh, true, 0.0, &mut s);
            for r in 0..s.rows {
                softmax_in_place(s.row_mut(r));
            }
            let oh = matmul(&s, false, &vh, false);
            context.add_cols_from(h * dk, &oh);
            probs.push(s);
        }
        let y = self.out.forward(&context);
        (y, AttentionCache { q, k, v, probs, context })
    }

    pub fn backward(&mut self, x: &Mat, cache: &AttentionCache, dy: &Mat) -> Mat {
        let dim = x.cols;
        let dk = dim / self.heads;
        let scale = 1.0 / (dk as f32).sqrt();
        let dcontext = self.out.backward(&cache.context, dy);
        let mut dq = Mat::zeros(x.rows, dim);
        let mut dk_m = Mat::zeros(x.rows, dim);
        let mut dv = Mat::zeros(x.rows, dim);
        for h in 0..self.heads {
            let (qh, kh, vh) = (
                head_slice(&cache.q, h, dk),
                head_slice(&cache.k, h, dk),
                head_slice(&cache.v, h, dk),
            );
            let a = &cache.probs[h];
            let doh = head_slice(&dcontext, h, dk);
            let da = matmul(&doh, false, &vh, true);
            dv.add_cols_from(h * dk, &matmul(a, true, &doh, false));
            let mut ds = Mat::zeros(a.rows, a.cols);
            for r in 0..a.rows {
                let (ar, dar) = (a.row(r), da.row(r));
                let dot: f32 = ar.iter().zip(dar).map(|(p, d)| p * d).sum();
                for (o, (p, d)) in ds.row_mut(r).iter_mut().zip(ar.iter().zip(dar)) {
                    *o = p * (d - dot) * scale;
                }
            }
            dq.add_cols_from(h * dk, &matmul(&ds, false, &kh, false));
            dk_m.add_cols_from(h * dk, &matmul(&ds, true, &qh, false));
        }
        let mut dx = self.query.backward(x, &dq);
        dx.add_assign(&self.key.backward(x, &dk_m));
        dx.add_assign(&self.value.backward(x, &dv));
        dx
    }
}

impl Parameters for MultiHeadAttention {
    fn params(&self) -> Vec<(String, &Param)> {
        prefixed("query", self.query.params())
            .chain(prefixed("key", self.key.params()))
            .chain(prefixed("value", self.value.params()))
            .chain(prefixed("out", self.out.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let Self { query, key, value, out, .. } = self;
        prefixed("query", query.params_mut())
            .chain(prefixed("key", key.params_mut()))
            .chain(prefixed("value", value.params_mut()))
            .chain(prefixed("out", out.params_mut()))
            .collect()
    }
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

pub struct EncoderLayerCache {
    ln_attn: LayerNormCache,
    attn_in: Mat,
    attn: AttentionCache,
    ln_ff: LayerNormCache,
    ff_in_x: Mat,
    ff_pre: Mat,
    ff_act: Mat,
}

impl EncoderLayer {
    pub fn new(dim: usize, heads: usize, ff: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln_attn: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, heads, rng),
            ln_ff: LayerNorm::new(dim),
            ff_in: Linear::new(dim, ff, rng),
            ff_out: Linear::new(ff, dim, rng),
        }
    }

    pub fn forward(&self, x: &Mat) -> (Mat, EncoderLayerCache) {
        let (attn_in, ln_attn) = self.ln_attn.forward(x);
        let (a, attn) = self.attn.forward(&attn_in);
        let mut h = x.clone();
        h.add_assign(&a);
        let (ff_in_x, ln_ff) = self.ln_ff.forward(&h);
        let ff_pre = self.ff_in.forward(&ff_in_x);
        let mut ff_act = ff_pre.clone();
        ff_act.data.iter_mut().for_each(|v| *v = gelu(*v));
        let f = self.ff_out.forward(&ff_act);
        h.add_assign(&f);
        (
            h,
            EncoderLayerCache {
                ln_attn,
                attn_in,
                attn,
                ln_ff,
                ff_in_x,
                ff_pre,
                ff_act,
            },
        )
    }

    pub fn backward(&mut self, cache: &EncoderLayerCache, dy: &Mat) -> Mat {
        let mut dact = self.ff_out.backward(&cache.ff_act, dy);
        for (d, p) in dact.data.iter_mut().zip(&cache.ff_pre.data) {
            *d *= gelu_grad(*p);
        }
        let dffx = self.ff_in.backward(&cache.ff_in_x, &dact);
        let mut dh = dy.clone();
        dh.add_assign(&self.ln_ff.backward(&cache.ln_ff, &dffx));
        let dattn_in = self.attn.backward(&cache.attn_in, &cache.attn, &dh);
        let mut dx = dh;
        dx.add_assign(&self.ln_attn.backward(&cache.ln_attn, &dattn_in));
        dx
    }
}

impl Parameters for EncoderLayer {
    fn params(&self) -> Vec<(String, &Param)> {
        prefixed("ln_attn", self.ln_attn.params())
            .chain(prefixed("attn", self.attn.params()))
            .chain(prefixed("ln_ff", self.ln_ff.params()))
            .chain(prefixed("ff_in", self.ff_in.params()))
            .chain(prefixed("ff_out", self.ff_out.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let Self { ln_attn, attn, ln_ff, ff_in, ff_out } = self;
        prefixed("ln_attn", ln_attn.params_mut())
            .chain(prefixed("attn", attn.params_mut()))
            .chain(prefixed("ln_ff", ln_ff.params_mut()))
            .chain(prefixed("ff_in", ff_in.params_mut()))
            .chain(prefixed("ff_out", ff_out.params_mut()))
            .collect()
    }
}

/// Token + learned position embeddings, a stack of encoder layers and a
/// final LayerNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerEncoder {
    pub tokens: Embedding,
    pub positions: Embedding,
    pub layers: Vec<EncoderLayer>,
    pub ln_final: LayerNorm,
}

pub struct TransformerCache {
    ids: Vec<usize>,
    layers: Vec<EncoderLayerCache>,
    ln_final: LayerNormCache,
}

impl TransformerEncoder {
    pub fn new(
        vocab: usize,
        max_len: usize,
        dim: usize,
        heads: usize,
        ff: usize,
        layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            tokens: Embedding::new(vocab, dim, 0.1, rng),
            positions: Embedding::new(max_len, dim, 0.1, rng),
            layers: (0..layers).map(|_| EncoderLayer::new(dim, heads, ff, rng)).collect(),
            ln_final: LayerNorm::new(dim),
        }
    }

    pub fn max_len(&self) -> usize {
        self.positions.count()
    }

    pub fn forward(&self, ids: &[usize]) -> (Mat, TransformerCache) {
        let mut x = self.tokens.forward(ids);
        let positions: Vec<usize> = (0..ids.len()).collect();
        x.add_assign(&self.positions.forward(&positions));
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward(&x);
            caches.push(c);
            x = y;
        }
        let (out, ln_final) = self.ln_final.forward(&x);
        (
            out,
            TransformerCache {
                ids: ids.to_vec(),
                layers: caches,
                ln_final,
            },
        )
    }

    pub fn backward(&mut self, cache: &TransformerCache, dy: &Mat) {
        let mut d = self.ln_final.backward(&cache.ln_final, dy);
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers).rev() {
            d = layer.backward(c, &d);
        }
        self.tokens.backward(&cache.ids, &d);
        let positions: Vec<usize> = (0..cache.ids.len()).collect();
        self.positions.backward(&positions, &d);
    }
}

impl Parameters for TransformerEncoder {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut out: Vec<(String, &Param)> = prefixed("tokens", self.tokens.params())
            .chain(prefixed("positions", self.positions.params()))
            .collect();
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(prefixed(&format!("layer{i}"), l.params()));
        }
        out.extend(prefixed("ln_final", self.ln_final.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let Self {
            tokens,
            positions,
            layers,
            ln_final,
        } = self;
        let mut out: Vec<(String, &mut Param)> = prefixed("tokens", tokens.params_mut())
            .chain(prefixed("positions", positions.params_mut()))
            .collect();
        for (i, l) in layers.iter_mut().enumerate() {
            out.extend(prefixed(&format!("layer{i}"), l.params_mut()));
        }
        out.extend(prefixed("ln_final", ln_final.params_mut()));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut enc = TransformerEncoder::new(7, 8, 8, 2, 12, 2, &mut rng);
        let ids = [0usize, 3, 5, 1, 6];
        let c = Mat::uniform(5, 8, 1.0, &mut rng);
        let loss = |e: &TransformerEncoder| -> f64 {
            e.forward(&ids).0.data.iter().zip(&c.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let (_, cache) = enc.forward(&ids);
        enc.backward(&cache, &c);
        let analytic: Vec<(String, Vec<f32>)> =
            enc.params().into_iter().map(|(n, p)| (n, p.g.data.clone())).collect();
        let eps = 1e-2f32;
        let mut checked = 0;
        for (pi, (name, grads)) in analytic.iter().enumerate() {
            for i in (0..grads.len()).step_by(5) {
                let mut ep = enc.clone();
                ep.params_mut()[pi].1.w.data[i] += eps;
                let mut em = enc.clone();
                em.params_mut()[pi].1.w.data[i] -= eps;
                let fd = (loss(&ep) - loss(&em)) / (2.0 * eps as f64);
                let an = grads[i] as f64;
                assert!(
                    (fd - an).abs() < 5e-3 + 2e-2 * an.abs(),
                    "{name}[{i}]: fd {fd} vs analytic {an}"
                );
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn gelu_derivative() {
        for x in [-3.0f32, -0.5, 0.0, 0.7, 2.5] {
            let fd = (gelu(x + 1e-3) - gelu(x - 1e-3)) / 2e-3;
            assert!((fd - gelu_grad(x)).abs() < 1e-3);
        }
    }
}
