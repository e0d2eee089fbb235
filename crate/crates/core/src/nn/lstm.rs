//! LSTM layers (gate order i, f, g, o) with full backpropagation through time.

use rand_chacha::ChaCha8Rng;

use super::{gemm, prefixed, sigmoid, Mat, Param, Parameters};

#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub w_ih: Param,
    pub w_hh: Param,
    pub bias: Param,
    pub hidden: usize,
}

/// Recurrent state for step-wise evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f32>,
    pub c: Vec<f32>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Activations kept from the forward pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    /// Post-nonlinearity gates per time step, `T × 4H`.
    gates: Mat,
    cells: Mat,
    tanh_cells: Mat,
    pub output: Mat,
    reverse: bool,
}

impl Lstm {
    pub fn new(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden as f32).sqrt();
        Self {
            w_ih: Param::new(Mat::uniform(4 * hidden, input, bound, rng)),
            w_hh: Param::new(Mat::uniform(4 * hidden, hidden, bound, rng)),
            bias: Param::new(Mat::uniform(1, 4 * hidden, bound, rng)),
            hidden,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.w.cols
    }

    /// Input projection `x W_ihᵀ + b` for every frame.
    pub fn input_projection(&self, x: &Mat) -> Mat {
        let mut xp = Mat::zeros(x.rows, 4 * self.hidden);
        for r in 0..xp.rows {
            xp.row_mut(r).copy_from_slice(&self.bias.w.data);
        }
        gemm(1.0, x, false, &self.w_ih.w, true, 1.0, &mut xp);
        xp
    }

    fn recurrent_into(&self, h: &[f32], out: &mut [f32]) {
        let w = &self.w_hh.w;
        for (o, row) in out.iter_mut().zip(w.data.chunks_exact(self.hidden)) {
            *o += row.iter().zip(h).map(|(a, b)| a * b).sum::<f32>();
        }
    }

    fn cell(&self, pre: &mut [f32], c_prev: &[f32], c: &mut [f32], tc: &mut [f32], h: &mut [f32]) {
        let hd = self.hidden;
        for j in 0..hd {
            let i = sigmoid(pre[j]);
            let f = sigmoid(pre[hd + j]);
            let g = pre[2 * hd + j].tanh();
            let o = sigmoid(pre[3 * hd + j]);
            pre[j] = i;
            pre[hd + j] = f;
            pre[2 * hd + j] = g;
            pre[3 * hd + j] = o;
            c[j] = f * c_prev[j] + i * g;
            tc[j] = c[j].tanh();
            h[j] = o * tc[j];
        }
    }

    /// One step from a pre-computed input projection row.
    pub fn step_projected(&self, xp: &[f32], state: &LstmState) -> LstmState {
        let hd = self.hidden;
        let mut pre = xp.to_vec();
        self.recurrent_into(&state.h, &mut pre);
        let mut next = LstmState::zeros(hd);
        let mut tc = vec![0.0; hd];
        self.cell(&mut pre, &state.c, &mut next.c, &mut tc, &mut next.h);
        next
    }

    pub fn step(&self, x: &[f32], state: &LstmState) -> LstmState {
        let w = &self.w_ih.w;
        let mut xp = self.bias.w.data.clone();
        for (o, row) in xp.iter_mut().zip(w.data.chunks_exact(w.cols)) {
            *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>();
        }
        self.step_projected(&xp, state)
    }

    /// Runs the whole sequence (right-to-left when `reverse`) from a zero state.
    pub fn forward(&self, x: &Mat, reverse: bool) -> LstmCache {
        let xp = self.input_projection(x);
        self.forward_projected(xp, reverse)
    }

    pub fn forward_projected(&self, mut gates: Mat, reverse: bool) -> LstmCache {
        let (t_len, hd) = (gates.rows, self.hidden);
        let mut cells = Mat::zeros(t_len, hd);
        let mut tanh_cells = Mat::zeros(t_len, hd);
        let mut output = Mat::zeros(t_len, hd);
        let zeros = vec![0.0; hd];
        let mut prev: Option<usize> = None;
        for s in 0..t_len {
            let t = if reverse { t_len - 1 - s } else { s };
            let (h_prev, c_prev) = match prev {
                Some(p) => (output.row(p).to_vec(), cells.row(p).to_vec()),
                None => (zeros.clone(), zeros.clone()),
            };
            let pre = gates.row_mut(t);
            self.recurrent_into(&h_prev, pre);
            let mut c = vec![0.0; hd];
            let mut tc = vec![0.0; hd];
            let mut h = vec![0.0; hd];
            self.cell(pre, &c_prev, &mut c, &mut tc, &mut h);
            cells.row_mut(t).copy_from_slice(&c);
            tanh_cells.row_mut(t).copy_from_slice(&tc);
            output.row_mut(t).copy_from_slice(&h);
            prev = Some(t);
        }
        LstmCache {
            gates,
            cells,
            tanh_cells,
            output,
            reverse,
        }
    }

    /// Backpropagates `dh` (gradient w.r.t. every output) and returns the
    /// gradient w.r.t. the input projection `x W_ihᵀ + b`.
    pub fn backward_projected(&mut self, cache: &LstmCache, dh: &Mat) -> Mat {
        let (t_len, hd) = (cache.output.rows, self.hidden);
        let mut dgates = Mat::zeros(t_len, 4 * hd);
        let mut h_prev_mat = Mat::zeros(t_len, hd);
        let mut dh_next = vec![0.0f32; hd];
        let mut dc_next = vec![0.0f32; hd];
        for s in (0..t_len).rev() {
            let t = if cache.reverse { t_len - 1 - s } else { s };
            let prev = if s == 0 {
                None
            } else if cache.reverse {
                Some(t + 1)
            } else {
                Some(t - 1)
            };
            let g = cache.gates.row(t);
            let tc = cache.tanh_cells.row(t);
            let dg = dgates.row_mut(t);
            for j in 0..hd {
                let (i, f, gg, o) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
                let c_prev = prev.map_or(0.0, |p| cache.cells.row(p)[j]);
                let dhj = dh.row(t)[j] + dh_next[j];
                let d_o = dhj * tc[j];
                let dc = dc_next[j] + dhj * o * (1.0 - tc[j] * tc[j]);
                dg[j] = dc * gg * i * (1.0 - i);
                dg[hd + j] = dc * c_prev * f * (1.0 - f);
                dg[2 * hd + j] = dc * i * (1.0 - gg * gg);
                dg[3 * hd + j] = d_o * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            let w = &self.w_hh.w;
            for (row, d) in w.data.chunks_exact(hd).zip(dgates.row(t)) {
                for (acc, wv) in dh_next.iter_mut().zip(row) {
                    *acc += d * wv;
                }
            }
            if let Some(p) = prev {
                h_prev_mat.row_mut(t).copy_from_slice(cache.output.row(p));
            }
        }
        gemm(1.0, &dgates, true, &h_prev_mat, false, 1.0, &mut self.w_hh.g);
        let db = &mut self.bias.g.data;
        for r in 0..t_len {
            for (g, d) in db.iter_mut().zip(dgates.row(r)) {
                *g += d;
            }
        }
        dgates
    }

    /// Full backward pass: accumulates all parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Mat, cache: &LstmCache, dh: &Mat, need_dx: bool) -> Option<Mat> {
        let dgates = self.backward_projected(cache, dh);
        gemm(1.0, &dgates, true, x, false, 1.0, &mut self.w_ih.g);
        need_dx.then(|| {
            let mut dx = Mat::zeros(x.rows, x.cols);
            gemm(1.0, &dgates, false, &self.w_ih.w, false, 0.0, &mut dx);
            dx
        })
    }
}

impl Parameters for Lstm {
    fn params(&self) -> Vec<(String, &Param)> {
        vec![
            ("w_ih".into(), &self.w_ih),
            ("w_hh".into(), &self.w_hh),
            ("bias".into(), &self.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![
            ("w_ih".into(), &mut self.w_ih),
            ("w_hh".into(), &mut self.w_hh),
            ("bias".into(), &mut self.bias),
        ]
    }
}

/// Bidirectional layer; output rows are `[forward | backward]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

pub struct BiLstmCache {
    fwd: LstmCache,
    bwd: LstmCache,
    pub output: Mat,
}

impl BiLstm {
    pub fn new(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fwd: Lstm::new(input, hidden, rng),
            bwd: Lstm::new(input, hidden, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    pub fn input_dim(&self) -> usize {
        self.fwd.input_dim()
    }

    pub fn forward(&self, x: &Mat) -> BiLstmCache {
        self.forward_projected(self.fwd.input_projection(x), self.bwd.input_projection(x))
    }

    pub fn forward_projected(&self, xp_fwd: Mat, xp_bwd: Mat) -> BiLstmCache {
        let fwd = self.fwd.forward_projected(xp_fwd, false);
        let bwd = self.bwd.forward_projected(xp_bwd, true);
        let output = Mat::hconcat(&fwd.output, &bwd.output);
        BiLstmCache { fwd, bwd, output }
    }

    pub fn backward(&mut self, x: &Mat, cache: &BiLstmCache, dy: &Mat, need_dx: bool) -> Option<Mat> {
        let hd = self.hidden();
        let dh_f = dy.cols_slice(0, hd);
        let dh_b = dy.cols_slice(hd, 2 * hd);
        let dx_f = self.fwd.backward(x, &cache.fwd, &dh_f, need_dx);
        let dx_b = self.bwd.backward(x, &cache.bwd, &dh_b, need_dx);
        match (dx_f, dx_b) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        }
    }
}

impl Parameters for BiLstm {
    fn params(&self) -> Vec<(String, &Param)> {
        prefixed("fwd", self.fwd.params())
            .chain(prefixed("bwd", self.bwd.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let Self { fwd, bwd } = self;
        prefixed("fwd", fwd.params_mut())
            .chain(prefixed("bwd", bwd.params_mut()))
            .collect()
    }
}
