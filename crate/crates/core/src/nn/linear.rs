use rand_chacha::ChaCha8Rng;

use super::{gemm, Mat, Param, Parameters};

/// Affine map `y = x Wᵀ + b` applied row-wise; `W` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// Uniform fan-in initialization, `U(-1/√in, 1/√in)` for weight and bias.
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input as f32).sqrt();
        Self {
            weight: Param::new(Mat::uniform(output, input, bound, rng)),
            bias: Param::new(Mat::uniform(1, output, bound, rng)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.w.cols
    }

    pub fn output_dim(&self) -> usize {
        self.weight.w.rows
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut y = Mat::zeros(x.rows, self.output_dim());
        for r in 0..y.rows {
            y.row_mut(r).copy_from_slice(&self.bias.w.data);
        }
        gemm(1.0, x, false, &self.weight.w, true, 1.0, &mut y);
        y
    }

    /// Single-row forward pass without allocation of a matrix input.
    pub fn forward_vec(&self, x: &[f32], out: &mut [f32]) {
        let w = &self.weight.w;
        for (o, (row, b)) in out.iter_mut().zip(w.data.chunks_exact(w.cols).zip(&self.bias.w.data)) {
            *o = b + row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>();
        }
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &Mat, dy: &Mat) -> Mat {
        self.accumulate(x, dy);
        let mut dx = Mat::zeros(x.rows, self.input_dim());
        gemm(1.0, dy, false, &self.weight.w, false, 0.0, &mut dx);
        dx
    }

    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn accumulate(&mut self, x: &Mat, dy: &Mat) {
        gemm(1.0, dy, true, x, false, 1.0, &mut self.weight.g);
        let db = &mut self.bias.g.data;
        for r in 0..dy.rows {
            for (g, d) in db.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
    }
}

impl Parameters for Linear {
    fn params(&self) -> Vec<(String, &Param)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::new(3, 2, &mut rng);
        let x = Mat::uniform(4, 3, 1.0, &mut rng);
        let c = Mat::uniform(4, 2, 1.0, &mut rng);
        // L = Σ c ⊙ y
        let loss = |l: &Linear, x: &Mat| -> f64 {
            l.forward(x).data.iter().zip(&c.data).map(|(a, b)| (a * b) as f64).sum()
        };
        let dx = lin.backward(&x, &c);
        let eps = 1e-2;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * eps as f64);
            assert!((fd - dx.data[i] as f64).abs() < 1e-3);
        }
        for i in 0..lin.weight.w.data.len() {
            let mut lp = lin.clone();
            lp.weight.w.data[i] += eps;
            let mut lm = lin.clone();
            lm.weight.w.data[i] -= eps;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps as f64);
            assert!((fd - lin.weight.g.data[i] as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn forward_vec_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::new(5, 3, &mut rng);
        let x = Mat::uniform(1, 5, 1.0, &mut rng);
        let mut out = vec![0.0; 3];
        lin.forward_vec(&x.data, &mut out);
        for (a, b) in out.iter().zip(&lin.forward(&x).data) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
