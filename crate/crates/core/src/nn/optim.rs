use super::Param;

/// Adam with decoupled weight decay. Moment buffers are matched to
/// parameters by visiting order, which every model keeps stable.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new(0.01)
    }
}

impl AdamW {
    pub fn new(weight_decay: f32) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [(String, &mut Param)], lr: f32) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|(_, p)| (vec![0.0; p.w.data.len()], vec![0.0; p.w.data.len()]))
                .collect();
        }
        assert_eq!(self.moments.len(), params.len(), "parameter set changed under the optimizer");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((_, p), (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            for (((w, g), m), v) in p.w.data.iter_mut().zip(&p.g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
    }
}
