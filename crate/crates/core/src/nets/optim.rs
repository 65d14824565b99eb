use crate::diffcore::Tensor;

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the joint gradient to at most this global norm.
    pub clip_norm: Option<f64>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> f64 {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let gi = gi * scale;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
        norm
    }
}
