//! Steepest descent with classical momentum and decoupled-from-nothing
//! weight decay added straight into the gradient (the convention matching
//! momentum-SGD in the usual detector training recipes).

use crate::tensor::Tensor;

pub struct SgdMomentum {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Option<Tensor>>,
}

impl SgdMomentum {
    pub fn new(param_count: usize, momentum: f64, weight_decay: f64) -> SgdMomentum {
        SgdMomentum {
            momentum,
            weight_decay,
            velocity: (0..param_count).map(|_| None).collect(),
        }
    }

    /// One update: v <- m*v + (g + wd*p); p <- p - lr*v.
    /// Parameters whose gradient is absent this step are left untouched.
    pub fn step(&mut self, params: &mut [(String, Tensor)], grads: &[Option<Tensor>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        assert_eq!(params.len(), self.velocity.len(), "optimizer sized for a different model");
        for i in 0..params.len() {
            let Some(g) = &grads[i] else { continue };
            let p = &mut params[i].1;
            assert_eq!(p.dims(), g.dims(), "gradient shape mismatch for {}", params[i].0);
            let v = self.velocity[i].get_or_insert_with(|| Tensor::zeros(g.dims()));
            let (m, wd) = (self.momentum, self.weight_decay);
            for j in 0..g.len() {
                let upd = g.data()[j] + wd * p.data()[j];
                let vj = m * v.data()[j] + upd;
                v.data_mut()[j] = vj;
                p.data_mut()[j] -= lr * vj;
            }
        }
    }
}

/// Half-cosine decay from `base` to 0 over `total` steps.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step as f64 / total as f64).clamp(0.0, 1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Linear ramp 0 -> 1 over the first `frac` of `total` steps.
pub fn warmup_factor(step: u64, total: u64, frac: f64) -> f64 {
    let span = (total as f64 * frac).floor();
    if span <= 0.0 {
        return 1.0;
    }
    ((step as f64) / span).min(1.0)
}
