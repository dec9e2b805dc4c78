use alloc::vec::Vec;

use super::TrainConfig;
use crate::error::{contract, Result};
use crate::model::{Group, Model};
use crate::numerics::Tensor;

/// Linear warmup over `ceil(warmup_ratio · total)` steps, then cosine decay
/// reaching zero after the last step.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let warm = libm::ceil(cfg.warmup_ratio * total as f64) as usize;
    if step < warm {
        return cfg.lr * (step + 1) as f64 / warm as f64;
    }
    let span = (total - warm).max(1) as f64;
    let progress = (step - warm) as f64 / span;
    0.5 * cfg.lr * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u32,
    moments: Vec<(Tensor, Tensor)>,
    base_lr: f64,
}

impl AdamW {
    pub fn new(base_lr: f64, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            moments: Vec::new(),
            base_lr,
        }
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr
    }

    /// One update of every `group` parameter from gradients listed in
    /// parameter order.
    pub fn step(&mut self, model: &mut Model, group: Group, grads: &[(alloc::string::String, Tensor)], lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        let params: Vec<_> = model.params_mut().into_iter().filter(|p| p.1 == group).collect();
        if params.len() != grads.len() {
            return Err(contract!("{} gradients for {} parameters", grads.len(), params.len()));
        }
        if self.moments.is_empty() {
            self.moments = grads
                .iter()
                .map(|(_, g)| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())))
                .collect();
        }
        for ((name, _, p), ((gname, g), (m, v))) in params.into_iter().zip(grads.iter().zip(self.moments.iter_mut())) {
            if &name != gname || p.shape() != g.shape() {
                return Err(contract!("gradient {gname} does not match parameter {name}"));
            }
            let (pd, gd) = (p.data_mut(), g.data());
            for (((x, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / (libm::sqrt(*vi / bc2) + self.eps);
                *x -= lr * (update + self.weight_decay * *x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup_ratio: 0.1,
            ..TrainConfig::default()
        };
        assert!((lr_at(0, 100, &cfg) - 0.1).abs() < 1e-12);
        assert!((lr_at(9, 100, &cfg) - 1.0).abs() < 1e-12);
        assert!((lr_at(10, 100, &cfg) - 1.0).abs() < 1e-12);
        assert!(lr_at(99, 100, &cfg) < 1e-3);
        for s in 10..99 {
            assert!(lr_at(s + 1, 100, &cfg) <= lr_at(s, 100, &cfg));
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        use crate::model::ModelConfig;
        let mut m = Model::random(ModelConfig::tiny(1, 8, 2, 12, 2), 1).unwrap();
        let before = m.clone();
        let grads: Vec<_> = m
            .params()
            .into_iter()
            .filter(|p| p.1 == Group::Adapter)
            .map(|p| (p.0, Tensor::filled(p.2.shape(), 3.0)))
            .collect();
        let mut opt = AdamW::new(0.01, 0.0);
        opt.step(&mut m, Group::Adapter, &grads, 0.01).unwrap();
        for ((_, _, a), (_, _, b)) in m.params().into_iter().zip(before.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                let d = y - x;
                assert!(d == 0.0 || (d - 0.01).abs() < 1e-9);
            }
        }
        assert_eq!(m.checksum(Group::Base), before.checksum(Group::Base));
    }
}
