use serde::{Deserialize, Serialize};

use super::{Grads, ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: Some(1.0) }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, ps: &ParamStore<T>) -> Self {
        let zeros = || ps.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect();
        Self { cfg, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update and returns the pre-clipping gradient norm.
    pub fn update(&mut self, ps: &mut ParamStore<T>, grads: &mut Grads<T>, lr: f64) -> f64 {
        let norm = grads.global_norm();
        if let Some(c) = self.cfg.clip_norm {
            if norm > c {
                grads.scale(T::from_f64(c / norm));
            }
        }
        self.step += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step_size = T::from_f64(lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
        let eps = T::from_f64(self.cfg.eps);
        let decay = T::from_f64(1.0 - lr * self.cfg.weight_decay);
        for (((t, g), m), v) in ps.tensors_mut().iter_mut().zip(&grads.data).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &gi), mi), vi) in t.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1t * *mi + (T::one() - b1t) * gi;
                *vi = b2t * *vi + (T::one() - b2t) * gi * gi;
                *p = *p * decay - step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("x", super::super::Tensor { shape: vec![2], data: vec![3.0, -2.0] });
        let mut opt = Adam::new(AdamConfig { clip_norm: None, ..Default::default() }, &ps);
        for _ in 0..2000 {
            let mut g = ps.zero_grads();
            let x = ps.get(id).to_vec();
            g.get_mut(id).copy_from_slice(&[2.0 * (x[0] - 1.0), 2.0 * (x[1] + 0.5)]);
            opt.update(&mut ps, &mut g, 0.01);
        }
        let x = ps.get(id);
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("x", super::super::Tensor { shape: vec![1], data: vec![0.0] });
        let mut opt = Adam::new(AdamConfig { clip_norm: Some(1.0), ..Default::default() }, &ps);
        let mut g = ps.zero_grads();
        g.get_mut(id)[0] = 50.0;
        let norm = opt.update(&mut ps, &mut g, 0.1);
        assert_eq!(norm, 50.0);
        assert!((ps.get(id)[0] + 0.1).abs() < 1e-6);
    }
}
