//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::ParamStore;

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
    /// `(name prefix, lr multiplier)`; first match wins.
    lr_scales: Vec<(String, f64)>,
    state: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(lr: f64, betas: (f64, f64), weight_decay: f64, eps: f64) -> Self {
        Self {
            lr,
            betas,
            weight_decay,
            eps,
            lr_scales: Vec::new(),
            state: HashMap::new(),
        }
    }

    pub fn with_lr_scale(mut self, prefix: impl Into<String>, scale: f64) -> Self {
        self.lr_scales.push((prefix.into(), scale));
        self
    }

    fn lr_for(&self, name: &str) -> f64 {
        self.lr_scales
            .iter()
            .find(|(p, _)| name.starts_with(p.as_str()))
            .map_or(self.lr, |(_, s)| self.lr * s)
    }

    /// Applies one update to every trainable parameter holding a gradient.
    /// Frozen parameters are skipped even if a stale gradient is present.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if !store.iter().any(|p| !p.frozen && p.grad().is_some()) {
            return Err(Error::StepBeforeBackward);
        }
        let (b1, b2) = self.betas;
        for i in 0..store.len() {
            let lr = self.lr_for(&store.iter().nth(i).unwrap().name);
            let p = store.iter_mut().nth(i).unwrap();
            if p.frozen {
                continue;
            }
            let Some(grad) = p.tensor.grad.take() else {
                continue;
            };
            let st = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
                step: 0,
            });
            st.step += 1;
            let bc1 = 1.0 - b1.powi(st.step);
            let bc2 = 1.0 - b2.powi(st.step);
            let decay = 1.0 - lr * self.weight_decay;
            for (k, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[k];
                st.m[k] = b1 * st.m[k] + (1.0 - b1) * g;
                st.v[k] = b2 * st.v[k] + (1.0 - b2) * g * g;
                let mhat = st.m[k] / bc1;
                let vhat = st.v[k] / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.tensor.grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(vec![0.3, -1.2]), false);
        store.get_mut(id).tensor.grad = Some(vec![0.0, 0.0]);
        let mut opt = AdamW::new(1e-2, (0.9, 0.999), 0.0, 1e-8);
        opt.step(&mut store).unwrap();
        assert_eq!(store.get(id).tensor.data(), &[0.3, -1.2]);
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        let (lr, b1, b2, wd, eps) = (1e-3, 0.9, 0.999, 1e-4, 1e-8);
        let w0 = [0.5, -0.25, 2.0];
        let g = [0.1, -3.0, 1e-3];
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(w0.to_vec()), false);
        store.get_mut(id).tensor.grad = Some(g.to_vec());
        AdamW::new(lr, (b1, b2), wd, eps).step(&mut store).unwrap();
        for k in 0..3 {
            let m = (1.0 - b1) * g[k];
            let v = (1.0 - b2) * g[k] * g[k];
            let mhat = m / (1.0 - b1);
            let vhat = v / (1.0 - b2);
            let expected = w0[k] * (1.0 - lr * wd) - lr * mhat / (vhat.sqrt() + eps);
            let got = store.get(id).tensor.data()[k];
            assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
            // ≈ −lr·g/(|g|+eps) on top of the decay
            let approx = w0[k] * (1.0 - lr * wd) - lr * g[k] / (g[k].abs() + eps);
            assert!((got - approx).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_with_stale_grad_is_untouched() {
        let mut store = ParamStore::new();
        let f = store.add("frozen", Tensor::from_vec(vec![1.5, 2.5]), true);
        let t = store.add("trainable", Tensor::from_vec(vec![1.0]), false);
        store.get_mut(f).tensor.grad = Some(vec![10.0, -10.0]);
        store.get_mut(t).tensor.grad = Some(vec![1.0]);
        let before = store.get(f).tensor.to_bits();
        let mut opt = AdamW::new(0.1, (0.9, 0.999), 0.1, 1e-8);
        for _ in 0..5 {
            opt.step(&mut store).unwrap();
        }
        assert_eq!(store.get(f).tensor.to_bits(), before);
        assert_ne!(store.get(t).tensor.data(), &[1.0]);
    }

    #[test]
    fn step_before_backward_errors() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_vec(vec![1.0]), false);
        let mut opt = AdamW::new(0.1, (0.9, 0.999), 0.0, 1e-8);
        assert!(matches!(opt.step(&mut store), Err(Error::StepBeforeBackward)));
    }

    #[test]
    fn lr_scale_applies_by_prefix() {
        let opt = AdamW::new(1.0, (0.9, 0.999), 0.0, 1e-8).with_lr_scale("backbone.", 0.1);
        assert_eq!(opt.lr_for("backbone.conv0.weight"), 0.1);
        assert_eq!(opt.lr_for("decoder.x"), 1.0);
    }
}
