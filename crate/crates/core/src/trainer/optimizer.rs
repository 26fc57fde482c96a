use indexmap::IndexMap;

use crate::numerics::{lit, ParamStore, Scalar, Tensor};
use crate::reasoner::OptimizerState;

/// AdamW hyperparameters beyond the learning rate and decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Linear ramp to `base` over `warmup` steps, constant afterwards. `step` is
/// 1-based.
pub fn learning_rate(base: f64, warmup: u64, step: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * step as f64 / warmup as f64
    }
}

/// L2 norm over every gradient tensor together.
pub fn global_norm<S: Scalar>(grads: &IndexMap<String, Tensor<S>>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data())
        .map(|x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut IndexMap<String, Tensor<S>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s: S = lit(max_norm / norm);
        for t in grads.values_mut() {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

impl<S: Scalar> OptimizerState<S> {
    /// Zero moments for every parameter of `params`.
    pub fn zeros_like(params: &ParamStore<S>) -> Self {
        let mut m = ParamStore::new();
        for p in params.iter() {
            let shape = p.tensor.shape().to_vec();
            let n = p.tensor.len();
            m.insert(
                p.name.clone(),
                Tensor::new(shape, vec![S::zero(); n]).expect("same shape"),
            )
            .expect("unique names");
        }
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

impl AdamW {
    /// One decoupled-decay update of every trainable parameter:
    /// `p ← p − lr·(m̂/(√v̂+ε) + λ·p)`. Trainable parameters without a
    /// gradient entry are treated as having a zero gradient.
    pub fn step<S: Scalar>(
        &self,
        params: &mut ParamStore<S>,
        grads: &IndexMap<String, Tensor<S>>,
        state: &mut OptimizerState<S>,
        lr: f64,
        weight_decay: f64,
    ) {
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps): (S, S, S) = (lit(self.beta1), lit(self.beta2), lit(self.eps));
        let (one, lr_s, wd, c1, c2): (S, S, S, S, S) = (S::one(), lit(lr), lit(weight_decay), lit(c1), lit(c2));
        for p in params.iter_mut().filter(|p| p.trainable) {
            let g = grads.get(&p.name);
            let m = state.m.tensor_mut(&p.name).expect("moment per parameter").data_mut();
            let v = state.v.tensor_mut(&p.name).expect("moment per parameter").data_mut();
            for (i, x) in p.tensor.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(S::zero(), |g| g.data()[i]);
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                *x = *x - lr_s * (update + wd * *x);
            }
        }
    }
}
