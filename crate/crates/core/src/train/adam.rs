//! Adam with the transformer warmup schedule and hard masking: pruned
//! positions receive an exactly-zero update no matter what the moment
//! buffers hold, so a weight pruned to 0.0 stays bitwise 0.0 forever.

use crate::sparse::SparsityMask;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 1e-3,
            warmup: 100,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// lr(t) = base * min(t^-1/2, t * warmup^-3/2); rises linearly to the peak
/// at t = warmup, then decays as 1/sqrt(t). t is 1-based.
pub fn lr_at(t: usize, cfg: &AdamConfig) -> f64 {
    assert!(t >= 1, "schedule is 1-based");
    let tf = t as f64;
    let w = cfg.warmup as f64;
    cfg.base_lr * (tf.powf(-0.5)).min(tf * w.powf(-1.5))
}

/// First and second moment buffers, keyed like the parameter map. Created
/// lazily on first touch; t counts completed steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    t: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState::default()
    }

    pub fn t(&self) -> usize {
        self.t
    }
}

/// One optimizer step over every parameter. Gradient entries must match
/// parameter shapes; parameters without a gradient entry only decay their
/// moments. Positions pruned by a mask entry (keyed by parameter name) are
/// left untouched.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    masks: &BTreeMap<String, SparsityMask>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) {
    state.t += 1;
    let lr = lr_at(state.t, cfg);
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (name, w) in params.iter_mut() {
        let n = w.len();
        if let Some(g) = grads.get(name) {
            assert_eq!(g.shape(), w.shape(), "gradient shape mismatch for {name}");
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let mask = masks.get(name);
        let grad = grads.get(name);
        let data = w.data_mut();
        for i in 0..n {
            let gi = grad.map_or(0.0, |g| g.data()[i] as f64);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            if mask.is_some_and(|mk| !mk.kept(i)) {
                continue;
            }
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] = (data[i] as f64 - lr * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;
        }
    }
}
