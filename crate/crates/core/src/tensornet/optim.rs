use serde::{Deserialize, Serialize};

use super::tape::{Gradients, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.0 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState { step: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are left
/// untouched.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut AdamState, lr: f64, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.tensors.iter_mut().enumerate() {
        let Some(Some(g)) = grads.params.get(i) else { continue };
        update(p, g, &mut state.m[i], &mut state.v[i], lr, c1, c2, cfg);
    }
}

#[allow(clippy::too_many_arguments)]
fn update(p: &mut Tensor, g: &Tensor, m: &mut [f64], v: &mut [f64], lr: f64, c1: f64, c2: f64, cfg: &AdamConfig) {
    for (((x, &gi), mi), vi) in p.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
        let gi = gi + cfg.weight_decay * *x;
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        let mhat = *mi / c1;
        let vhat = *vi / c2;
        *x -= lr * mhat / (vhat.sqrt() + cfg.epsilon);
    }
}

/// Learning rate for a 1-based epoch: `lr0` halved once for every listed
/// epoch that has already finished.
pub fn lr_at_epoch(lr0: f64, halving_epochs: &[usize], epoch: usize) -> f64 {
    let halvings = halving_epochs.iter().filter(|&&h| h < epoch).count();
    lr0 * 0.5f64.powi(halvings as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::default();
        s.push("x", Tensor::from_vec(vec![x]));
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_store(0.25);
        let mut st = AdamState::new(&p);
        let g = Gradients::zeros_like(&p);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut st, 0.1, &AdamConfig::default());
        }
        assert_eq!(p.tensors[0].data[0], 0.25);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_store(0.0);
        let mut st = AdamState::new(&p);
        let mut g = Gradients::zeros_like(&p);
        g.params[0] = Some(Tensor::from_vec(vec![1.0]));
        adam_step(&mut p, &g, &mut st, 0.1, &AdamConfig::default());
        assert!((p.tensors[0].data[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn halving_schedule() {
        let h = [4, 6, 8];
        let lr: Vec<f64> = (1..=10).map(|e| lr_at_epoch(1.0, &h, e)).collect();
        assert_eq!(lr, vec![1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.25, 0.25, 0.125, 0.125]);
    }
}
