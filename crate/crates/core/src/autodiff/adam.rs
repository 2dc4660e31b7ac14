use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers and step count for one store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// Bias-corrected Adam update applied in place. Fails without touching the
/// parameters if any gradient is non-finite.
pub fn adam_step(params: &mut ParamStore, cfg: &AdamConfig, state: &mut AdamState) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "optimizer state for {} parameters, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    if let Some(i) = params.grads().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient coordinate {i}")));
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let (values, grads) = params.values_and_grads_mut();
    for i in 0..values.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        values[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add_block("p", vec![vals.len()], vals.to_vec()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(&[1.0, -2.0]);
        let mut st = AdamState::new(2);
        adam_step(&mut s, &AdamConfig::default(), &mut st).unwrap();
        assert_eq!(s.values(), &[1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_steps_at_learning_rate() {
        let mut s = store(&[0.0]);
        let mut st = AdamState::new(1);
        let cfg = AdamConfig::default();
        let mut last = 0.0;
        for _ in 0..2000 {
            s.grads_mut()[0] = 3.7;
            let before = s.values()[0];
            adam_step(&mut s, &cfg, &mut st).unwrap();
            last = before - s.values()[0];
        }
        assert!((last - cfg.lr).abs() < 1e-8, "{last}");
    }

    #[test]
    fn identical_inputs_stay_bit_identical() {
        let mut a = store(&[0.3, 0.1]);
        let mut b = store(&[0.3, 0.1]);
        let (mut sa, mut sb) = (AdamState::new(2), AdamState::new(2));
        for k in 0..50 {
            let g = [(k as f64).sin(), (k as f64 * 0.3).cos()];
            a.grads_mut().copy_from_slice(&g);
            b.grads_mut().copy_from_slice(&g);
            adam_step(&mut a, &AdamConfig::default(), &mut sa).unwrap();
            adam_step(&mut b, &AdamConfig::default(), &mut sb).unwrap();
        }
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut s = store(&[1.0]);
        s.grads_mut()[0] = f64::NAN;
        let mut st = AdamState::new(1);
        assert!(adam_step(&mut s, &AdamConfig::default(), &mut st).is_err());
        assert_eq!(s.values(), &[1.0]);
    }
}
