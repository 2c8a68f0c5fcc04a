//! Bias-corrected adaptive-moment optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step_count: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    pub hyper: AdamConfig,
}

impl OptimizerState {
    pub fn new(param_count: usize, hyper: AdamConfig) -> Result<Self> {
        let ok = hyper.beta1 > 0.0
            && hyper.beta1 < 1.0
            && hyper.beta2 > 0.0
            && hyper.beta2 < 1.0
            && hyper.epsilon > 0.0
            && hyper.learning_rate > 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("bad optimizer settings {hyper:?}")));
        }
        Ok(Self {
            step_count: 0,
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            hyper,
        })
    }

    pub fn param_count(&self) -> usize {
        self.first_moment.len()
    }
}

/// One Adam update over `params` in order. Every tensor must carry a gradient.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut OptimizerState) -> Result<()> {
    let total: usize = params.iter().map(|p| p.len()).sum();
    if total != state.param_count() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} parameters, got {total}",
            state.param_count()
        )));
    }
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::Contract(format!("parameter tensor {i} has no gradient")));
    }
    state.step_count += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.hyper;
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let mut offset = 0;
    for p in params.iter_mut() {
        let grad = p.grad().expect("checked above").to_vec();
        let n = grad.len();
        let m = &mut state.first_moment[offset..offset + n];
        let v = &mut state.second_moment[offset..offset + n];
        for (((w, g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        offset += n;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::vector(vec![0.5, -1.0]).unwrap().with_grad();
        p.set_grad(vec![0.0, 0.0]).unwrap();
        let mut st = OptimizerState::new(2, AdamConfig::default()).unwrap();
        adam_step(&mut [&mut p], &mut st).unwrap();
        assert_eq!(p.data(), &[0.5, -1.0]);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_is_signed_learning_rate() {
        // m̂ = g and v̂ = g² at step 1, so Δ = -α g / (|g| + ε)
        let lr = 0.01;
        for g in [3.0, -0.2, 1e-3] {
            let mut p = Tensor::vector(vec![1.0]).unwrap().with_grad();
            p.set_grad(vec![g]).unwrap();
            let hyper = AdamConfig { learning_rate: lr, ..Default::default() };
            let mut st = OptimizerState::new(1, hyper).unwrap();
            adam_step(&mut [&mut p], &mut st).unwrap();
            let expected = 1.0 - lr * g / (f64::abs(g) + 1e-8);
            assert!((p.data()[0] - expected).abs() < 1e-12);
            assert!((p.data()[0] - (1.0 - lr * g.signum())).abs() < 1e-7);
        }
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut p = Tensor::vector(vec![1.0]).unwrap().with_grad();
        let mut st = OptimizerState::new(1, AdamConfig::default()).unwrap();
        assert!(matches!(adam_step(&mut [&mut p], &mut st), Err(Error::Contract(_))));
    }

    #[test]
    fn rejects_bad_hyper() {
        let bad = AdamConfig { beta1: 1.0, ..Default::default() };
        assert!(OptimizerState::new(1, bad).is_err());
    }

    #[test]
    fn repeated_runs_identical() {
        let run = || {
            let mut p = Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad();
            let mut st = OptimizerState::new(2, AdamConfig::default()).unwrap();
            for i in 0..20 {
                let g = vec![p.data()[0] * 0.3 + i as f64, -p.data()[1]];
                p.set_grad(g).unwrap();
                adam_step(&mut [&mut p], &mut st).unwrap();
            }
            p.data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
