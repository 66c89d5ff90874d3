use serde::{Deserialize, Serialize};

use super::{NumericsError, ParameterStore, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments for every parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParameterStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn check(&self, store: &ParameterStore<T>) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(NumericsError::UninitializedOptimizer(format!(
                "{} moment tensors for {} parameters",
                self.m.len(),
                store.len()
            )));
        }
        for ((p, m), v) in store.iter().zip(&self.m).zip(&self.v) {
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(NumericsError::UninitializedOptimizer(format!(
                    "moment shape {:?} for parameter `{}` of shape {:?}",
                    m.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> AdamState<U> {
        AdamState {
            config: self.config,
            step: self.step,
            m: self.m.iter().map(Tensor::cast).collect(),
            v: self.v.iter().map(Tensor::cast).collect(),
        }
    }
}

/// One bias-corrected Adam update from the accumulated gradients, which are
/// cleared afterwards.
pub fn adam_step<T: Real>(store: &mut ParameterStore<T>, state: &mut AdamState<T>) -> Result<()> {
    state.check(store)?;
    state.step += 1;
    let c = state.config;
    let t = state.step as f64;
    let b1 = T::of(c.beta1);
    let b2 = T::of(c.beta2);
    let one = T::one();
    let bc1 = T::of(1.0 - c.beta1.powf(t));
    let bc2 = T::of(1.0 - c.beta2.powf(t));
    let lr = T::of(c.learning_rate);
    let eps = T::of(c.epsilon);

    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let vals = p.value.data_mut();
        let grads = p.grad.data_mut();
        for (((x, g), mi), vi) in vals
            .iter_mut()
            .zip(grads.iter_mut())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * *g;
            *vi = b2 * *vi + (one - b2) * *g * *g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
            *g = T::zero();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64, grad: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        let id = s.add("x", Tensor::vector(vec![value])).unwrap();
        let _ = id;
        s.iter_mut().next().unwrap().grad.data_mut()[0] = grad;
        s
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut s = scalar_store(1.25, 0.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.25]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0, -0.02, 1e3] {
            let mut s = scalar_store(0.0, g);
            let mut st = AdamState::new(&s, AdamConfig::default());
            adam_step(&mut s, &mut st).unwrap();
            let x = s.iter().next().unwrap().value.data()[0];
            // m̂ = g, v̂ = g², so Δ = −α g/(|g| + ε)
            let expected = -1e-4 * g / (g.abs() + 1e-8);
            assert!((x - expected).abs() < 1e-15);
            assert!((x.abs() - 1e-4).abs() < 1e-6);
            assert_eq!(x.signum(), -g.signum());
            assert_eq!(s.iter().next().unwrap().grad.data(), &[0.0]);
        }
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut s = scalar_store(0.0, 2.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        adam_step(&mut s, &mut st).unwrap();
        let x1 = s.iter().next().unwrap().value.data()[0];
        s.iter_mut().next().unwrap().grad.data_mut()[0] = 2.0;
        adam_step(&mut s, &mut st).unwrap();
        let x2 = s.iter().next().unwrap().value.data()[0];
        assert!(x1 < 0.0 && x2 < x1);
        // Bias-corrected moments of a constant gradient are exact: each step is α·g/(|g|+ε).
        assert!((x2 - 2.0 * x1).abs() < 1e-15);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut s = scalar_store(0.0, 1.0);
        let mut st = AdamState::<f64>::new(&ParameterStore::new(), AdamConfig::default());
        assert!(matches!(
            adam_step(&mut s, &mut st),
            Err(NumericsError::UninitializedOptimizer(_))
        ));
    }
}
