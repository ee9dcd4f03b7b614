use super::tensor::Param;
use crate::{Error, Result};

/// Optimizer, schedule and loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            learning_rate: 1e-3,
            decay: 0.95,
            epochs: 10,
            batch_size: 16,
            seed: 0,
        }
    }
}

pub const ADAM_EPS: f64 = 1e-8;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::param("decay", format!("{} outside (0, 1]", self.decay)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate", format!("{} must be > 0", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::param(name, format!("{b} outside [0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be >= 1"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay.powi(epoch as i32)
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub steps: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One Adam update over `params` using their accumulated gradients.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Param>,
    state: &mut AdamState,
    config: &TrainConfig,
    epoch: usize,
) -> Result<()> {
    let params: Vec<&mut Param> = params.into_iter().collect();
    for (i, p) in params.iter().enumerate() {
        if let Some(pos) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of parameter tensor {i} at element {pos}"),
            });
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() || state.m.iter().zip(&params).any(|(m, p)| m.len() != p.value.len()) {
        return Err(Error::param("adam state", "parameter shapes changed between steps"));
    }
    state.steps += 1;
    let t = state.steps as i32;
    let lr = config.rate_at(epoch);
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for ((p, m), v) in params.into_iter().zip(&mut state.m).zip(&mut state.v) {
        let Param { value, grad } = p;
        for (((w, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *w -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn param(values: &[f64]) -> Param {
        Param::new(Tensor::new(vec![values.len()], values.to_vec()).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let cfg = TrainConfig::default();
        let mut p = param(&[1.0, -2.0]);
        let mut st = AdamState::new();
        p.grad.data_mut().copy_from_slice(&[0.5, 0.5]);
        adam_step([&mut p], &mut st, &cfg, 0).unwrap();
        let (m0, v0) = (st.m[0][0], st.v[0][0]);
        let before = p.value.clone();
        p.grad.fill(0.0);
        adam_step([&mut p], &mut st, &cfg, 0).unwrap();
        // m decays but remains nonzero, so the weight still moves by the
        // momentum term; a fresh state with zero gradient must not move at all.
        assert!((st.m[0][0] - 0.9 * m0).abs() < 1e-15);
        assert!((st.v[0][0] - 0.999 * v0).abs() < 1e-15);
        assert_ne!(p.value, before);

        let mut q = param(&[1.0, -2.0]);
        let mut fresh = AdamState::new();
        adam_step([&mut q], &mut fresh, &cfg, 3).unwrap();
        assert_eq!(q.value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_step_approaches_base_rate() {
        let cfg = TrainConfig::default();
        let mut p = param(&[0.0]);
        let mut st = AdamState::new();
        let mut last = 0.0;
        for _ in 0..5000 {
            p.grad.data_mut()[0] = 0.3;
            let before = p.value.data()[0];
            adam_step([&mut p], &mut st, &cfg, 0).unwrap();
            last = before - p.value.data()[0];
        }
        // oracle: iterate the recurrence by hand
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut step = 0.0;
        for t in 1..=5000 {
            m = 0.9 * m + 0.1 * 0.3;
            v = 0.999 * v + 0.001 * 0.09;
            step = 1e-3 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + ADAM_EPS);
        }
        assert!((last - step).abs() < 1e-12);
        assert!((last - 1e-3).abs() / 1e-3 < 1e-6);
    }

    #[test]
    fn decay_schedule() {
        let cfg = TrainConfig {
            decay: 0.9,
            ..TrainConfig::default()
        };
        assert!((cfg.rate_at(2) - 0.81e-3).abs() < 1e-18);
        assert!(TrainConfig { decay: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { decay: 1.1, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = param(&[1.0]);
        p.grad.data_mut()[0] = f64::NAN;
        let err = adam_step([&mut p], &mut AdamState::new(), &TrainConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(p.value.data(), &[1.0]);
    }
}
