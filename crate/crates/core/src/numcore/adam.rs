use super::Scalar;
use crate::error::{Error, Result};

/// Moment estimates and hyperparameters for Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step_count: u64,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    pub learning_rate: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(num_params: usize, learning_rate: T, beta1: T, beta2: T, epsilon: T) -> Result<Self> {
        let unit = T::zero()..T::one();
        if !(unit.contains(&beta1) && unit.contains(&beta2)) || beta1 <= T::zero() || beta2 <= T::zero() {
            return Err(Error::config("Adam betas must lie in (0, 1)"));
        }
        if epsilon <= T::zero() {
            return Err(Error::config("Adam epsilon must be positive"));
        }
        Ok(Self {
            first_moment: vec![T::zero(); num_params],
            second_moment: vec![T::zero(); num_params],
            step_count: 0,
            beta1,
            beta2,
            epsilon,
            learning_rate,
        })
    }

    /// Training defaults: β1 = 0.9, β2 = 0.99, ε = 1e-8.
    pub fn with_defaults(num_params: usize, learning_rate: T) -> Self {
        Self::new(num_params, learning_rate, T::lit(0.9), T::lit(0.99), T::lit(1e-8))
            .expect("default Adam hyperparameters are valid")
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Scalar>(params: &mut [T], grads: &[T], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::dim(format!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}
