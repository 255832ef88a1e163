//! Bias-corrected Adam over a flat list of parameter matrices.

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Optimizer state: one pair of moment matrices per parameter, plus the
/// step counter used for bias correction.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl AdamState {
    /// Fresh state with zero moments shaped like `params`.
    pub fn new(params: &[Matrix], learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
            v: params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update in place. Rejects any shape disagreement between
/// parameters, gradients, and moments.
pub fn adam_step(params: &mut [Matrix], grads: &[Matrix], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            context: "adam_step".into(),
            expected: format!("{} parameters", state.m.len()),
            got: format!("{} params / {} grads", params.len(), grads.len()),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads.iter()).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::ShapeMismatch {
                context: format!("adam_step parameter {i}"),
                expected: format!("{:?}", state.m[i].shape()),
                got: format!("param {:?} grad {:?}", p.shape(), g.shape()),
            });
        }
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let gd = g.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        for j in 0..pd.len() {
            md[j] = state.beta1 * md[j] + (1.0 - state.beta1) * gd[j];
            vd[j] = state.beta2 * vd[j] + (1.0 - state.beta2) * gd[j] * gd[j];
            let m_hat = md[j] / bc1;
            let v_hat = vd[j] / bc2;
            pd[j] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Matrix::from_vec(1, 2, vec![0.3, -0.7]).unwrap()];
        let grads = vec![Matrix::zeros(1, 2)];
        let mut st = AdamState::new(&params, 1e-2);
        let before = params[0].clone();
        adam_step(&mut params, &grads, &mut st).unwrap();
        assert_eq!(params[0], before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // With constant g, m_hat = g and v_hat = g^2, so the step is
        // lr * g / (|g| + eps) ~ lr * sign(g).
        let mut params = vec![Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap()];
        let grads = vec![Matrix::from_vec(1, 2, vec![0.5, -3.0]).unwrap()];
        let mut st = AdamState::new(&params, 1e-3);
        adam_step(&mut params, &grads, &mut st).unwrap();
        assert!((params[0].get(0, 0) - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((params[0].get(0, 1) - (2.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn hundred_steps_shrink_quadratic() {
        // Oracle run: f(w) = ||w||^2, grad = 2w, from (1, 1).
        let mut params = vec![Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap()];
        let mut st = AdamState::new(&params, 1e-2);
        let mut prev = params[0].frobenius_norm();
        for _ in 0..100 {
            let grads = vec![params[0].scale(2.0)];
            adam_step(&mut params, &grads, &mut st).unwrap();
            let now = params[0].frobenius_norm();
            assert!(now < prev, "norm must strictly decrease");
            prev = now;
        }
        assert_eq!(st.step_count(), 100);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = vec![Matrix::zeros(2, 2)];
        let grads = vec![Matrix::zeros(2, 3)];
        let mut st = AdamState::new(&params, 1e-2);
        assert!(adam_step(&mut params, &grads, &mut st).is_err());
    }
}
