use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient rejects the step
/// and leaves parameters and moments untouched.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Config(format!(
            "adam shape mismatch: params {}, grads {}, moments {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient at parameter {i}: {}", grads[i])));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut st, 1e-2).unwrap();
        // m = 0.1, v = 0.001, m_hat = 1, v_hat = 1
        let expected = -1e-2 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
        assert!((p[0] + 9.99999e-3).abs() < 1e-8);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.5, -0.5], &mut st, 1e-3).unwrap();
        let after_one = p.clone();
        let (m, v) = (st.m.clone(), st.v.clone());
        let mut st_zero = st.clone();
        st_zero.m.iter_mut().for_each(|x| *x = 0.0);
        st_zero.v.iter_mut().for_each(|x| *x = 0.0);
        let mut q = after_one.clone();
        adam_step(&mut q, &[0.0, 0.0], &mut st_zero, 1e-3).unwrap();
        assert_eq!(q, after_one);
        adam_step(&mut p, &[0.0, 0.0], &mut st, 1e-3).unwrap();
        for i in 0..2 {
            assert!((st.m[i] - 0.9 * m[i]).abs() < 1e-18);
            assert!((st.v[i] - 0.999 * v[i]).abs() < 1e-18);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = vec![1.0];
        let mut st = AdamState::new(1);
        assert!(matches!(adam_step(&mut p, &[f64::NAN], &mut st, 1e-3), Err(Error::Numerical(_))));
        assert_eq!(p, vec![1.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = vec![0.3, -0.1, 2.0];
            let mut st = AdamState::new(3);
            for k in 0..50 {
                let g: Vec<f64> = p.iter().map(|x| (x * 1.7 + k as f64 * 0.01).sin()).collect();
                adam_step(&mut p, &g, &mut st, 5e-4).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
