//! AdamW with decoupled weight decay.

use crate::model::{ParamSet, Scalar};

use super::{TrainConfig, TrainError};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub t: u64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

/// One update: `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut OptimState<T>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if !grads.all_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(TrainError::Shape("parameters, gradients and moments differ in layout".into()));
    }
    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = T::of(1.0 - b1.powi(state.t as i32));
    let bc2 = T::of(1.0 - b2.powi(state.t as i32));
    let (b1, b2) = (T::of(b1), T::of(b2));
    let (lr, eps, wd) = (T::of(cfg.learning_rate), T::of(cfg.eps), T::of(cfg.weight_decay));
    let one = T::one();
    for i in 0..params.len() {
        let g = grads.data(i);
        let m = state.m.data_mut(i);
        for (mj, &gj) in m.iter_mut().zip(g) {
            *mj = b1 * *mj + (one - b1) * gj;
        }
        let v = state.v.data_mut(i);
        for (vj, &gj) in v.iter_mut().zip(g) {
            *vj = b2 * *vj + (one - b2) * gj * gj;
        }
        let (m, v) = (state.m.data(i), state.v.data(i));
        let p = params.data_mut(i);
        for ((pj, &mj), &vj) in p.iter_mut().zip(m).zip(v) {
            let mhat = mj / bc1;
            let vhat = vj / bc2;
            *pj -= lr * (mhat / (vhat.sqrt() + eps) + wd * *pj);
        }
    }
    Ok(())
}

/// Rescales `grads` so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut ParamSet<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Tensor;

    fn scalar_set(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.push("theta", Tensor::from_vec(&[1], vec![v]));
        p
    }

    fn cfg(lr: f64, wd: f64) -> TrainConfig {
        TrainConfig { learning_rate: lr, weight_decay: wd, beta1: 0.9, beta2: 0.999, eps: 1e-8, ..TrainConfig::default() }
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = scalar_set(0.7);
        let g = scalar_set(0.0);
        let mut s = OptimState::new(&p);
        for _ in 0..3 {
            adamw_step(&mut p, &g, &mut s, &cfg(0.1, 0.0)).unwrap();
        }
        assert_eq!(p.data(0), &[0.7]);
        assert_eq!(s.t, 3);
    }

    #[test]
    fn first_step_hand_value() {
        let mut p = scalar_set(1.0);
        let g = scalar_set(1.0);
        let mut s = OptimState::new(&p);
        adamw_step(&mut p, &g, &mut s, &cfg(0.1, 0.0)).unwrap();
        // m_hat = v_hat = 1 on the first step.
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.data(0)[0] - expected).abs() < 1e-15);
        assert!((p.data(0)[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_only() {
        let mut p = scalar_set(2.0);
        let g = scalar_set(0.0);
        let mut s = OptimState::new(&p);
        adamw_step(&mut p, &g, &mut s, &cfg(0.1, 0.01)).unwrap();
        assert!((p.data(0)[0] - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn no_decay_equals_adam() {
        let mut p = scalar_set(0.3);
        let mut s = OptimState::new(&p);
        let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 0.3f64);
        for (t, gv) in [0.5, -1.2, 0.1, 2.0].into_iter().enumerate() {
            adamw_step(&mut p, &scalar_set(gv), &mut s, &cfg(0.01, 0.0)).unwrap();
            m = 0.9 * m + 0.1 * gv;
            v = 0.999 * v + 0.001 * gv * gv;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            theta -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert_eq!(p.data(0)[0], theta);
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = scalar_set(1.0);
        let mut s = OptimState::new(&p);
        let err = adamw_step(&mut p, &scalar_set(f64::NAN), &mut s, &cfg(0.1, 0.0)).unwrap_err();
        assert_eq!(err.to_string(), "non-finite gradient");
        assert_eq!(s.t, 0);
    }

    #[test]
    fn clipping() {
        let mut g = ParamSet::new();
        g.push("a", Tensor::from_vec(&[2], vec![3.0f64, 4.0]));
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
