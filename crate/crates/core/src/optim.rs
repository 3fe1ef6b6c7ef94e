//! Adam with bias correction and optional global gradient-norm clipping.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale all gradients so their joint L2 norm is at most this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Moment buffers, one pair per parameter in store order.
#[derive(Clone, Debug)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(store: &ParamStore<F>, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Joint L2 norm of all present gradients.
pub fn global_grad_norm<F: Scalar>(store: &ParamStore<F>) -> F {
    store
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .fold(F::zero(), |acc, g| acc + g.sq_norm())
        .sqrt()
}

/// One Adam update over every parameter; gradients are cleared afterwards.
/// Returns the pre-clipping gradient norm.
pub fn adam_step<F: Scalar>(store: &mut ParamStore<F>, state: &mut AdamState<F>) -> Result<F> {
    if state.m.len() != store.len() {
        return Err(Error::Config(format!(
            "optimizer state has {} slots for {} parameters",
            state.m.len(),
            store.len()
        )));
    }
    for (id, p) in store.iter() {
        let Some(g) = &p.grad else {
            return Err(Error::MissingGrad(p.name.clone()));
        };
        let i = id.index();
        if g.shape() != p.value.shape() || state.m[i].shape() != p.value.shape() {
            return Err(Error::dim("adam_step", p.value.shape(), state.m[i].shape()));
        }
    }

    let norm = global_grad_norm(store);
    let clip = match state.config.clip_norm {
        Some(c) if norm > F::lit(c) => F::lit(c) / norm,
        _ => F::one(),
    };

    state.step += 1;
    let cfg = state.config;
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let bc1 = F::one() - F::lit(cfg.beta1.powi(state.step as i32));
    let bc2 = F::one() - F::lit(cfg.beta2.powi(state.step as i32));
    let lr = F::lit(cfg.lr);
    let eps = F::lit(cfg.eps);

    for (i, p) in store.iter_mut().enumerate() {
        let g = p.grad.take().expect("checked above");
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((theta, &gr), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let gr = gr * clip;
            *mi = b1 * *mi + (F::one() - b1) * gr;
            *vi = b2 * *vi + (F::one() - b2) * gr * gr;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn zero_grad_is_identity() {
        let mut s = scalar_store(0.7);
        let mut st = AdamState::new(&s, AdamConfig::default());
        for _ in 0..3 {
            s.iter_mut().for_each(|p| p.grad = Some(Tensor::scalar(0.0)));
            adam_step(&mut s, &mut st).unwrap();
        }
        assert_eq!(s.iter().next().unwrap().1.value.data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        let cfg = AdamConfig::default();
        let mut st = AdamState::new(&s, cfg);
        s.iter_mut().for_each(|p| p.grad = Some(Tensor::scalar(1.0)));
        adam_step(&mut s, &mut st).unwrap();
        let theta = s.iter().next().unwrap().1.value.data()[0];
        assert!(((1.0 - theta) - cfg.lr).abs() < 1e-9);
        assert_eq!(st.step, 1);
        assert!(s.iter().all(|(_, p)| p.grad.is_none()));
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let err = adam_step(&mut s, &mut st).unwrap_err();
        assert!(err.to_string().contains("theta"));
    }

    #[test]
    fn clipping_bounds_the_update_norm() {
        let mut s = scalar_store(0.0);
        let cfg = AdamConfig {
            clip_norm: Some(1.0),
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&s, cfg);
        s.iter_mut().for_each(|p| p.grad = Some(Tensor::scalar(50.0)));
        let norm = adam_step(&mut s, &mut st).unwrap();
        assert_eq!(norm, 50.0);
        assert!((st.m[0].data()[0] - 0.1).abs() < 1e-12);
    }
}
