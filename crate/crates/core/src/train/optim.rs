use crate::error::{Error, Result};
use crate::train::ParameterStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update from the current gradient buffers, which
/// are zeroed afterwards. A non-finite gradient aborts before anything is
/// modified.
pub fn adam_step(store: &mut ParameterStore, cfg: &AdamConfig) -> Result<()> {
    if let Some(e) = store.entries().iter().find(|e| !e.grad.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of `{}`", e.name)));
    }
    let t = store.step + 1;
    let c1 = 1.0 - cfg.beta1.powf(t as f64);
    let c2 = 1.0 - cfg.beta2.powf(t as f64);
    for e in store.entries_mut() {
        let g = e.grad.data();
        let m = e.m.data_mut();
        for (m, &g) in m.iter_mut().zip(g) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        }
        let v = e.v.data_mut();
        for (v, &g) in v.iter_mut().zip(g) {
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        }
        let (m, v) = (e.m.data(), e.v.data());
        for ((theta, &m), &v) in e.value.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = m / c1;
            let v_hat = v / c2;
            *theta -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    store.step = t;
    store.zero_grads();
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(store: &mut ParameterStore, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::invalid(format!(
            "clip norm must be positive, got {max_norm}"
        )));
    }
    let norm = store.grad_norm();
    if norm > max_norm {
        let scale = max_norm / norm;
        for e in store.entries_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with_grad(g: Vec<f64>) -> ParameterStore {
        let mut s = ParameterStore::new();
        let n = g.len();
        let id = s
            .register("w", Tensor::vector(vec![0.5; n]).unwrap())
            .unwrap();
        s.entry_mut(id).grad = Tensor::vector(g).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_no_op_but_counts() {
        let mut s = store_with_grad(vec![0.0, 0.0]);
        adam_step(&mut s, &AdamConfig::default()).unwrap();
        assert_eq!(s.entries()[0].value.data(), &[0.5, 0.5]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store_with_grad(vec![3.0, -0.2]);
        let cfg = AdamConfig::default();
        adam_step(&mut s, &cfg).unwrap();
        let v = s.entries()[0].value.data();
        assert!((v[0] - (0.5 - 1e-3)).abs() < 1e-9);
        assert!((v[1] - (0.5 + 1e-3)).abs() < 1e-9);
        assert!(s.entries()[0].grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = store_with_grad(vec![1.0]);
        s.entries_mut()[0].grad.data_mut()[0] = f64::NAN;
        let before = s.clone();
        let err = adam_step(&mut s, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(s.step, before.step);
    }

    #[test]
    fn clipping_cases() {
        let mut s = store_with_grad(vec![3.0, 4.0]);
        assert_eq!(clip_gradients(&mut s, 2.5).unwrap(), 5.0);
        assert_eq!(s.entries()[0].grad.data(), &[1.5, 2.0]);
        let mut s = store_with_grad(vec![0.3, 0.4]);
        clip_gradients(&mut s, 2.5).unwrap();
        assert_eq!(s.entries()[0].grad.data(), &[0.3, 0.4]);
        assert!(clip_gradients(&mut s, 0.0).is_err());
    }
}
