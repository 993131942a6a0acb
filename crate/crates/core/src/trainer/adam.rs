use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers mirroring a [`ParamStore`], plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn for_store(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            t: 0,
            hyper: AdamHyper::default(),
        }
    }

    /// One update of every parameter. `grads` follows store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64, wd: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} tensors, store has {}, got {} gradients",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        self.t += 1;
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            adam_update(
                store.get_mut(id),
                &grads[i],
                &mut self.m[i],
                &mut self.v[i],
                self.t,
                lr,
                wd,
                &self.hyper,
            )?;
        }
        Ok(())
    }

    /// Rounds moments to `f32` precision, matching checkpoint storage.
    pub fn round_to_f32(&mut self) {
        self.m.iter_mut().chain(&mut self.v).for_each(Tensor::round_to_f32);
    }
}

/// Bias-corrected Adam with decoupled weight decay, at step `t ≥ 1`:
/// `p ← p − lr·m̂/(√v̂ + eps) − lr·wd·p`.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    lr: f64,
    wd: f64,
    h: &AdamHyper,
) -> Result<()> {
    if grad.shape() != param.shape() || m.shape() != param.shape() || v.shape() != param.shape() {
        return Err(Error::Dimension(format!(
            "adam: parameter {:?}, gradient {:?}, moments {:?}/{:?}",
            param.shape(),
            grad.shape(),
            m.shape(),
            v.shape()
        )));
    }
    if t == 0 {
        return Err(Error::Contract("adam step counter starts at 1".into()));
    }
    let c1 = 1.0 - h.beta1.powi(t as i32);
    let c2 = 1.0 - h.beta2.powi(t as i32);
    let (m, v) = (m.data_mut(), v.data_mut());
    for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let (mh, vh) = (m[i] / c1, v[i] / c2);
        *p -= lr * mh / (vh.sqrt() + h.eps) + lr * wd * *p;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(p0: f64, grads: &[f64], lr: f64, wd: f64) -> f64 {
        let mut p = Tensor::scalar(p0);
        let (mut m, mut v) = (Tensor::scalar(0.0), Tensor::scalar(0.0));
        for (t, &g) in grads.iter().enumerate() {
            adam_update(&mut p, &Tensor::scalar(g), &mut m, &mut v, t as u64 + 1, lr, wd, &AdamHyper::default()).unwrap();
        }
        p.data()[0]
    }

    #[test]
    fn first_step_closed_form() {
        // m̂ = v̂ = 1, so the step is lr / (1 + eps).
        let p = run(0.0, &[1.0], 1e-3, 0.0);
        assert!((p - (-1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
        // The commonly quoted −9.99999995e-4 is within 5e-12 of the exact value.
        assert!((p + 9.99999995e-4).abs() < 1e-11);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        assert_eq!(run(0.7, &[0.0; 10], 1e-3, 0.0), 0.7);
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let (lr, wd) = (0.1, 0.5);
        let p = run(2.0, &[0.0; 5], lr, wd);
        assert!((p - 2.0 * (1.0 - lr * wd).powi(5)).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::zeros(&[2]);
        let (mut m, mut v) = (Tensor::zeros(&[2]), Tensor::zeros(&[2]));
        let err = adam_update(&mut p, &Tensor::zeros(&[3]), &mut m, &mut v, 1, 1e-3, 0.0, &AdamHyper::default());
        assert!(matches!(err, Err(Error::Dimension(_))));
    }
}
