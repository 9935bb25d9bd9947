//! Adam with decoupled L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, shaped like the parameters they track.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update: every parameter is first shrunk by `1 - lr * l2`, then
    /// moved by the bias-corrected Adam delta.
    pub fn step(&mut self, params: &mut Params, grads: &[Tensor], lr: f64, l2: f64) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::Invalid(format!(
                "adam tracks {} tensors, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let decay = 1.0 - lr * l2;
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("parameter {:?}, gradient {:?}", p.shape(), g.shape()),
                ));
            }
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                let mi = BETA1 * m.data()[i] + (1.0 - BETA1) * gi;
                let vi = BETA2 * v.data()[i] + (1.0 - BETA2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let delta = lr * (mi / bc1) / ((vi / bc2).sqrt() + EPSILON);
                pd[i] = pd[i] * decay - delta;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> Params {
        let mut p = Params::new();
        p.insert("w", Tensor::scalar(value));
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = single(1.25);
        let mut s = AdamState::new(&p);
        for _ in 0..5 {
            s.step(&mut p, &[Tensor::scalar(0.0)], 1e-2, 0.0).unwrap();
        }
        assert_eq!(p.get("w").unwrap().item(), 1.25);
    }

    #[test]
    fn first_step_is_bounded_by_lr() {
        for g in [1e-6, 0.3, -4.0, 250.0] {
            let mut p = single(0.0);
            let mut s = AdamState::new(&p);
            s.step(&mut p, &[Tensor::scalar(g)], 1e-3, 0.0).unwrap();
            let delta = p.get("w").unwrap().item();
            assert!(delta.abs() <= 1e-3 * (1.0 + 1e-6), "{g}: {delta}");
            assert_eq!(delta.signum(), -g.signum());
        }
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut p = single(0.0);
        let mut s = AdamState::new(&p);
        for _ in 0..200 {
            let w = p.get("w").unwrap().item();
            s.step(&mut p, &[Tensor::scalar(2.0 * (w - 3.0))], 0.1, 0.0).unwrap();
        }
        let w = p.get("w").unwrap().item();
        assert!((w - 3.0).abs() < 1e-3, "{w}");
    }

    #[test]
    fn decay_shrinks_parameters() {
        let mut p = single(2.0);
        let mut s = AdamState::new(&p);
        s.step(&mut p, &[Tensor::scalar(0.0)], 0.1, 0.01).unwrap();
        assert!((p.get("w").unwrap().item() - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut p = single(0.0);
        let mut s = AdamState::new(&p);
        assert!(s.step(&mut p, &[], 0.1, 0.0).is_err());
        assert!(s.step(&mut p, &[Tensor::zeros(2, 1)], 0.1, 0.0).is_err());
    }
}
