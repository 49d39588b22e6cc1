//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restores moments saved alongside a checkpoint.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Checkpoint("optimizer moments do not pair up".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.m.clear();
        self.v.clear();
    }

    /// Applies one update to every parameter whose group passes `trainable`.
    /// A NaN anywhere in the gradients aborts the step before anything moves.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Tensor],
        trainable: impl Fn(ParamGroup) -> bool,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (p, g) in store.params().iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::config(format!(
                    "gradient for `{}` has shape {:?}, parameter {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
            if trainable(p.group) && g.data().iter().any(|x| x.is_nan()) {
                return Err(Error::NanGradient {
                    param: p.name.clone(),
                });
            }
        }
        if self.m.is_empty() {
            self.m = store.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let p = &store.params()[i];
            if !trainable(p.group) {
                continue;
            }
            let mut w = p.value.data().to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, &gj) in g.data().iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
            }
            let shape = p.value.shape().to_vec();
            store.set_value(i, Tensor::from_parts(shape, w))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", ParamGroup::Encoder, Tensor::from_vec(vec![v]));
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(0.5);
        let mut adam = Adam::new(1e-3);
        adam.step(&mut s, &[Tensor::from_vec(vec![1.0])], |_| true).unwrap();
        let delta = s.params()[0].value.item() - 0.5;
        assert!((delta + 1e-3).abs() < 1e-10, "{delta}");
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut s = store(2.0);
        let mut adam = Adam::new(1e-2);
        adam.step(&mut s, &[Tensor::from_vec(vec![1.0])], |_| true).unwrap();
        let before = s.params()[0].value.item();
        let m_before = adam.moments().0[0][0];
        adam.step(&mut s, &[Tensor::from_vec(vec![0.0])], |_| true).unwrap();
        let m_after = adam.moments().0[0][0];
        assert!(m_after.abs() < m_before.abs());
        // a decaying first moment still moves the weight; a fresh state does not
        let mut fresh = store(2.0);
        Adam::new(1e-2)
            .step(&mut fresh, &[Tensor::from_vec(vec![0.0])], |_| true)
            .unwrap();
        assert_eq!(fresh.params()[0].value.item(), 2.0);
        assert!(before != 2.0);
    }

    #[test]
    fn constant_gradient_approaches_learning_rate_steps() {
        let mut s = store(0.0);
        let mut adam = Adam::new(1e-3);
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = s.params()[0].value.item();
            adam.step(&mut s, &[Tensor::from_vec(vec![-3.0])], |_| true).unwrap();
            last = s.params()[0].value.item() - before;
        }
        assert!((last - 1e-3).abs() < 1e-6, "{last}");
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = store(1.0);
        let err = Adam::new(1e-3)
            .step(&mut s, &[Tensor::from_vec(vec![f64::NAN])], |_| true)
            .unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
        assert_eq!(s.params()[0].value.item(), 1.0);
    }

    #[test]
    fn frozen_group_is_untouched() {
        let mut s = store(1.0);
        Adam::new(1e-3)
            .step(&mut s, &[Tensor::from_vec(vec![1.0])], |g| g != ParamGroup::Encoder)
            .unwrap();
        assert_eq!(s.params()[0].value.item(), 1.0);
    }
}
