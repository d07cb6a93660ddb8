use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ParamSet, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, weight_decay: 0.05, beta1: 0.9, beta2: 0.95, eps: 1e-8 }
    }
}

/// AdamW with decoupled, multiplicative weight decay:
/// `p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamSet<T>) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect::<Vec<_>>();
        AdamW { config, m: zeros(), v: zeros(), step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Restores moment buffers and the step counter (checkpoint resume).
    pub fn restore(&mut self, m: Vec<Vec<T>>, v: Vec<Vec<T>>, step: u64) -> Result<()> {
        let fits = |bufs: &[Vec<T>]| {
            bufs.len() == self.m.len() && bufs.iter().zip(&self.m).all(|(a, b)| a.len() == b.len())
        };
        if !fits(&m) || !fits(&v) {
            return Err(Error::Format("optimizer moments do not match parameter shapes".into()));
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }

    /// One update. `grads` is parallel to `params`. Any non-finite gradient
    /// aborts before anything is modified.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients / {} moment buffers for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if g.len() != p.value.numel() {
                return Err(Error::shape("adamw", format!("gradient for `{}` has {} elements", p.name, g.len())));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGrad { param: p.name.clone() });
            }
        }
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let lr = T::lit(c.lr);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - T::lit(c.beta1.powi(t));
        let bc2 = T::one() - T::lit(c.beta2.powi(t));
        let eps = T::lit(c.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.decay { T::one() - lr * T::lit(c.weight_decay) } else { T::one() };
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::new(vec![1], vec![value]).unwrap(), true);
        ps
    }

    #[test]
    fn decay_only_path() {
        let mut ps = ParamSet::<f32>::new();
        ps.push("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.05, ..Default::default() };
        let mut opt = AdamW::new(cfg, &ps);
        opt.step(&mut ps, &[vec![0.0; 3]]).unwrap();
        let factor = 1.0f32 - 0.1f32 * 0.05f32;
        assert_eq!(ps.get(0).value.data(), &[1.0 * factor, -2.0 * factor, 0.5 * factor]);
        let (m, v) = opt.moments();
        assert!(m[0].iter().chain(&v[0]).all(|&x| x == 0.0));
        assert_eq!(opt.steps_taken(), 1);
    }

    /// Independent scalar recurrence written out by hand.
    fn oracle(mut p: f64, g: f64, steps: i32, lr: f64, wd: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=steps {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p = p * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + eps);
        }
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamWConfig { lr: 0.01, weight_decay: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        for g in [3.0, -0.2, 1e-3] {
            let mut ps = single(1.0);
            let mut opt = AdamW::new(cfg, &ps);
            opt.step(&mut ps, &[vec![g]]).unwrap();
            let moved = 1.0 - ps.get(0).value.data()[0];
            assert!((moved - 0.01 * f64::signum(g)).abs() < 1e-7, "g={g} moved {moved}");
            assert_eq!(ps.get(0).value.data()[0], oracle(1.0, g, 1, 0.01, 0.0, 0.9, 0.999, 1e-8));
        }
    }

    #[test]
    fn two_steps_match_oracle() {
        let cfg = AdamWConfig { lr: 0.05, weight_decay: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut ps = single(0.7);
        let mut opt = AdamW::new(cfg, &ps);
        opt.step(&mut ps, &[vec![0.3]]).unwrap();
        opt.step(&mut ps, &[vec![0.3]]).unwrap();
        assert_eq!(ps.get(0).value.data()[0], oracle(0.7, 0.3, 2, 0.05, 0.05, 0.9, 0.999, 1e-8));
    }

    #[test]
    fn nan_gradient_names_parameter_and_leaves_state() {
        let mut ps = single(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &ps);
        let err = opt.step(&mut ps, &[vec![f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGrad { ref param } if param == "w"));
        assert_eq!(ps.get(0).value.data()[0], 1.0);
        assert_eq!(opt.steps_taken(), 0);
    }
}
