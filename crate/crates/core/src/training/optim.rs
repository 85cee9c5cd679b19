//! SGD with momentum and Adam, operating on named parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Param, Real};

/// Classic SGD step with L2 weight decay folded into the gradient:
/// `g' = g + wd·θ`, `v ← μ·v + g'`, `θ ← θ − lr·v`.
pub fn sgd_update<T: Real>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    assert!(
        params.len() == grads.len() && grads.len() == velocity.len(),
        "slot shapes must match"
    );
    let (lr, mu, wd) = (T::lit(lr), T::lit(momentum), T::lit(weight_decay));
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g + wd * *p;
        *v = mu * *v + g;
        *p -= lr * *v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam step; `step` is the 1-based step count.
pub fn adam_update<T: Real>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    hp: &AdamParams,
) {
    assert!(
        params.len() == grads.len() && m.len() == grads.len() && v.len() == grads.len(),
        "slot shapes must match"
    );
    assert!(step >= 1, "adam steps are 1-based");
    let (b1, b2) = (T::lit(hp.beta1), T::lit(hp.beta2));
    let c1 = T::lit(1.0 - hp.beta1.powi(step as i32));
    let c2 = T::lit(1.0 - hp.beta2.powi(step as i32));
    let (lr, eps) = (T::lit(lr), T::lit(hp.eps));
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64, weight_decay: f64 },
    Adam(AdamParams),
}

#[derive(Clone, Debug)]
enum Slot<T> {
    Velocity(Vec<T>),
    Moments { m: Vec<T>, v: Vec<T> },
}

/// Per-parameter optimizer slots keyed by parameter name.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub step: u64,
    slots: BTreeMap<String, Slot<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Applies one update to every trainable parameter accepted by `update`.
    /// Fails before touching any parameter if a gradient is non-finite.
    pub fn apply<'a>(
        &mut self,
        params: impl IntoIterator<Item = (String, &'a mut Param<T>)>,
        lr: f64,
        update: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let params: Vec<_> = params
            .into_iter()
            .filter(|(name, p)| p.trainable && update(name))
            .collect();
        for (name, p) in &params {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { param: name.clone() });
            }
        }
        self.step += 1;
        for (name, p) in params {
            let n = p.len();
            match self.kind {
                OptimizerKind::SgdMomentum { momentum, weight_decay } => {
                    let slot = self
                        .slots
                        .entry(name)
                        .or_insert_with(|| Slot::Velocity(vec![T::zero(); n]));
                    let Slot::Velocity(vel) = slot else { unreachable!() };
                    sgd_update(&mut p.value, &p.grad, vel, lr, momentum, weight_decay);
                }
                OptimizerKind::Adam(hp) => {
                    let slot = self.slots.entry(name).or_insert_with(|| Slot::Moments {
                        m: vec![T::zero(); n],
                        v: vec![T::zero(); n],
                    });
                    let Slot::Moments { m, v } = slot else { unreachable!() };
                    adam_update(&mut p.value, &p.grad, m, v, self.step, lr, &hp);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_first_step() {
        let (mut th, mut v) = ([1.0f64], [0.0]);
        sgd_update(&mut th, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert!((th[0] - 0.9).abs() < 1e-15);
        assert_eq!(v[0], 1.0);
    }

    #[test]
    fn sgd_zero_gradient_is_fixed_point() {
        let (mut th, mut v) = ([0.3f64, -2.0], [0.0, 0.0]);
        sgd_update(&mut th, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(th, [0.3, -2.0]);
    }

    #[test]
    fn sgd_two_steps() {
        let (mut th, mut v) = ([1.0f64], [0.0]);
        sgd_update(&mut th, &[1.0], &mut v, 0.1, 0.9, 0.0);
        sgd_update(&mut th, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert!((th[0] - 0.71).abs() < 1e-15);
    }

    #[test]
    fn sgd_without_momentum_is_gradient_descent() {
        let mut th = [0.5f64, -1.5, 2.0];
        let g = [0.25, -0.75, 1.0];
        let mut v = [0.0; 3];
        sgd_update(&mut th, &g, &mut v, 0.01, 0.0, 0.0);
        for i in 0..3 {
            assert_eq!(th[i], [0.5f64, -1.5, 2.0][i] - 0.01 * g[i]);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut th = [1.0f64; 4];
        let (mut m, mut v) = ([0.0; 4], [0.0; 4]);
        adam_update(&mut th, &[1.0; 4], &mut m, &mut v, 1, 1e-3, &AdamParams::default());
        for t in th {
            assert!((1.0 - t - 1e-3).abs() < 1e-10);
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut th = [0.7f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        for s in 1..=5 {
            adam_update(&mut th, &[0.0], &mut m, &mut v, s, 1e-3, &AdamParams::default());
        }
        assert_eq!(th[0], 0.7);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = Param::<f32>::new(vec![2], vec![1.0, 2.0]);
        p.grad = vec![0.5, f32::NAN];
        let mut opt = OptimizerState::new(OptimizerKind::Adam(AdamParams::default()));
        let err = opt.apply(vec![("w".to_string(), &mut p)], 1e-3, |_| true).unwrap_err();
        assert!(matches!(err, Error::Divergence { ref param } if param == "w"));
        assert_eq!(p.value, vec![1.0, 2.0]);
    }
}
