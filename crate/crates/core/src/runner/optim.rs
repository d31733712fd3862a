use serde::{Deserialize, Serialize};

use crate::encoder::Params;
use crate::error::{invalid, Error, Result};
use crate::numgrad::Matrix;

/// Adam hyperparameters with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One AdamW update of a single array. `t` is the 1-based step count.
pub fn adam_update(
    p: &mut Matrix,
    g: &Matrix,
    m: &mut Matrix,
    v: &mut Matrix,
    t: u64,
    hyper: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            left: p.shape(),
            right: g.shape(),
        });
    }
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    let (p, g, m, v) = (
        p.as_mut_slice(),
        g.as_slice(),
        m.as_mut_slice(),
        v.as_mut_slice(),
    );
    for i in 0..p.len() {
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g[i];
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * (m_hat / (v_hat.sqrt() + hyper.eps) + hyper.weight_decay * p[i]);
    }
    Ok(())
}

/// Applies one AdamW step to every parameter. `grad_of` returns the gradient
/// of a named parameter; `lr` overrides the configured step size (schedules).
pub fn adam_step<F>(
    params: &mut Params,
    mut grad_of: F,
    state: &mut AdamState,
    hyper: &AdamConfig,
    lr: f64,
) -> Result<()>
where
    F: FnMut(&str) -> Result<Matrix>,
{
    state.step += 1;
    let t = state.step;
    for (name, p) in params.iter_mut() {
        let g = grad_of(name)?;
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| invalid(format!("no moment for {name}")))?;
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| invalid(format!("no moment for {name}")))?;
        adam_update(p, &g, m, v, t, hyper, lr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: f64) -> Params {
        let mut p = Params::default();
        p.insert("x", Matrix::scalar(x));
        p
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let hyper = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = single(0.7);
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(
                &mut p,
                |_| Ok(Matrix::scalar(0.0)),
                &mut st,
                &hyper,
                hyper.lr,
            )
            .unwrap();
        }
        assert_eq!(p.get("x").unwrap().item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let hyper = AdamConfig {
            weight_decay: 0.0,
            eps: 1e-12,
            ..AdamConfig::default()
        };
        for g in [3.0, -0.02] {
            let mut p = single(1.0);
            let mut st = AdamState::new(&p);
            adam_step(&mut p, |_| Ok(Matrix::scalar(g)), &mut st, &hyper, 0.01).unwrap();
            let moved = p.get("x").unwrap().item() - 1.0;
            assert!((moved + 0.01 * f64::signum(g)).abs() < 1e-9, "{moved}");
        }
    }

    #[test]
    fn decay_is_decoupled() {
        let hyper = AdamConfig {
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let mut p = single(2.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, |_| Ok(Matrix::scalar(0.0)), &mut st, &hyper, 0.1).unwrap();
        assert!((p.get("x").unwrap().item() - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn quadratic_converges() {
        let hyper = AdamConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = single(1.0);
        let mut st = AdamState::new(&p);
        for _ in 0..500 {
            let x = p.get("x").unwrap().item();
            adam_step(
                &mut p,
                |_| Ok(Matrix::scalar(2.0 * x)),
                &mut st,
                &hyper,
                hyper.lr,
            )
            .unwrap();
        }
        assert!(
            p.get("x").unwrap().item().abs() < 1e-3,
            "{}",
            p.get("x").unwrap().item()
        );
    }
}
