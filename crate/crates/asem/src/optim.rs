//! SGD and RMSprop parameter updates.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    #[serde(rename = "rmsprop")]
    RmsProp,
}

impl OptimKind {
    pub fn build(self, lr: f64) -> Optimizer {
        match self {
            OptimKind::Sgd => Optimizer::sgd(lr),
            OptimKind::RmsProp => Optimizer::rmsprop(lr),
        }
    }
}

/// Optimizer with per-parameter state, keyed by parameter name.
/// Updates are applied in sorted name order.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimKind,
    pub lr: f64,
    /// RMSprop decay.
    pub rho: f64,
    pub eps: f64,
    second_moment: BTreeMap<String, Tensor>,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Optimizer {
        Optimizer {
            kind: OptimKind::Sgd,
            lr,
            rho: 0.0,
            eps: 0.0,
            second_moment: BTreeMap::new(),
        }
    }

    pub fn rmsprop(lr: f64) -> Optimizer {
        Optimizer {
            kind: OptimKind::RmsProp,
            lr,
            rho: 0.9,
            eps: 1e-8,
            second_moment: BTreeMap::new(),
        }
    }

    /// Apply one update. Every parameter must have a gradient of the same
    /// shape; gradient entries without a matching parameter are ignored so a
    /// caller can pass the full gradient map while updating a subset.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: format!("optimizer_step({name})"),
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            match self.kind {
                OptimKind::Sgd => {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= self.lr * gv;
                    }
                }
                OptimKind::RmsProp => {
                    let v = self
                        .second_moment
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.shape()));
                    for ((pv, gv), vv) in
                        p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut())
                    {
                        *vv = self.rho * *vv + (1.0 - self.rho) * gv * gv;
                        *pv -= self.lr * gv / (vv.sqrt() + self.eps);
                    }
                }
            }
            if p.check_finite("optimizer_step").is_err() {
                return Err(Error::NonFiniteUpdate(name.clone()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("p".to_string(), Tensor::scalar(v));
        m
    }

    #[test]
    fn sgd_step_matches_closed_form() {
        // lr 0.001, p 1.0, g 2.0 -> 0.998
        let mut opt = Optimizer::sgd(0.001);
        let mut params = one_param(1.0);
        let grads = one_param(2.0);
        opt.step(&mut params, &grads).unwrap();
        assert!((params["p"].item() - 0.998).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_is_a_no_op() {
        let mut opt = Optimizer::sgd(0.5);
        let mut params = one_param(1.25);
        let grads = one_param(0.0);
        let before = opt.clone();
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params["p"].item(), 1.25);
        assert_eq!(opt.second_moment.len(), before.second_moment.len());
    }

    #[test]
    fn rmsprop_first_step_matches_closed_form() {
        // lr 0.003, rho 0.9, eps 1e-8, fresh state, p 0, g 1:
        // v = 0.1, p' = -0.003 / (sqrt(0.1) + 1e-8)
        let mut opt = Optimizer::rmsprop(0.003);
        let mut params = one_param(0.0);
        let grads = one_param(1.0);
        opt.step(&mut params, &grads).unwrap();
        let expected = -0.003 / (0.1_f64.sqrt() + 1e-8);
        assert!((params["p"].item() - expected).abs() < 1e-15);
        assert!((expected + 0.0094868).abs() < 1e-6);
        assert!((opt.second_moment["p"].item() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut opt = Optimizer::sgd(0.1);
        let mut params = one_param(1.0);
        let grads = BTreeMap::new();
        assert!(matches!(
            opt.step(&mut params, &grads),
            Err(Error::MissingGradient(_))
        ));
    }

    #[test]
    fn updates_are_deterministic_across_runs() {
        let run = || {
            let mut opt = Optimizer::rmsprop(0.01);
            let mut params = BTreeMap::new();
            params.insert("a".to_string(), Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap());
            params.insert("b".to_string(), Tensor::scalar(2.0));
            let mut grads = BTreeMap::new();
            grads.insert("a".to_string(), Tensor::from_vec(&[2], vec![0.1, 0.2]).unwrap());
            grads.insert("b".to_string(), Tensor::scalar(-0.3));
            for _ in 0..5 {
                opt.step(&mut params, &grads).unwrap();
            }
            params
        };
        let (p1, p2) = (run(), run());
        for (a, b) in p1.values().zip(p2.values()) {
            let bits_a: Vec<u64> = a.data().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }
}
