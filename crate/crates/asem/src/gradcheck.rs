//! Finite-difference gradient checking.
//!
//! The checker re-runs the forward builder on perturbed inputs and compares
//! central differences against the gradients reported by [`Graph::backward`].
//! It never inspects the tape's backward machinery, so it stays an
//! independent oracle for every loss and network block in this crate.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
}

/// Relative error with a unit floor so near-zero gradients compare absolutely.
fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

impl GradCheck {
    /// Check the analytic gradients of a scalar function of `inputs`.
    ///
    /// `build` receives a fresh graph and one differentiable node per input
    /// tensor and must return the scalar output node.
    pub fn run<F>(&self, inputs: &[Tensor], build: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    {
        let eval = |tensors: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = tensors
                .iter()
                .map(|t| g.param(t.clone()))
                .collect::<Result<_>>()?;
            let out = build(&mut g, &ids)?;
            Ok(g.value(out).item())
        };

        // analytic pass
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<_>>()?;
        let out = build(&mut g, &ids)?;
        g.backward(out)?;
        let analytic: Vec<Tensor> = ids.iter().map(|&id| g.grad(id)).collect();

        let mut work: Vec<Tensor> = inputs.to_vec();
        let mut max_err = 0.0_f64;
        let mut checked = 0;
        for (ti, tensor) in inputs.iter().enumerate() {
            for ei in 0..tensor.len() {
                let orig = tensor.data()[ei];
                work[ti].data_mut()[ei] = orig + self.step;
                let up = eval(&work)?;
                work[ti].data_mut()[ei] = orig - self.step;
                let down = eval(&work)?;
                work[ti].data_mut()[ei] = orig;
                let numeric = (up - down) / (2.0 * self.step);
                let err = relative_error(analytic[ti].data()[ei], numeric);
                max_err = max_err.max(err);
                checked += 1;
            }
        }
        Ok(GradCheckReport {
            max_relative_error: max_err,
            checked,
        })
    }

    /// `run` + assertion, for use in tests.
    pub fn assert<F>(&self, inputs: &[Tensor], build: F)
    where
        F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    {
        let report = self.run(inputs, build).expect("gradcheck forward failed");
        assert!(
            report.max_relative_error <= self.tolerance,
            "gradient check failed: max relative error {} > {} over {} entries",
            report.max_relative_error,
            self.tolerance,
            report.checked
        );
    }
}
