//! Small analytic objectives used by the oracle checks and tests.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::objective::{Batch, Objective};
use crate::tensor::Tensor;

/// `L(w) = 1/2 Σ a_q w_q²`: diagonal Hessian `diag(a)`. Ignores the batch.
#[derive(Debug, Clone)]
pub struct DiagonalQuadratic {
    pub curvature: Vec<f64>,
}

impl Objective for DiagonalQuadratic {
    fn num_params(&self) -> usize {
        self.curvature.len()
    }

    fn record(&self, graph: &mut Graph, params: &[f64], _batch: &Batch) -> Result<NodeId> {
        let w = graph.param(params, 0, vec![params.len()])?;
        let a = graph.constant(Tensor::from_vec(self.curvature.clone()))?;
        let sq = graph.square(w)?;
        let weighted = graph.mul(sq, a)?;
        let total = graph.sum(weighted)?;
        graph.scale(total, 0.5)
    }
}

/// `L(w) = Σ exp(a_q w_q) + 1/2 Σ b_q w_q²`: smooth, non-quadratic and
/// separable, so its Hessian is diagonal. Ignores the batch.
#[derive(Debug, Clone)]
pub struct SeparableExp {
    pub rate: Vec<f64>,
    pub curvature: Vec<f64>,
}

impl Objective for SeparableExp {
    fn num_params(&self) -> usize {
        self.rate.len()
    }

    fn record(&self, graph: &mut Graph, params: &[f64], _batch: &Batch) -> Result<NodeId> {
        let n = params.len();
        let w = graph.param(params, 0, vec![n])?;
        let a = graph.constant(Tensor::from_vec(self.rate.clone()))?;
        let b = graph.constant(Tensor::from_vec(self.curvature.clone()))?;
        let aw = graph.mul(w, a)?;
        let e = graph.exp(aw)?;
        let sq = graph.square(w)?;
        let q = graph.mul(sq, b)?;
        let q = graph.scale(q, 0.5)?;
        let total = graph.add(e, q)?;
        graph.sum(total)
    }
}

/// Linear unit `f(x) = w·x` with squared loss `1/2 mean (f(x_n) − y_n)²`,
/// where the target `y_n` is the label read as a number.
#[derive(Debug, Clone)]
pub struct LinearUnit {
    pub inputs: usize,
}

impl Objective for LinearUnit {
    fn num_params(&self) -> usize {
        self.inputs
    }

    fn record(&self, graph: &mut Graph, params: &[f64], batch: &Batch) -> Result<NodeId> {
        let n = batch.len();
        let x = graph.constant(batch.inputs.clone().reshape(vec![n, self.inputs])?)?;
        let w = graph.param(params, 0, vec![self.inputs, 1])?;
        let pred = graph.matmul(x, w)?;
        let targets: Vec<f64> = batch.labels.iter().map(|&y| -(y as f64)).collect();
        let neg_y = graph.constant(Tensor::new(vec![n, 1], targets)?)?;
        let err = graph.add(pred, neg_y)?;
        let sq = graph.square(err)?;
        let m = graph.mean(sq)?;
        graph.scale(m, 0.5)
    }
}

/// `L(w) = mean_n (x_n · w)`: the batch gradient is the mean input row.
#[derive(Debug, Clone)]
pub struct MeanLinear {
    pub inputs: usize,
}

impl Objective for MeanLinear {
    fn num_params(&self) -> usize {
        self.inputs
    }

    fn record(&self, graph: &mut Graph, params: &[f64], batch: &Batch) -> Result<NodeId> {
        let n = batch.len();
        if batch.inputs.len() != n * self.inputs {
            return Err(Error::ShapeMismatch(format!("expected {} features per sample", self.inputs)));
        }
        let x = graph.constant(batch.inputs.clone().reshape(vec![n, self.inputs])?)?;
        let w = graph.param(params, 0, vec![self.inputs, 1])?;
        let y = graph.matmul(x, w)?;
        graph.mean(y)
    }
}

/// A one-sample batch with no meaningful content, for batch-free fixtures.
pub fn unit_batch() -> Batch {
    Batch { inputs: Tensor::zeros(vec![1, 1]), labels: vec![0] }
}
