//! Differentiable objectives over a flat parameter vector.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::GradVector;
use crate::tensor::Tensor;

/// A minibatch: inputs with the sample index first, plus integer targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        if n != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "batch has {n} inputs but {} labels",
                labels.len()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Scalar loss `L(params; batch)` expressible on a [`Graph`].
pub trait Objective: Sync {
    fn num_params(&self) -> usize;

    /// Records the loss for `params` on `batch` and returns the scalar root.
    fn record(&self, graph: &mut Graph, params: &[f64], batch: &Batch) -> Result<NodeId>;
}

/// A recorded forward pass, ready for one backward pass.
#[derive(Debug)]
pub struct LossGraph {
    pub loss: f64,
    pub graph: Graph,
    pub root: NodeId,
}

impl LossGraph {
    pub fn backward(&mut self) -> Result<GradVector> {
        let values = self.graph.backward(self.root)?;
        Ok(GradVector { values, batch_count: 1 })
    }
}

pub fn forward_loss<O: Objective + ?Sized>(objective: &O, params: &[f64], batch: &Batch) -> Result<LossGraph> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if params.len() != objective.num_params() {
        return Err(Error::LengthMismatch { expected: objective.num_params(), actual: params.len() });
    }
    let mut graph = Graph::new(params.len());
    let root = objective.record(&mut graph, params, batch)?;
    let loss = graph.scalar(root);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(loss));
    }
    Ok(LossGraph { loss, graph, root })
}

pub fn loss_value<O: Objective + ?Sized>(objective: &O, params: &[f64], batch: &Batch) -> Result<f64> {
    Ok(forward_loss(objective, params, batch)?.loss)
}

/// Loss together with [`Graph::branch_signature`] of its forward pass.
pub fn loss_and_signature<O: Objective + ?Sized>(objective: &O, params: &[f64], batch: &Batch) -> Result<(f64, u64)> {
    let lg = forward_loss(objective, params, batch)?;
    Ok((lg.loss, lg.graph.branch_signature()))
}

pub fn loss_and_gradient<O: Objective + ?Sized>(
    objective: &O,
    params: &[f64],
    batch: &Batch,
) -> Result<(f64, Vec<f64>)> {
    let mut lg = forward_loss(objective, params, batch)?;
    let grad = lg.backward()?;
    Ok((lg.loss, grad.values))
}
