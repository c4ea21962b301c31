//! Empirical Fisher diagonal estimators.
//!
//! Both estimators stream batch gradients through a fixed-order reduction:
//! gradients of a chunk of batches may be evaluated in parallel, but they are
//! summed strictly in partition order, so results are bit-identical across
//! execution modes.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::GradVector;
use crate::objective::{loss_and_gradient, Objective};

/// Batch gradients evaluated concurrently before each in-order reduction.
const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FimEstimator {
    /// Mean of squared single-sample gradients.
    PerSample,
    /// Mean of squared minibatch-mean gradients.
    BatchWise,
}

impl fmt::Display for FimEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FimEstimator::PerSample => "per-sample",
            FimEstimator::BatchWise => "batch-wise",
        })
    }
}

impl FromStr for FimEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-sample" => Ok(FimEstimator::PerSample),
            "batch-wise" => Ok(FimEstimator::BatchWise),
            other => Err(Error::Config(format!("unknown FIM estimator `{other}`"))),
        }
    }
}

/// Nonnegative estimate of the Fisher diagonal, indexed like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FimDiagonal {
    pub values: Vec<f64>,
    pub batch_size: usize,
    pub batch_count: usize,
    pub estimator: FimEstimator,
}

impl FimDiagonal {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Dataset indices grouped into equally weighted batches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    batches: Vec<Vec<usize>>,
}

impl Partition {
    /// Seeded shuffle of `0..n`, cut into contiguous batches of `batch_size`;
    /// a trailing short batch is dropped.
    pub fn shuffled(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(Error::InvalidArgument(format!("batch size {batch_size} for a dataset of {n} samples")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Partition { batches: order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect() })
    }

    /// `0..n` in order, cut like [`Partition::shuffled`].
    pub fn sequential(n: usize, batch_size: usize) -> Result<Self> {
        if batch_size == 0 || batch_size > n {
            return Err(Error::InvalidArgument(format!("batch size {batch_size} for a dataset of {n} samples")));
        }
        let order: Vec<usize> = (0..n).collect();
        Ok(Partition { batches: order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect() })
    }

    pub fn from_batches(batches: Vec<Vec<usize>>) -> Result<Self> {
        if batches.is_empty() {
            return Err(Error::EmptyPartition);
        }
        if batches.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("partition contains an empty batch".into()));
        }
        Ok(Partition { batches })
    }

    pub fn batches(&self) -> &[Vec<usize>] {
        &self.batches
    }

    pub fn batch_count(&self) -> usize {
        self.batches.len()
    }

    /// Size of the first batch (all batches are equal for the built-in constructors).
    pub fn batch_size(&self) -> usize {
        self.batches.first().map_or(0, Vec::len)
    }
}

/// Calls `visit(k, gradient_k)` for every batch in partition order.
pub fn for_each_batch_gradient<O, F>(
    objective: &O,
    params: &[f64],
    data: &Dataset,
    partition: &Partition,
    exec: Exec,
    mut visit: F,
) -> Result<()>
where
    O: Objective + ?Sized,
    F: FnMut(usize, &[f64]) -> Result<()>,
{
    let batches = partition.batches();
    if batches.is_empty() {
        return Err(Error::EmptyPartition);
    }
    for (c, chunk) in batches.chunks(CHUNK).enumerate() {
        let grads = exec.map(chunk, |idx| loss_and_gradient(objective, params, &data.batch(idx)).map(|(_, g)| g));
        for (j, g) in grads.into_iter().enumerate() {
            let g = g?;
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(i));
            }
            visit(c * CHUNK + j, &g)?;
        }
    }
    Ok(())
}

/// Accumulates the mean batch gradient `g̃` and the mean squared batch
/// gradient `d_F` over `partition`, evaluated at `params`.
pub fn accumulate_fts_inputs<O: Objective + ?Sized>(
    objective: &O,
    params: &[f64],
    data: &Dataset,
    partition: &Partition,
    exec: Exec,
) -> Result<(GradVector, FimDiagonal)> {
    let d = params.len();
    let mut g_sum = vec![0.0; d];
    let mut f_sum = vec![0.0; d];
    for_each_batch_gradient(objective, params, data, partition, exec, |_, g| {
        for ((gs, fs), &v) in g_sum.iter_mut().zip(f_sum.iter_mut()).zip(g) {
            *gs += v;
            *fs += v * v;
        }
        Ok(())
    })?;
    let b = partition.batch_count() as f64;
    for (gs, fs) in g_sum.iter_mut().zip(f_sum.iter_mut()) {
        *gs /= b;
        *fs /= b;
    }
    let estimator = if partition.batch_size() == 1 { FimEstimator::PerSample } else { FimEstimator::BatchWise };
    Ok((
        GradVector { values: g_sum, batch_count: partition.batch_count() },
        FimDiagonal {
            values: f_sum,
            batch_size: partition.batch_size(),
            batch_count: partition.batch_count(),
            estimator,
        },
    ))
}

/// `(1/N) Σ_n (∇ l_n)²` over every sample in dataset order.
pub fn fim_diag_per_sample<O: Objective + ?Sized>(
    objective: &O,
    params: &[f64],
    data: &Dataset,
    exec: Exec,
) -> Result<FimDiagonal> {
    let partition = Partition::sequential(data.len(), 1)?;
    let (_, fim) = accumulate_fts_inputs(objective, params, data, &partition, exec)?;
    Ok(fim)
}

/// Estimator selection as exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FimConfig {
    pub estimator: FimEstimator,
    pub batch_size: usize,
    pub seed: u64,
}

impl FimConfig {
    /// Partition of `n` samples this configuration estimates over. The
    /// per-sample estimator ignores `batch_size`; single-sample batches are
    /// taken in dataset order either way, since shuffling them changes only
    /// the summation order.
    pub fn partition(&self, n: usize) -> Result<Partition> {
        match self.estimator {
            FimEstimator::PerSample => Partition::sequential(n, 1),
            FimEstimator::BatchWise if self.batch_size == 1 => Partition::sequential(n, 1),
            FimEstimator::BatchWise => Partition::shuffled(n, self.batch_size, self.seed),
        }
    }
}

/// Mean gradient and Fisher diagonal according to `cfg`.
pub fn estimate<O: Objective + ?Sized>(
    objective: &O,
    params: &[f64],
    data: &Dataset,
    cfg: &FimConfig,
    exec: Exec,
) -> Result<(GradVector, FimDiagonal)> {
    accumulate_fts_inputs(objective, params, data, &cfg.partition(data.len())?, exec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::MeanLinear;
    use crate::tensor::Tensor;

    fn column(values: &[f64]) -> Dataset {
        let n = values.len();
        Dataset::new(Tensor::new(vec![n, 1, 1, 1], values.to_vec()).unwrap(), vec![0; n], 2).unwrap()
    }

    #[test]
    fn single_batch_is_identity() {
        let data = column(&[0.5, 1.5]);
        let p = Partition::from_batches(vec![vec![0, 1]]).unwrap();
        let (g, f) = accumulate_fts_inputs(&MeanLinear { inputs: 1 }, &[0.3], &data, &p, Exec::Sequential).unwrap();
        assert_eq!(g.values, vec![1.0]);
        assert_eq!(f.values, vec![1.0]);
        assert_eq!((f.batch_size, f.batch_count), (2, 1));
    }

    #[test]
    fn opposite_batches_cancel_in_mean_but_not_in_fisher() {
        let data = column(&[1.0, -1.0]);
        let p = Partition::from_batches(vec![vec![0], vec![1]]).unwrap();
        let (g, f) = accumulate_fts_inputs(&MeanLinear { inputs: 1 }, &[2.0], &data, &p, Exec::Sequential).unwrap();
        assert_eq!(g.values, vec![0.0]);
        assert_eq!(f.values, vec![1.0]);
    }

    #[test]
    fn zero_gradients() {
        let data = column(&[0.0, 0.0, 0.0]);
        let p = Partition::sequential(3, 1).unwrap();
        let (g, f) = accumulate_fts_inputs(&MeanLinear { inputs: 1 }, &[1.0], &data, &p, Exec::Sequential).unwrap();
        assert_eq!((g.values, f.values), (vec![0.0], vec![0.0]));
    }

    #[test]
    fn empty_partition_rejected() {
        assert!(matches!(Partition::from_batches(vec![]), Err(Error::EmptyPartition)));
        assert!(Partition::shuffled(5, 6, 0).is_err());
        assert!(Partition::shuffled(5, 0, 0).is_err());
    }

    #[test]
    fn shuffled_partition_drops_short_tail() {
        let p = Partition::shuffled(10, 3, 4).unwrap();
        assert_eq!(p.batch_count(), 3);
        let mut seen: Vec<usize> = p.batches().concat();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(p, Partition::shuffled(10, 3, 4).unwrap());
    }

    #[test]
    fn per_sample_single_and_duplicated() {
        let obj = MeanLinear { inputs: 1 };
        let one = fim_diag_per_sample(&obj, &[0.0], &column(&[3.0]), Exec::Sequential).unwrap();
        assert_eq!(one.values, vec![9.0]);
        let base = fim_diag_per_sample(&obj, &[0.0], &column(&[1.0, 2.0, 4.0]), Exec::Sequential).unwrap();
        let dup = fim_diag_per_sample(&obj, &[0.0], &column(&[1.0, 1.0, 2.0, 2.0, 4.0, 4.0]), Exec::Sequential).unwrap();
        assert_eq!(base.values, dup.values);
    }
}
