//! Per-parameter saliency criteria.
//!
//! All scores live in the flat parameter index space. Larger means more
//! important; masks keep the top `(1 - p)` fraction. Scores are computed for
//! every coordinate, including biases, and masking decides what is prunable.

use std::fmt;
use std::str::FromStr;

use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_len, Error, Result};
use crate::exec::Exec;
use crate::fim::{self, FimConfig, FimDiagonal, FimEstimator, Partition};
use crate::model::{GradVector, Model};
use crate::objective::Objective;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Random,
    Magnitude,
    Gn,
    Snip,
    Grasp,
    Fd,
    Fp,
    Fts,
    Fbss,
}

impl Criterion {
    pub const ALL: [Criterion; 9] = [
        Criterion::Random,
        Criterion::Magnitude,
        Criterion::Gn,
        Criterion::Snip,
        Criterion::Grasp,
        Criterion::Fd,
        Criterion::Fp,
        Criterion::Fts,
        Criterion::Fbss,
    ];

    /// The Fisher-based criteria swept over FIM batch sizes.
    pub const FISHER: [Criterion; 4] = [Criterion::Fd, Criterion::Fp, Criterion::Fts, Criterion::Fbss];

    pub fn id(self) -> &'static str {
        match self {
            Criterion::Random => "random",
            Criterion::Magnitude => "magnitude",
            Criterion::Gn => "gn",
            Criterion::Snip => "snip",
            Criterion::Grasp => "grasp",
            Criterion::Fd => "fd",
            Criterion::Fp => "fp",
            Criterion::Fts => "fts",
            Criterion::Fbss => "fbss",
        }
    }

    /// Whether scoring needs gradients of the loss.
    pub fn needs_data(self) -> bool {
        !matches!(self, Criterion::Random | Criterion::Magnitude)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown criterion `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub values: Vec<f64>,
    pub criterion: Criterion,
    pub provenance: String,
}

impl ScoreVector {
    fn new(values: Vec<f64>, criterion: Criterion, provenance: impl Into<String>) -> Self {
        ScoreVector { values, criterion, provenance: provenance.into() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn score_random(d: usize, seed: u64) -> Result<ScoreVector> {
    if d == 0 {
        return Err(Error::InvalidArgument("random scores need d >= 1".into()));
    }
    let rng = ChaCha8Rng::seed_from_u64(seed);
    let values = rng.sample_iter(Open01).take(d).collect();
    Ok(ScoreVector::new(values, Criterion::Random, format!("seed={seed}")))
}

pub fn score_magnitude(w: &[f64]) -> ScoreVector {
    ScoreVector::new(w.iter().map(|v| v.abs()).collect(), Criterion::Magnitude, "")
}

pub fn score_gradient_norm(g: &GradVector) -> ScoreVector {
    let values = g.values.iter().map(|v| v.abs()).collect();
    ScoreVector::new(values, Criterion::Gn, format!("batches={}", g.batch_count))
}

/// Connection sensitivity: `|w_q g_q| / Σ_k |w_k g_k|`.
pub fn score_snip(w: &[f64], g: &GradVector) -> Result<ScoreVector> {
    check_len(w.len(), g.len())?;
    let raw: Vec<f64> = w.iter().zip(&g.values).map(|(w, g)| (w * g).abs()).collect();
    let total = raw.iter().fold(0.0, |acc, v| acc + v);
    if total == 0.0 {
        return Err(Error::DegenerateScores);
    }
    let values = raw.into_iter().map(|v| v / total).collect();
    Ok(ScoreVector::new(values, Criterion::Snip, format!("batches={}", g.batch_count)))
}

/// `s_q = F_qq`.
pub fn score_fd(f: &FimDiagonal) -> ScoreVector {
    ScoreVector::new(f.values.clone(), Criterion::Fd, fim_provenance(f))
}

/// `s_q = 1/2 w_q² F_qq`.
pub fn score_fp(w: &[f64], f: &FimDiagonal) -> Result<ScoreVector> {
    check_len(w.len(), f.len())?;
    let values = w.iter().zip(&f.values).map(|(&w, &f)| 0.5 * (w * w) * f).collect();
    Ok(ScoreVector::new(values, Criterion::Fp, fim_provenance(f)))
}

/// Fisher-Taylor sensitivity: `s_q = |w_q g̃_q + 1/2 w_q² d_F,q|`.
pub fn score_fts(w: &[f64], g: &GradVector, f: &FimDiagonal) -> Result<ScoreVector> {
    check_len(w.len(), g.len())?;
    check_len(w.len(), f.len())?;
    let values = w
        .iter()
        .zip(&g.values)
        .zip(&f.values)
        .map(|((&w, &g), &f)| (w * g + 0.5 * (w * w) * f).abs())
        .collect();
    Ok(ScoreVector::new(values, Criterion::Fts, fim_provenance(f)))
}

/// Brain-surgeon style score with a damped diagonal Fisher inverse:
/// `s_q = (h_q / 2) (w_q − g̃_q / h_q)²` with `h_q = F_qq + damping`.
pub fn score_fbss(w: &[f64], g: &GradVector, f: &FimDiagonal, damping: f64) -> Result<ScoreVector> {
    check_len(w.len(), g.len())?;
    check_len(w.len(), f.len())?;
    if !(damping >= 0.0 && damping.is_finite()) {
        return Err(Error::InvalidArgument(format!("damping must be finite and >= 0, got {damping}")));
    }
    let mut values = Vec::with_capacity(w.len());
    for (q, ((&w, &g), &f)) in w.iter().zip(&g.values).zip(&f.values).enumerate() {
        let h = f + damping;
        if h == 0.0 {
            return Err(Error::SingularFisher(q));
        }
        let r = w - g / h;
        values.push(0.5 * (r * r) * h);
    }
    Ok(ScoreVector::new(values, Criterion::Fbss, format!("{};damping={damping:e}", fim_provenance(f))))
}

/// Diagonal second-order model `δL = Σ δw_q g_q + 1/2 Σ δw_q² h_q`.
pub fn taylor_delta_loss(delta: &[f64], g: &[f64], h: &[f64]) -> Result<f64> {
    check_len(delta.len(), g.len())?;
    check_len(delta.len(), h.len())?;
    let first = delta.iter().zip(g).fold(0.0, |acc, (d, g)| acc + d * g);
    let second = delta.iter().zip(h).fold(0.0, |acc, (d, h)| acc + d * d * h);
    Ok(first + 0.5 * second)
}

fn fim_provenance(f: &FimDiagonal) -> String {
    format!("fim={};batch_size={};batches={}", f.estimator, f.batch_size, f.batch_count)
}

/// Mean of the batch gradients over `partition`.
pub fn mean_gradient<O: Objective + ?Sized>(
    objective: &O,
    params: &[f64],
    data: &Dataset,
    partition: &Partition,
    exec: Exec,
) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; params.len()];
    fim::for_each_batch_gradient(objective, params, data, partition, exec, |_, g| {
        for (s, v) in sum.iter_mut().zip(g) {
            *s += v;
        }
        Ok(())
    })?;
    let b = partition.batch_count() as f64;
    Ok(sum.into_iter().map(|s| s / b).collect())
}

/// Hessian-vector product by central differences of gradients:
/// `(∇L(w + εv) − ∇L(w − εv)) / 2ε`.
pub fn hvp_central<O: Objective + ?Sized>(
    objective: &O,
    params: &[f64],
    data: &Dataset,
    partition: &Partition,
    direction: &[f64],
    epsilon: f64,
    exec: Exec,
) -> Result<Vec<f64>> {
    check_len(params.len(), direction.len())?;
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {epsilon}")));
    }
    let shifted = |sign: f64| -> Vec<f64> { params.iter().zip(direction).map(|(w, v)| w + sign * epsilon * v).collect() };
    let plus = mean_gradient(objective, &shifted(1.0), data, partition, exec)?;
    let minus = mean_gradient(objective, &shifted(-1.0), data, partition, exec)?;
    Ok(plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * epsilon)).collect())
}

/// Gradient-signal-preservation score `−w ⊙ (H ∇L)`. Signed; larger is kept.
pub fn score_grasp<O: Objective + ?Sized>(
    objective: &O,
    params: &[f64],
    data: &Dataset,
    partition: &Partition,
    fd_epsilon: f64,
    exec: Exec,
) -> Result<ScoreVector> {
    if !(fd_epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {fd_epsilon}")));
    }
    let g = mean_gradient(objective, params, data, partition, exec)?;
    let norm = g.iter().fold(0.0, |acc, v| acc + v * v).sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroGradient);
    }
    let v: Vec<f64> = g.iter().map(|x| x / norm).collect();
    let hv = hvp_central(objective, params, data, partition, &v, fd_epsilon, exec)?;
    let values: Vec<f64> = params.iter().zip(&hv).map(|(w, h)| -w * (h * norm)).collect();
    if let Some(i) = values.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFiniteGradient(i));
    }
    Ok(ScoreVector::new(values, Criterion::Grasp, format!("fd_epsilon={fd_epsilon:e};batches={}", partition.batch_count())))
}

/// Settings for [`score_model`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringOptions {
    pub fim: FimConfig,
    pub fbss_damping: f64,
    pub grasp_epsilon: f64,
    pub random_seed: u64,
    pub exec: Exec,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        ScoringOptions {
            fim: FimConfig { estimator: FimEstimator::BatchWise, batch_size: 64, seed: 0 },
            fbss_damping: 1e-8,
            grasp_epsilon: 1e-3,
            random_seed: 0,
            exec: Exec::default(),
        }
    }
}

/// Scores `model` at its current parameters with any criterion. Gradient
/// based criteria share one pass over `data` through [`fim::estimate`].
pub fn score_model(model: &Model, data: &Dataset, criterion: Criterion, opts: &ScoringOptions) -> Result<ScoreVector> {
    let w = model.params();
    match criterion {
        Criterion::Random => score_random(w.len(), opts.random_seed),
        Criterion::Magnitude => Ok(score_magnitude(w)),
        Criterion::Grasp => {
            let partition = opts.fim.partition(data.len())?;
            score_grasp(model.network(), w, data, &partition, opts.grasp_epsilon, opts.exec)
        }
        _ => {
            let (g, f) = fim::estimate(model.network(), w, data, &opts.fim, opts.exec)?;
            match criterion {
                Criterion::Gn => Ok(score_gradient_norm(&g)),
                Criterion::Snip => score_snip(w, &g),
                Criterion::Fd => Ok(score_fd(&f)),
                Criterion::Fp => score_fp(w, &f),
                Criterion::Fts => score_fts(w, &g, &f),
                Criterion::Fbss => score_fbss(w, &g, &f, opts.fbss_damping),
                Criterion::Random | Criterion::Magnitude | Criterion::Grasp => unreachable!(),
            }
        }
    }
}
