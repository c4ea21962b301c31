//! Oracle suites behind the `verify` subcommand.
//!
//! Every check compares the implementation against forward-only brute force
//! on small fixtures and reports a measured value next to its tolerance.

use std::time::Instant;

use crate::criteria::{score_model, Criterion, ScoringOptions};
use crate::data::Dataset;
use crate::error::Result;
use crate::exec::Exec;
use crate::fim::{estimate, FimConfig, FimEstimator};
use crate::fixtures::{unit_batch, DiagonalQuadratic, SeparableExp};
use crate::model::{build_model, ArchitectureSpec};
use crate::oracle::{
    gradient_check, sample_coordinates, spearman, synthetic_batch, taylor_order_check, true_delta_loss_remove, FdScheme, GradCheck,
    TaylorStep,
};

/// Registered architectures checked against finite differences, with the
/// input shape each is built for.
pub const GRADIENT_FIXTURES: [(&str, [usize; 3]); 3] =
    [("mlp-small", [1, 28, 28]), ("mlp-deep-narrow", [1, 28, 28]), ("convnet-small", [3, 32, 32])];
pub const GRADIENT_TOLERANCE: f64 = 1e-6;
/// Richardson-extrapolated central differences at this step keep both
/// truncation and round-off below the tolerance on every fixture.
pub const GRADIENT_STEP: f64 = 1e-3;
pub const GRADIENT_COORDS_PER_SEGMENT: usize = 128;
pub const GRADIENT_BATCH: usize = 8;
/// Fewest coordinates per fixture whose finite-difference reference must
/// resolve the tolerance for the comparison to count.
pub const MIN_RESOLVED_FRACTION: f64 = 0.9;

/// Verdict of one gradient fixture: resolved worst error, unresolved count
/// and pass flag.
pub fn judge_gradient(check: &GradCheck) -> (f64, usize, bool) {
    let (worst, unresolved) = check.max_rel_error_resolved(GRADIENT_TOLERANCE);
    let compared = check.coords.len();
    let resolved = compared - unresolved;
    let passed = check.kinked.is_empty()
        && compared > 0
        && resolved as f64 >= MIN_RESOLVED_FRACTION * compared as f64
        && worst < GRADIENT_TOLERANCE;
    (worst, unresolved, passed)
}

pub const TAYLOR_SCALES: [f64; 2] = [1e-2, 5e-3];
pub const TAYLOR_RATIO: (f64, f64) = (6.0, 10.0);
pub const QUADRATIC_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let value = f()?;
    Ok((value, start.elapsed().as_secs_f64()))
}

/// Reverse-mode gradient of each fixture at seed 0 against finite
/// differences on a seeded sample of coordinates per segment.
pub fn gradient_suite(exec: Exec) -> Result<Vec<(&'static str, GradCheck)>> {
    GRADIENT_FIXTURES
        .iter()
        .map(|&(arch, shape)| {
            let model = build_model(&ArchitectureSpec::resolve(arch, shape, 10)?, 0)?;
            let batch = synthetic_batch(GRADIENT_BATCH, shape, 10, 0)?;
            let coords = sample_coordinates(model.segments(), GRADIENT_COORDS_PER_SEGMENT, 0);
            let check =
                gradient_check(model.network(), model.params(), &batch, GRADIENT_STEP, FdScheme::Richardson, Some(&coords), exec)?;
            Ok((arch, check))
        })
        .collect()
}

pub fn smooth_fixture() -> (SeparableExp, Vec<f64>, Vec<f64>) {
    let f = SeparableExp { rate: vec![1.0, -0.8, 1.3, 0.6], curvature: vec![0.5, 0.0, 0.2, 1.0] };
    (f, vec![0.1, 0.4, -0.3, 0.8], vec![1.0, 0.7, -1.2, 0.4])
}

pub fn quadratic_fixture() -> (DiagonalQuadratic, Vec<f64>, Vec<f64>) {
    let q = DiagonalQuadratic { curvature: vec![1.0, 3.0, 0.5, 2.5] };
    (q, vec![0.2, -1.0, 2.0, 0.7], vec![1.0, -2.0, 0.5, 0.3])
}

/// Taylor-model errors on the smooth fixture and on the diagonal quadratic.
pub fn taylor_suite(exec: Exec) -> Result<(Vec<TaylorStep>, Vec<TaylorStep>)> {
    let batch = unit_batch();
    let (f, w, dw) = smooth_fixture();
    let smooth = taylor_order_check(&f, &w, &batch, &dw, &TAYLOR_SCALES, exec)?;
    let (q, w, dw) = quadratic_fixture();
    let quadratic = taylor_order_check(&q, &w, &batch, &dw, &TAYLOR_SCALES, exec)?;
    Ok((smooth, quadratic))
}

/// Spearman correlation between `|true δL|` of removing each weight and its
/// FTS score on a 501-parameter MLP, with the number of weights compared.
/// Diagnostic, no threshold.
pub fn removal_rank_diagnostic(exec: Exec) -> Result<(f64, usize)> {
    let shape = [1, 5, 5];
    let arch = ArchitectureSpec::resolve("flatten,linear:16,relu,linear:5", shape, 5)?;
    let model = build_model(&arch, 0)?;
    let batch = synthetic_batch(64, shape, 5, 1)?;
    let data = Dataset::new(batch.inputs.clone(), batch.labels.clone(), 5)?;
    let opts = ScoringOptions { fim: FimConfig { estimator: FimEstimator::PerSample, batch_size: 1, seed: 0 }, exec, ..Default::default() };
    let scores = score_model(&model, &data, Criterion::Fts, &opts)?;
    let weights: Vec<usize> = model.segments().iter().filter(|s| s.prunable()).flat_map(|s| s.range()).collect();
    let removal = exec.try_map_range(weights.len(), |i| true_delta_loss_remove(model.network(), model.params(), &batch, weights[i]))?;
    let removal: Vec<f64> = removal.into_iter().map(f64::abs).collect();
    let fts: Vec<f64> = weights.iter().map(|&q| scores.values[q]).collect();
    Ok((spearman(&removal, &fts)?, weights.len()))
}

/// Smallest FIM diagonal entry over every estimator on a seeded batch.
fn fim_min_entry(exec: Exec) -> Result<f64> {
    let shape = [1, 5, 5];
    let arch = ArchitectureSpec::resolve("flatten,linear:16,relu,linear:5", shape, 5)?;
    let model = build_model(&arch, 3)?;
    let batch = synthetic_batch(32, shape, 5, 2)?;
    let data = Dataset::new(batch.inputs.clone(), batch.labels.clone(), 5)?;
    let mut min = f64::INFINITY;
    for (estimator, batch_size) in [(FimEstimator::PerSample, 1), (FimEstimator::BatchWise, 1), (FimEstimator::BatchWise, 8)] {
        let (_, f) = estimate(model.network(), model.params(), &data, &FimConfig { estimator, batch_size, seed: 0 }, exec)?;
        min = f.values.iter().copied().fold(min, f64::min);
    }
    Ok(min)
}

/// All oracle checks, in a fixed order.
pub fn run_all(exec: Exec) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let (grads, seconds) = timed(|| gradient_suite(exec))?;
    for (arch, check) in grads {
        let (worst, unresolved, passed) = judge_gradient(&check);
        out.push(CheckOutcome {
            name: format!("gradient {arch}"),
            passed,
            detail: format!(
                "max rel {worst:.2e} < {GRADIENT_TOLERANCE:.0e} over {} coords ({unresolved} below fd resolution, {} kinked, {} refined)",
                check.coords.len() - unresolved,
                check.kinked.len(),
                check.refined
            ),
            seconds: seconds / 3.0,
        });
    }

    let ((smooth, quadratic), seconds) = timed(|| taylor_suite(exec))?;
    let (lo, hi) = TAYLOR_RATIO;
    let ratios: Vec<f64> = smooth.iter().map(TaylorStep::ratio).collect();
    out.push(CheckOutcome {
        name: "taylor order (smooth)".into(),
        passed: ratios.iter().all(|r| (lo..=hi).contains(r)),
        detail: format!("ratios {ratios:.3?} in [{lo}, {hi}]"),
        seconds,
    });
    let worst = quadratic.iter().map(|s| s.error.max(s.half_error)).fold(0.0, f64::max);
    out.push(CheckOutcome {
        name: "taylor exact (quadratic)".into(),
        passed: worst < QUADRATIC_TOLERANCE,
        detail: format!("max error {worst:.2e} < {QUADRATIC_TOLERANCE:.0e}"),
        seconds: 0.0,
    });

    let (removal, seconds) = timed(|| {
        let q = DiagonalQuadratic { curvature: vec![1.0] };
        Ok((true_delta_loss_remove(&q, &[2.0], &unit_batch(), 0)?, true_delta_loss_remove(&q, &[0.0], &unit_batch(), 0)?))
    })?;
    out.push(CheckOutcome {
        name: "removal oracle".into(),
        passed: removal == (-2.0, 0.0),
        detail: format!("δL(w=2) = {}, δL(w=0) = {}", removal.0, removal.1),
        seconds,
    });

    let (min, seconds) = timed(|| fim_min_entry(exec))?;
    out.push(CheckOutcome {
        name: "fim nonnegative".into(),
        passed: min >= 0.0,
        detail: format!("min entry {min:.3e}"),
        seconds,
    });

    let ((rho, n), seconds) = timed(|| removal_rank_diagnostic(exec))?;
    out.push(CheckOutcome {
        name: "fts vs removal (diagnostic)".into(),
        passed: rho.is_finite(),
        detail: format!("spearman {rho:.3} over {n} weights"),
        seconds,
    });
    Ok(out)
}
