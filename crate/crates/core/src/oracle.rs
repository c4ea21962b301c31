//! Brute-force reference computations built from forward evaluations only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::criteria::taylor_delta_loss;
use crate::error::{check_len, Error, Result};
use crate::exec::Exec;
use crate::model::{GradVector, LayerSegment};
use crate::objective::{loss_and_gradient, loss_and_signature, loss_value, Batch, Objective};
use crate::tensor::Tensor;

pub const GRAD_EPSILON: f64 = 1e-5;
pub const HESSIAN_STEP: f64 = 1e-3;

fn positive_step(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("finite-difference step must be > 0, got {eps}")))
    }
}

fn shifted(params: &[f64], q: usize, by: f64) -> Vec<f64> {
    let mut w = params.to_vec();
    w[q] += by;
    w
}

/// `(L(w + ε e_q) − L(w − ε e_q)) / 2ε` for every coordinate.
pub fn finite_diff_grad<O: Objective + ?Sized>(objective: &O, params: &[f64], batch: &Batch, eps: f64, exec: Exec) -> Result<GradVector> {
    let all: Vec<usize> = (0..params.len()).collect();
    let values = finite_diff_grad_at(objective, params, batch, eps, &all, exec)?;
    Ok(GradVector { values, batch_count: 1 })
}

/// Central differences at the listed coordinates only.
pub fn finite_diff_grad_at<O: Objective + ?Sized>(
    objective: &O,
    params: &[f64],
    batch: &Batch,
    eps: f64,
    coords: &[usize],
    exec: Exec,
) -> Result<Vec<f64>> {
    positive_step(eps)?;
    if let Some(&q) = coords.iter().find(|&&q| q >= params.len()) {
        return Err(Error::InvalidArgument(format!("index {q} out of range for {} parameters", params.len())));
    }
    exec.try_map_range(coords.len(), |i| -> Result<f64> {
        let q = coords[i];
        let plus = loss_value(objective, &shifted(params, q, eps), batch)?;
        let minus = loss_value(objective, &shifted(params, q, -eps), batch)?;
        Ok((plus - minus) / (2.0 * eps))
    })
}

/// Up to `per_segment` seeded coordinates from every segment, ascending.
pub fn sample_coordinates(segments: &[LayerSegment], per_segment: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for seg in segments {
        let mut picked: Vec<usize> = if seg.length <= per_segment {
            seg.range().collect()
        } else {
            rand::seq::index::sample(&mut rng, seg.length, per_segment).into_iter().map(|i| seg.offset + i).collect()
        };
        picked.sort_unstable();
        coords.extend(picked);
    }
    coords
}

/// `(L(w + h e_q) − 2 L(w) + L(w − h e_q)) / h²` for every coordinate.
pub fn hessian_diag_fd<O: Objective + ?Sized>(objective: &O, params: &[f64], batch: &Batch, h: f64, exec: Exec) -> Result<Vec<f64>> {
    positive_step(h)?;
    let centre = loss_value(objective, params, batch)?;
    exec.try_map_range(params.len(), |q| -> Result<f64> {
        let plus = loss_value(objective, &shifted(params, q, h), batch)?;
        let minus = loss_value(objective, &shifted(params, q, -h), batch)?;
        Ok((plus - 2.0 * centre + minus) / (h * h))
    })
}

/// `L(w with w_q := 0) − L(w)`.
pub fn true_delta_loss_remove<O: Objective + ?Sized>(objective: &O, params: &[f64], batch: &Batch, q: usize) -> Result<f64> {
    if q >= params.len() {
        return Err(Error::InvalidArgument(format!("index {q} out of range for {} parameters", params.len())));
    }
    if params[q] == 0.0 {
        return Ok(0.0);
    }
    let mut removed = params.to_vec();
    removed[q] = 0.0;
    Ok(loss_value(objective, &removed, batch)? - loss_value(objective, params, batch)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaylorStep {
    pub scale: f64,
    pub error: f64,
    pub half_error: f64,
}

impl TaylorStep {
    /// `err(ε) / err(ε/2)`; third-order remainders give about 8.
    pub fn ratio(&self) -> f64 {
        self.error / self.half_error
    }
}

/// Error of the diagonal second-order model along `εδw` for each ε in
/// `scales` and for ε/2. The gradient and Hessian diagonal come from finite
/// differences (`GRAD_EPSILON`, `HESSIAN_STEP`).
pub fn taylor_order_check<O: Objective + ?Sized>(
    objective: &O,
    params: &[f64],
    batch: &Batch,
    delta: &[f64],
    scales: &[f64],
    exec: Exec,
) -> Result<Vec<TaylorStep>> {
    check_len(params.len(), delta.len())?;
    let g = finite_diff_grad(objective, params, batch, GRAD_EPSILON, exec)?.values;
    let h = hessian_diag_fd(objective, params, batch, HESSIAN_STEP, exec)?;
    let base = loss_value(objective, params, batch)?;
    let err = |eps: f64| -> Result<f64> {
        let step: Vec<f64> = delta.iter().map(|d| eps * d).collect();
        let moved: Vec<f64> = params.iter().zip(&step).map(|(w, s)| w + s).collect();
        let truth = loss_value(objective, &moved, batch)? - base;
        Ok((truth - taylor_delta_loss(&step, &g, &h)?).abs())
    };
    scales
        .iter()
        .map(|&scale| Ok(TaylorStep { scale, error: err(scale)?, half_error: err(scale / 2.0)? }))
        .collect()
}

/// Smallest step tried when the stencil crosses a kink, relative to the
/// requested one.
const MIN_STEP_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Coordinates compared; kinked ones are excluded.
    pub coords: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Coordinates whose stencil crossed a ReLU or max-pool kink at every
    /// step tried, so central differences are not a valid reference there.
    pub kinked: Vec<usize>,
    /// Round-off bound of each numeric value, aligned with `coords`.
    pub noise: Vec<f64>,
    /// Coordinates checked with a step smaller than requested.
    pub refined: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`.
    pub worst: usize,
}

impl GradCheck {
    /// Largest relative error over coordinates whose finite-difference
    /// round-off bound is below `tol` relative to the gradient, with the
    /// number of coordinates too small to resolve at that tolerance. Exact
    /// agreement always counts as resolved.
    pub fn max_rel_error_resolved(&self, tol: f64) -> (f64, usize) {
        let mut worst = 0.0_f64;
        let mut unresolved = 0;
        for ((&a, &n), &noise) in self.analytic.iter().zip(&self.numeric).zip(&self.noise) {
            // Exact agreement (typically both zero behind a dead unit) needs no resolution.
            if a == n || noise < tol * a.abs().max(n.abs()) {
                worst = worst.max(relative_error(a, n));
            } else {
                unresolved += 1;
            }
        }
        (worst, unresolved)
    }
}

/// Relative error `|a − n| / max(|a|, |n|)`, 0 when both vanish.
pub fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Central-difference scheme used by [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdScheme {
    /// `(L(w + εe) − L(w − εe)) / 2ε`; error O(ε²).
    Central,
    /// `(4 D(ε/2) − D(ε)) / 3` with `D` the central difference; error O(ε⁴).
    /// Admits a larger step, which lowers the round-off floor.
    Richardson,
}

/// Headroom over one rounding of the loss when bounding evaluation noise.
const ROUNDOFF_FACTOR: f64 = 4.0;

enum Stencil {
    Smooth { value: f64, noise: f64, refined: bool },
    Kinked,
}

/// Difference at `q` with the largest step in `eps, eps/10, …` whose
/// stencil points all take the same branches as the centre.
fn smooth_difference<O: Objective + ?Sized>(
    objective: &O,
    params: &[f64],
    batch: &Batch,
    eps: f64,
    scheme: FdScheme,
    q: usize,
    centre: u64,
) -> Result<Stencil> {
    // Each central difference comes with a bound on its round-off:
    // ROUNDOFF_FACTOR ulps of the loss at both ends, divided by 2·step.
    let central = |step: f64| -> Result<Option<(f64, f64)>> {
        let (up, down) = (shifted(params, q, step), shifted(params, q, -step));
        let width = up[q] - down[q];
        let (plus, sp) = loss_and_signature(objective, &up, batch)?;
        let (minus, sm) = loss_and_signature(objective, &down, batch)?;
        let noise = 2.0 * ROUNDOFF_FACTOR * f64::EPSILON * plus.abs().max(minus.abs()) / width;
        Ok((sp == centre && sm == centre).then(|| ((plus - minus) / width, noise)))
    };
    let mut step = eps;
    while step >= eps * MIN_STEP_FRACTION {
        let value = match scheme {
            FdScheme::Central => central(step)?,
            FdScheme::Richardson => match (central(step)?, central(step / 2.0)?) {
                (Some((full, nf)), Some((half, nh))) => Some(((4.0 * half - full) / 3.0, (4.0 * nh + nf) / 3.0)),
                _ => None,
            },
        };
        if let Some((value, noise)) = value {
            return Ok(Stencil::Smooth { value, noise, refined: step < eps });
        }
        step /= 10.0;
    }
    Ok(Stencil::Kinked)
}

/// Reverse-mode gradient against central differences on one batch, at
/// `coords` (every coordinate when `None`).
pub fn gradient_check<O: Objective + ?Sized>(
    objective: &O,
    params: &[f64],
    batch: &Batch,
    eps: f64,
    scheme: FdScheme,
    coords: Option<&[usize]>,
    exec: Exec,
) -> Result<GradCheck> {
    positive_step(eps)?;
    let lg = crate::objective::forward_loss(objective, params, batch)?;
    let centre = lg.graph.branch_signature();
    let (_, full) = loss_and_gradient(objective, params, batch)?;
    let wanted: Vec<usize> = coords.map_or_else(|| (0..params.len()).collect(), <[usize]>::to_vec);
    if let Some(&q) = wanted.iter().find(|&&q| q >= params.len()) {
        return Err(Error::InvalidArgument(format!("index {q} out of range for {} parameters", params.len())));
    }
    let stencils = exec.try_map_range(wanted.len(), |i| smooth_difference(objective, params, batch, eps, scheme, wanted[i], centre))?;
    let mut check = GradCheck {
        coords: Vec::new(),
        analytic: Vec::new(),
        numeric: Vec::new(),
        noise: Vec::new(),
        kinked: Vec::new(),
        refined: 0,
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        worst: 0,
    };
    for (&q, stencil) in wanted.iter().zip(stencils) {
        match stencil {
            Stencil::Kinked => check.kinked.push(q),
            Stencil::Smooth { value, noise, refined } => {
                let a = full[q];
                check.refined += usize::from(refined);
                check.max_abs_error = check.max_abs_error.max((a - value).abs());
                let rel = relative_error(a, value);
                if rel > check.max_rel_error {
                    check.max_rel_error = rel;
                    check.worst = q;
                }
                check.coords.push(q);
                check.analytic.push(a);
                check.numeric.push(value);
                check.noise.push(noise);
            }
        }
    }
    Ok(check)
}

/// `n` samples with standard-normal pixels and uniform labels.
pub fn synthetic_batch(n: usize, shape: [usize; 3], classes: usize, seed: u64) -> Result<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * shape.iter().product::<usize>();
    let pixels: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
    let labels = Uniform::new(0, classes).sample_iter(&mut rng).take(n).collect();
    Batch::new(Tensor::new(vec![n, shape[0], shape[1], shape[2]], pixels)?, labels)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - mean) * (y - mean);
        va += (x - mean) * (x - mean);
        vb += (y - mean) * (y - mean);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::DegenerateScores);
    }
    Ok(cov / (va * vb).sqrt())
}
