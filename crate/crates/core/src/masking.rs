//! Top-(1 − p) mask construction, application and layer-collapse detection.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::{LayerSegment, Model};

/// Whether the retention budget is shared across layers or split per layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskScope {
    #[default]
    Global,
    /// Each weight segment keeps its own top `(1 − p)` fraction. Diagnostic only.
    LayerWise,
}

impl fmt::Display for MaskScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskScope::Global => "global",
            MaskScope::LayerWise => "layer-wise",
        })
    }
}

impl FromStr for MaskScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(MaskScope::Global),
            "layer-wise" => Ok(MaskScope::LayerWise),
            other => Err(Error::Config(format!("unknown mask scope `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    bits: Vec<bool>,
    prunable: usize,
    retained_prunable: usize,
    target_sparsity_bits: u64,
}

impl PruneMask {
    /// All-ones mask over `segments`.
    pub fn dense(segments: &[LayerSegment]) -> Self {
        let d = segments.iter().map(|s| s.length).sum();
        let prunable = segments.iter().filter(|s| s.prunable()).map(|s| s.length).sum();
        PruneMask { bits: vec![true; d], prunable, retained_prunable: prunable, target_sparsity_bits: 0f64.to_bits() }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn keeps(&self, q: usize) -> bool {
        self.bits[q]
    }

    pub fn target_sparsity(&self) -> f64 {
        f64::from_bits(self.target_sparsity_bits)
    }

    pub fn retained(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn prunable(&self) -> usize {
        self.prunable
    }

    pub fn retained_prunable(&self) -> usize {
        self.retained_prunable
    }

    /// `Σ m_q / d` over every parameter.
    pub fn density(&self) -> f64 {
        self.retained() as f64 / self.bits.len() as f64
    }

    /// `1 − density`.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.density()
    }

    /// Fraction of prunable parameters removed.
    pub fn prunable_sparsity(&self) -> f64 {
        if self.prunable == 0 {
            return 0.0;
        }
        1.0 - self.retained_prunable as f64 / self.prunable as f64
    }
}

/// `round((1 − p) · n)` with halves rounded up. The small slack absorbs the
/// representation error of decimal sparsities such as 0.9.
pub fn retained_count(p: f64, n: usize) -> usize {
    let x = (1.0 - p) * n as f64;
    let k = (x + 0.5 + 1e-9 * x.max(1.0)).floor() as usize;
    k.min(n)
}

fn validate(scores: &[f64], p: f64, segments: &[LayerSegment]) -> Result<()> {
    let d: usize = segments.iter().map(|s| s.length).sum();
    check_len(d, scores.len())?;
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("sparsity must lie in [0, 1), got {p}")));
    }
    if let Some(q) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("score {q} is not finite")));
    }
    Ok(())
}

/// Descending score, then ascending index.
fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

fn keep_top(scores: &[f64], mut candidates: Vec<usize>, k: usize, bits: &mut [bool]) {
    if k == 0 {
        return;
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
    }
    for &q in &candidates[..k] {
        bits[q] = true;
    }
}

/// Global mask keeping the top `(1 − p)` of prunable scores.
pub fn build_mask(scores: &[f64], p: f64, segments: &[LayerSegment]) -> Result<PruneMask> {
    build_mask_scoped(scores, p, segments, MaskScope::Global)
}

pub fn build_mask_scoped(scores: &[f64], p: f64, segments: &[LayerSegment], scope: MaskScope) -> Result<PruneMask> {
    validate(scores, p, segments)?;
    let mut bits = vec![false; scores.len()];
    let mut prunable = 0;
    let mut candidates = Vec::new();
    for seg in segments {
        if seg.prunable() {
            prunable += seg.length;
            match scope {
                MaskScope::Global => candidates.extend(seg.range()),
                MaskScope::LayerWise => keep_top(scores, seg.range().collect(), retained_count(p, seg.length), &mut bits),
            }
        } else {
            bits[seg.range()].fill(true);
        }
    }
    if scope == MaskScope::Global {
        keep_top(scores, candidates, retained_count(p, prunable), &mut bits);
    }
    let retained_prunable = segments
        .iter()
        .filter(|s| s.prunable())
        .map(|s| bits[s.range()].iter().filter(|b| **b).count())
        .sum();
    Ok(PruneMask { bits, prunable, retained_prunable, target_sparsity_bits: p.to_bits() })
}

/// Zeroes every masked coordinate of `params`.
pub fn apply_mask_to(params: &mut [f64], mask: &PruneMask) -> Result<()> {
    check_len(mask.len(), params.len())?;
    for (w, &keep) in params.iter_mut().zip(&mask.bits) {
        if !keep {
            *w = 0.0;
        }
    }
    Ok(())
}

/// Hadamard product `m ⊙ w` in place.
pub fn apply_mask(model: &mut Model, mask: &PruneMask) -> Result<()> {
    apply_mask_to(model.params_mut(), mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRetention {
    pub layer_name: String,
    pub total: usize,
    pub retained: usize,
}

impl LayerRetention {
    pub fn fraction(&self) -> f64 {
        self.retained as f64 / self.total as f64
    }
}

/// Per-layer retention of the weight segments under a mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub layers: Vec<LayerRetention>,
    pub collapsed_layers: Vec<String>,
    pub min_layer_retention: f64,
}

impl CollapseReport {
    pub fn collapsed(&self) -> bool {
        !self.collapsed_layers.is_empty()
    }
}

pub fn detect_layer_collapse(mask: &PruneMask, segments: &[LayerSegment]) -> Result<CollapseReport> {
    let d: usize = segments.iter().map(|s| s.length).sum();
    check_len(d, mask.len())?;
    let layers: Vec<LayerRetention> = segments
        .iter()
        .filter(|s| s.prunable() && s.length > 0)
        .map(|s| LayerRetention {
            layer_name: s.layer_name.clone(),
            total: s.length,
            retained: mask.bits[s.range()].iter().filter(|b| **b).count(),
        })
        .collect();
    let collapsed_layers = layers.iter().filter(|l| l.retained == 0).map(|l| l.layer_name.clone()).collect();
    let min_layer_retention = layers.iter().map(LayerRetention::fraction).fold(1.0, f64::min);
    Ok(CollapseReport { layers, collapsed_layers, min_layer_retention })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criteria::score_magnitude;
    use crate::model::{build_model, ArchitectureSpec, SegmentKind};

    fn weights(n: usize) -> Vec<LayerSegment> {
        vec![LayerSegment { layer_name: "w".into(), offset: 0, length: n, kind: SegmentKind::Weight }]
    }

    fn two_layers() -> Vec<LayerSegment> {
        vec![
            LayerSegment { layer_name: "a".into(), offset: 0, length: 3, kind: SegmentKind::Weight },
            LayerSegment { layer_name: "a".into(), offset: 3, length: 1, kind: SegmentKind::Bias },
            LayerSegment { layer_name: "b".into(), offset: 4, length: 2, kind: SegmentKind::Weight },
        ]
    }

    #[test]
    fn top_half_by_score() {
        let m = build_mask(&[0.1, 0.5, 0.3, 0.9], 0.5, &weights(4)).unwrap();
        assert_eq!(m.bits(), &[false, true, false, true]);
        assert_eq!(m.density(), 0.5);
    }

    #[test]
    fn ties_break_by_index() {
        let m = build_mask(&[0.5; 4], 0.5, &weights(4)).unwrap();
        assert_eq!(m.bits(), &[true, true, false, false]);
    }

    #[test]
    fn zero_sparsity_keeps_everything() {
        let m = build_mask(&[0.0, -1.0, 3.0], 0.0, &weights(3)).unwrap();
        assert!(m.bits().iter().all(|b| *b));
        assert_eq!(m.sparsity(), 0.0);
    }

    #[test]
    fn biases_are_always_kept() {
        let m = build_mask(&[1.0, 2.0, 3.0, -9.0, 4.0, 5.0], 0.6, &two_layers()).unwrap();
        // 5 prunable, keep round(2.0) = 2
        assert_eq!(m.bits(), &[false, false, false, true, true, true]);
        assert_eq!((m.prunable(), m.retained_prunable(), m.retained()), (5, 2, 3));
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(retained_count(0.5, 5), 3);
        assert_eq!(retained_count(0.9, 5), 1);
        assert_eq!(retained_count(0.9, 10), 1);
        assert_eq!(retained_count(0.99, 49), 0);
        assert_eq!(retained_count(0.99, 50), 1);
        assert_eq!(retained_count(0.0, 7), 7);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(build_mask(&[1.0], 1.0, &weights(1)).is_err());
        assert!(build_mask(&[1.0], -0.1, &weights(1)).is_err());
        assert!(build_mask(&[f64::NAN], 0.5, &weights(1)).is_err());
        assert!(matches!(build_mask(&[1.0, 2.0], 0.5, &weights(3)), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn layer_wise_scope_splits_budget() {
        let s = [9.0, 8.0, 7.0, 0.0, 1.0, 2.0];
        let global = build_mask(&s, 0.5, &two_layers()).unwrap();
        assert_eq!(global.bits(), &[true, true, true, true, false, false]);
        let local = build_mask_scoped(&s, 0.5, &two_layers(), MaskScope::LayerWise).unwrap();
        assert_eq!(local.bits(), &[true, true, false, true, false, true]);
    }

    #[test]
    fn apply_zeroes_and_is_idempotent() {
        let m = build_mask(&[0.1, 0.5, 0.3, 0.9], 0.5, &weights(4)).unwrap();
        let mut w = vec![-1.0, 2.0, 3.0, 4.0];
        apply_mask_to(&mut w, &m).unwrap();
        assert_eq!(w, vec![0.0, 2.0, 0.0, 4.0]);
        let once = w.clone();
        apply_mask_to(&mut w, &m).unwrap();
        assert_eq!(w, once);
        assert!(w[0].is_sign_positive());
        let dense = PruneMask::dense(&weights(4));
        let mut v = vec![1.5, -2.5, 0.0, 7.0];
        apply_mask_to(&mut v, &dense).unwrap();
        assert_eq!(v, vec![1.5, -2.5, 0.0, 7.0]);
    }

    #[test]
    fn collapse_report() {
        let m = build_mask(&[9.0, 8.0, 7.0, 0.0, 1.0, 2.0], 0.5, &two_layers()).unwrap();
        let r = detect_layer_collapse(&m, &two_layers()).unwrap();
        assert!(r.collapsed());
        assert_eq!(r.collapsed_layers, vec!["b".to_string()]);
        assert_eq!(r.min_layer_retention, 0.0);
        let ok = build_mask(&[9.0, 8.0, 7.0, 0.0, 1.0, 2.0], 0.2, &two_layers()).unwrap();
        let r = detect_layer_collapse(&ok, &two_layers()).unwrap();
        assert!(!r.collapsed());
        assert_eq!(r.min_layer_retention, 0.5);
    }

    #[test]
    fn bias_only_forward_after_full_prune() {
        let arch = ArchitectureSpec::resolve("mlp-small", [1, 4, 4], 3).unwrap();
        let mut model = build_model(&arch, 1).unwrap();
        let m = build_mask(&vec![1.0; model.num_params()], 0.0, model.segments()).unwrap();
        apply_mask(&mut model, &m).unwrap();
        let zeros: Vec<bool> = model.segments().iter().flat_map(|s| std::iter::repeat(!s.prunable()).take(s.length)).collect();
        let mask = PruneMask { bits: zeros, ..m };
        apply_mask(&mut model, &mask).unwrap();
        let a = model.logits(&crate::tensor::Tensor::zeros(vec![1, 1, 4, 4])).unwrap();
        let b = model.logits(&crate::tensor::Tensor::new(vec![1, 1, 4, 4], vec![3.0; 16]).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adversarially_scaled_layer_collapses_under_magnitude() {
        let arch = ArchitectureSpec::resolve("mlp-deep-narrow", [1, 28, 28], 10).unwrap();
        let mut model = build_model(&arch, 0).unwrap();
        let first = model.segments()[0].clone();
        for w in &mut model.params_mut()[first.range()] {
            *w *= 0.01;
        }
        let s = score_magnitude(model.params());
        let m = build_mask(&s.values, 0.99, model.segments()).unwrap();
        let r = detect_layer_collapse(&m, model.segments()).unwrap();
        let brute = m.bits()[first.range()].iter().filter(|b| **b).count();
        assert_eq!(brute, 0);
        assert!(r.collapsed_layers.contains(&first.layer_name));
    }
}
