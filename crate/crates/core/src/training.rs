//! SGD with momentum, coupled weight decay and a multi-step schedule.
//!
//! Minibatch gradients are computed over fixed 16-sample shards and combined
//! in shard order, so training is bit-identical with and without rayon.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::criteria::{score_model, Criterion, ScoreVector, ScoringOptions};
use crate::data::Dataset;
use crate::error::{check_len, Error, Result};
use crate::exec::Exec;
use crate::masking::{apply_mask, build_mask_scoped, detect_layer_collapse, CollapseReport, MaskScope, PruneMask};
use crate::model::Model;
use crate::objective::loss_and_gradient;

const SHARD: usize = 16;
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    /// Epoch budget.
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (0-based) at which the learning rate is multiplied by `drop_factor`.
    pub lr_drops: Vec<usize>,
    pub drop_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl SgdConfig {
    pub const PRESETS: [&'static str; 3] = ["desk", "paper-resnet18", "paper-vgg19"];

    pub fn preset(name: &str) -> Result<Self> {
        let paper = |lr, weight_decay, drop_factor| SgdConfig {
            steps: 160,
            lr,
            momentum: 0.9,
            weight_decay,
            lr_drops: vec![60, 120],
            drop_factor,
            batch_size: 128,
            seed: 0,
        };
        match name {
            "desk" => Ok(SgdConfig {
                steps: 20,
                lr: 0.05,
                momentum: 0.9,
                weight_decay: 5e-4,
                lr_drops: vec![10, 15],
                drop_factor: 0.1,
                batch_size: 64,
                seed: 0,
            }),
            "paper-resnet18" => Ok(paper(0.01, 5e-4, 0.2)),
            "paper-vgg19" => Ok(paper(0.1, 1e-4, 0.1)),
            other => Err(Error::Config(format!("unknown training preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.drop_factor > 0.0 && self.drop_factor <= 1.0) {
            return bad(format!("drop_factor must lie in (0, 1], got {}", self.drop_factor));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.lr_drops.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("lr_drops must be strictly increasing, got {:?}", self.lr_drops));
        }
        if self.lr_drops.last().is_some_and(|&d| d >= self.steps) {
            return bad(format!("lr_drops {:?} must all be below steps = {}", self.lr_drops, self.steps));
        }
        Ok(())
    }

    /// `lr · drop_factor^(number of drops ≤ epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drops.iter().filter(|&&d| d <= epoch).count();
        (0..drops).fold(self.lr, |lr, _| lr * self.drop_factor)
    }
}

/// Train, validation and test sets of one run.
#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based position in the whole budget.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub masked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were restored; 0 means the untrained starting point.
    pub best_val_epoch: usize,
    pub best_val_accuracy: f64,
    pub test_accuracy_at_best: f64,
    pub epochs_trained: usize,
    pub collapsed_at_prune: bool,
}

/// Top-1 accuracy in percent. Ties in the logits resolve to the lowest class.
pub fn accuracy(model: &Model, data: &Dataset, exec: Exec) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty dataset".into()));
    }
    let chunks = data.len().div_ceil(EVAL_CHUNK);
    let correct = exec.try_map_range(chunks, |c| -> Result<usize> {
        let idx: Vec<usize> = (c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(data.len())).collect();
        let batch = data.batch(&idx);
        let logits = model.logits(&batch.inputs)?;
        let classes = logits.shape()[1];
        Ok(logits
            .data()
            .chunks(classes)
            .zip(&batch.labels)
            .filter(|(row, &y)| {
                let best = row.iter().enumerate().fold(0, |b, (k, v)| if *v > row[b] { k } else { b });
                best == y
            })
            .count())
    })?;
    Ok(100.0 * correct.iter().sum::<usize>() as f64 / data.len() as f64)
}

/// Mean loss and gradient over `indices`, computed shard by shard.
fn minibatch_gradient(model: &Model, data: &Dataset, indices: &[usize], exec: Exec) -> Result<(f64, Vec<f64>)> {
    let shards: Vec<&[usize]> = indices.chunks(SHARD).collect();
    let parts = exec.try_map_range(shards.len(), |s| loss_and_gradient(model.network(), model.params(), &data.batch(shards[s])))?;
    let n = indices.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.num_params()];
    for (shard, (l, g)) in shards.iter().zip(parts) {
        let weight = shard.len() as f64 / n;
        loss += weight * l;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += weight * v;
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(loss));
    }
    Ok((loss, grad))
}

/// `v ← μv + g + λw; w ← w − lr·v`, coordinatewise.
pub fn sgd_update(params: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((w, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v + g + weight_decay * *w;
        *w -= lr * *v;
    }
}

/// SGD state that persists across training phases of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: SgdConfig,
    exec: Exec,
    velocity: Vec<f64>,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: &Model, cfg: SgdConfig, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer { velocity: vec![0.0; model.num_params()], cfg, exec, epoch: 0 })
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    /// One pass over `train` in a seeded order; returns the mean batch loss.
    pub fn run_epoch(&mut self, model: &mut Model, mask: Option<&PruneMask>, train: &Dataset) -> Result<f64> {
        if let Some(m) = mask {
            check_len(model.num_params(), m.len())?;
        }
        if train.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let lr = self.cfg.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            let (loss, grad) = minibatch_gradient(model, train, batch, self.exec)?;
            loss_sum += loss * batch.len() as f64;
            if let Some(m) = mask {
                // Weight decay on a pruned coordinate must be a no-op.
                debug_assert!(m.bits().iter().zip(model.params()).all(|(&keep, &w)| keep || w == 0.0));
            }
            sgd_update(model.params_mut(), &mut self.velocity, &grad, lr, self.cfg.momentum, self.cfg.weight_decay);
            if let Some(m) = mask {
                for ((w, v), &keep) in model.params_mut().iter_mut().zip(self.velocity.iter_mut()).zip(m.bits()) {
                    if !keep {
                        *w = 0.0;
                        *v = 0.0;
                    }
                }
            }
        }
        self.epoch += 1;
        Ok(loss_sum / train.len() as f64)
    }

    /// Zeroes momentum on masked coordinates, e.g. right after pruning.
    pub fn apply_mask(&mut self, mask: &PruneMask) -> Result<()> {
        crate::masking::apply_mask_to(&mut self.velocity, mask)
    }

    /// Trains `epochs` epochs, validating after each one, then restores the
    /// earliest best-validation snapshot and evaluates it on the test set.
    /// With `epochs == 0` the current weights are evaluated as they are.
    pub fn fit(&mut self, model: &mut Model, mask: Option<&PruneMask>, sets: Splits<'_>, epochs: usize) -> Result<TrainReport> {
        let mut records = Vec::with_capacity(epochs);
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        if epochs == 0 {
            best = Some((self.epoch, accuracy(model, sets.val, self.exec)?, model.params().to_vec()));
        }
        for _ in 0..epochs {
            let lr = self.cfg.lr_at(self.epoch);
            let train_loss = self.run_epoch(model, mask, sets.train)?;
            let val_accuracy = accuracy(model, sets.val, self.exec)?;
            records.push(EpochRecord { epoch: self.epoch, lr, train_loss, val_accuracy, masked: mask.is_some() });
            if best.as_ref().map_or(true, |(_, acc, _)| val_accuracy > *acc) {
                best = Some((self.epoch, val_accuracy, model.params().to_vec()));
            }
        }
        let (best_val_epoch, best_val_accuracy, snapshot) = best.expect("at least one evaluation");
        model.set_params(&snapshot)?;
        let test_accuracy_at_best = accuracy(model, sets.test, self.exec)?;
        Ok(TrainReport {
            epochs: records,
            best_val_epoch,
            best_val_accuracy,
            test_accuracy_at_best,
            epochs_trained: self.epoch,
            collapsed_at_prune: false,
        })
    }
}

/// Trains `model` for the whole budget, with or without a fixed mask.
pub fn train(model: &mut Model, mask: Option<&PruneMask>, sets: Splits<'_>, cfg: &SgdConfig, exec: Exec) -> Result<TrainReport> {
    if let Some(m) = mask {
        check_len(model.num_params(), m.len())?;
        apply_mask(model, m)?;
    }
    let mut trainer = Trainer::new(model, cfg.clone(), exec)?;
    trainer.fit(model, mask, sets, cfg.steps)
}

/// What to prune and how.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneSpec {
    pub criterion: Criterion,
    pub sparsity: f64,
    pub warmup_epochs: usize,
    pub scope: MaskScope,
    pub scoring: ScoringOptions,
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    pub scores: ScoreVector,
    pub mask: PruneMask,
    pub collapse: CollapseReport,
    pub report: TrainReport,
}

/// Dense warm-up for `warmup_epochs`, scoring on the training set at the
/// warmed weights, masking, then masked training for the rest of the budget.
pub fn warmup_then_prune(model: &mut Model, spec: &PruneSpec, sets: Splits<'_>, cfg: &SgdConfig, exec: Exec) -> Result<PruneOutcome> {
    if spec.warmup_epochs > cfg.steps {
        return Err(Error::InvalidArgument(format!(
            "warm-up of {} epochs exceeds the budget of {}",
            spec.warmup_epochs, cfg.steps
        )));
    }
    let mut trainer = Trainer::new(model, cfg.clone(), exec)?;
    let mut warm = Vec::with_capacity(spec.warmup_epochs);
    for _ in 0..spec.warmup_epochs {
        let lr = cfg.lr_at(trainer.epoch());
        let train_loss = trainer.run_epoch(model, None, sets.train)?;
        let val_accuracy = accuracy(model, sets.val, exec)?;
        warm.push(EpochRecord { epoch: trainer.epoch(), lr, train_loss, val_accuracy, masked: false });
    }
    let scores = score_model(model, sets.train, spec.criterion, &spec.scoring)?;
    let mask = build_mask_scoped(&scores.values, spec.sparsity, model.segments(), spec.scope)?;
    let collapse = detect_layer_collapse(&mask, model.segments())?;
    apply_mask(model, &mask)?;
    trainer.apply_mask(&mask)?;
    let mut report = trainer.fit(model, Some(&mask), sets, cfg.steps - spec.warmup_epochs)?;
    warm.append(&mut report.epochs);
    report.epochs = warm;
    report.collapsed_at_prune = collapse.collapsed();
    Ok(PruneOutcome { scores, mask, collapse, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::model::{build_model, ArchitectureSpec};

    fn blobs_model(seed: u64) -> Model {
        let arch = ArchitectureSpec::resolve("mlp-small", [4, 1, 1], 3).unwrap();
        build_model(&arch, seed).unwrap()
    }

    fn quick_cfg(steps: usize) -> SgdConfig {
        SgdConfig { steps, lr: 0.05, momentum: 0.9, weight_decay: 1e-4, lr_drops: vec![], drop_factor: 0.1, batch_size: 16, seed: 3 }
    }

    #[test]
    fn presets() {
        let r = SgdConfig::preset("paper-resnet18").unwrap();
        assert_eq!((r.steps, r.lr, r.weight_decay, r.drop_factor), (160, 0.01, 5e-4, 0.2));
        assert_eq!(r.lr_drops, vec![60, 120]);
        let v = SgdConfig::preset("paper-vgg19").unwrap();
        assert_eq!((v.lr, v.weight_decay, v.drop_factor, v.momentum), (0.1, 1e-4, 0.1, 0.9));
        let d = SgdConfig::preset("desk").unwrap();
        assert_eq!((d.steps, d.lr_drops.clone()), (20, vec![10, 15]));
        for name in SgdConfig::PRESETS {
            SgdConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(SgdConfig::preset("adam").is_err());
    }

    #[test]
    fn schedule_multiplies_at_each_drop() {
        let c = SgdConfig::preset("paper-resnet18").unwrap();
        assert_eq!(c.lr_at(0), 0.01);
        assert_eq!(c.lr_at(59), 0.01);
        assert_eq!(c.lr_at(60), 0.01 * 0.2);
        assert_eq!(c.lr_at(120), 0.01 * 0.2 * 0.2);
    }

    #[test]
    fn update_rule_hand_iterations() {
        let (mut w, mut v) = ([1.0], [0.0]);
        sgd_update(&mut w, &mut v, &[0.5], 0.1, 0.0, 0.0);
        assert_eq!(w[0], 0.95);
        let (mut w, mut v) = ([0.0], [0.0]);
        sgd_update(&mut w, &mut v, &[1.0], 0.1, 0.9, 0.0);
        assert_eq!((w[0], v[0]), (-0.1, 1.0));
        sgd_update(&mut w, &mut v, &[1.0], 0.1, 0.9, 0.0);
        assert_eq!(v[0], 1.9);
        assert!((w[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn invalid_configs() {
        let mut c = quick_cfg(5);
        c.lr_drops = vec![3, 3];
        assert!(c.validate().is_err());
        c.lr_drops = vec![5];
        assert!(c.validate().is_err());
        let mut c = quick_cfg(5);
        c.momentum = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn training_learns_separable_blobs_deterministically() {
        let data = synth_blobs(3, 4, 40, 0).unwrap();
        let sets = Splits { train: &data, val: &data, test: &data };
        let mut a = blobs_model(1);
        let ra = train(&mut a, None, sets, &quick_cfg(4), Exec::Sequential).unwrap();
        assert!(ra.test_accuracy_at_best > 90.0, "{ra:?}");
        assert_eq!(ra.epochs_trained, 4);
        let mut b = blobs_model(1);
        let rb = train(&mut b, None, sets, &quick_cfg(4), Exec::Parallel).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn masked_coordinates_stay_zero() {
        let data = synth_blobs(3, 4, 20, 1).unwrap();
        let sets = Splits { train: &data, val: &data, test: &data };
        let mut model = blobs_model(2);
        let scores = crate::criteria::score_random(model.num_params(), 9).unwrap();
        let mask = crate::masking::build_mask(&scores.values, 0.7, model.segments()).unwrap();
        apply_mask(&mut model, &mask).unwrap();
        let mut trainer = Trainer::new(&model, quick_cfg(3), Exec::Sequential).unwrap();
        for _ in 0..3 {
            trainer.run_epoch(&mut model, Some(&mask), &data).unwrap();
            for (q, &keep) in mask.bits().iter().enumerate() {
                if !keep {
                    assert_eq!(model.params()[q], 0.0);
                    assert_eq!(trainer.velocity()[q], 0.0);
                }
            }
        }
        let report = trainer.fit(&mut model, Some(&mask), sets, 1).unwrap();
        assert_eq!(report.epochs_trained, 4);
    }

    #[test]
    fn warmup_budget_and_zero_warmup_scores() {
        let data = synth_blobs(3, 4, 20, 2).unwrap();
        let sets = Splits { train: &data, val: &data, test: &data };
        let spec = PruneSpec {
            criterion: Criterion::Fts,
            sparsity: 0.5,
            warmup_epochs: 0,
            scope: MaskScope::Global,
            scoring: ScoringOptions { fim: crate::fim::FimConfig { batch_size: 8, ..ScoringOptions::default().fim }, ..Default::default() },
        };
        let mut model = blobs_model(4);
        let direct = score_model(&model, &data, Criterion::Fts, &spec.scoring).unwrap();
        let out = warmup_then_prune(&mut model, &spec, sets, &quick_cfg(3), Exec::Sequential).unwrap();
        assert_eq!(out.scores, direct);
        assert_eq!(out.report.epochs_trained, 3);
        for w in [1, 3] {
            let mut model = blobs_model(4);
            let out = warmup_then_prune(&mut model, &PruneSpec { warmup_epochs: w, ..spec }, sets, &quick_cfg(3), Exec::Sequential).unwrap();
            assert_eq!(out.report.epochs_trained, 3);
            assert_eq!(out.report.epochs.len(), 3);
        }
        let mut model = blobs_model(4);
        assert!(warmup_then_prune(&mut model, &PruneSpec { warmup_epochs: 4, ..spec }, sets, &quick_cfg(3), Exec::Sequential).is_err());
    }
}
