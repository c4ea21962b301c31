use std::fs;
use std::path::Path;

use fisher_prune::criteria::{score_model, Criterion, ScoringOptions};
use fisher_prune::harness::{
    build_run_model, export_scatter, prepare_data, read_rows, run_experiment, summarize, sweep_fim_batch, ExperimentConfig,
};
use fisher_prune::masking::build_mask;
use fisher_prune::Exec;

fn blobs_cfg(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse_str(
        "dataset = blobs\narch = mlp-small\nblobs_per_class = 40\nsteps = 3\nlr_drops = 2\nlr = 0.05\nbatch_size = 16\n",
    )
    .unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg.exec = Exec::Sequential;
    cfg
}

fn one_epoch(cfg: &mut ExperimentConfig) {
    cfg.sgd.steps = Some(1);
    cfg.sgd.lr_drops = Some(Vec::new());
}

#[test]
fn reruns_are_byte_identical_and_resume_by_hash() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = blobs_cfg(a.path());
    cfg.criteria = vec![Criterion::Fts, Criterion::Snip, Criterion::Random];
    cfg.seeds = vec![0, 1];
    cfg.warmup_epochs = vec![0, 1];
    let first = run_experiment(&cfg).unwrap();
    assert_eq!(first.computed, 12);
    assert!(first.rows.iter().all(|r| r.status == "ok"));

    let mut other = cfg.clone();
    other.out_dir = b.path().to_path_buf();
    other.exec = Exec::Parallel;
    run_experiment(&other).unwrap();
    let results_a = fs::read(a.path().join("results.csv")).unwrap();
    assert_eq!(results_a, fs::read(b.path().join("results.csv")).unwrap());
    assert_eq!(fs::read(a.path().join("summary.csv")).unwrap(), fs::read(b.path().join("summary.csv")).unwrap());

    let again = run_experiment(&cfg).unwrap();
    assert_eq!((again.computed, again.reused), (0, 12));
    assert_eq!(results_a, fs::read(a.path().join("results.csv")).unwrap());

    // Growing the grid computes only the new points.
    cfg.seeds = vec![0, 1, 2];
    let grown = run_experiment(&cfg).unwrap();
    assert_eq!((grown.computed, grown.reused), (6, 12));
}

#[test]
fn summary_recomputes_from_raw_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = blobs_cfg(dir.path());
    cfg.criteria = vec![Criterion::Magnitude];
    cfg.seeds = vec![0, 1, 2];
    let out = run_experiment(&cfg).unwrap();
    let rows = read_rows(&out.results_path).unwrap();
    assert_eq!(rows, out.rows);
    let summary = summarize(&rows);
    assert_eq!(summary, out.summary);
    let accs: Vec<f64> = rows.iter().map(|r| r.test_accuracy.unwrap()).collect();
    let mean = accs.iter().sum::<f64>() / 3.0;
    let std = (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
    assert_eq!(summary[0].test_accuracy_cell, format!("{mean:.2} ± {std:.2}"));
    assert_eq!(summary[0].runs, 3);
}

#[test]
fn sweep_fills_the_criterion_by_batch_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = blobs_cfg(dir.path());
    one_epoch(&mut cfg);
    cfg.fim_batch_sizes = vec![1, 4, 16];
    cfg.seeds = vec![0, 1];
    cfg.sparsities = vec![0.8];
    let out = sweep_fim_batch(&cfg).unwrap();
    assert_eq!(out.experiment.rows.len(), 4 * 3 * 2);
    assert_eq!(out.matrix.len(), 4);
    assert!(out.matrix.iter().all(|(_, _, cells)| cells.len() == 3 && cells.iter().all(Option::is_some)));
    let text = fs::read_to_string(&out.matrix_path).unwrap();
    assert!(text.starts_with("criterion,warmup_epochs,batch_1,batch_4,batch_16\n"));

    cfg.fim_batch_sizes = vec![1, 100_000];
    assert!(sweep_fim_batch(&cfg).is_err());
}

#[test]
fn batch_of_one_column_matches_per_sample_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = blobs_cfg(&dir.path().join("batch"));
    one_epoch(&mut cfg);
    cfg.criteria = vec![Criterion::Fts];
    cfg.fim_batch_sizes = vec![1];
    let batch = run_experiment(&cfg).unwrap();
    cfg.out_dir = dir.path().join("sample");
    cfg.fim_estimator = fisher_prune::fim::FimEstimator::PerSample;
    let sample = run_experiment(&cfg).unwrap();
    assert_eq!(batch.rows[0].test_accuracy, sample.rows[0].test_accuracy);
    assert_eq!(batch.rows[0].density, sample.rows[0].density);
}

#[test]
fn scatter_exports_selection_and_subsamples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = blobs_cfg(dir.path());
    let data = prepare_data(&cfg).unwrap();
    let model = build_run_model(&cfg, &data.train, 0).unwrap();
    let scores = score_model(&model, &data.train, Criterion::Fts, &ScoringOptions { exec: Exec::Sequential, ..Default::default() }).unwrap();
    let mask = build_mask(&scores.values, 0.9, model.segments()).unwrap();

    let full = export_scatter(model.params(), &scores, &mask, model.segments(), 99.0, None).unwrap();
    assert_eq!(full.rows.len(), mask.prunable());
    assert_eq!(full.rows.iter().filter(|r| r.selected == 1).count(), mask.retained_prunable());
    let above = full.rows.iter().filter(|r| r.above_magnitude_percentile == 1).count();
    assert!(above <= full.rows.len() / 100 + 1);

    let a = export_scatter(model.params(), &scores, &mask, model.segments(), 99.0, Some((50, 4))).unwrap();
    let b = export_scatter(model.params(), &scores, &mask, model.segments(), 99.0, Some((50, 4))).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 50);
    assert!(a.rows.windows(2).all(|w| w[0].index < w[1].index));
    assert!(export_scatter(model.params(), &scores, &mask, model.segments(), 101.0, None).is_err());
}
