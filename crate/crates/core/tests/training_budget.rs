use fisher_prune::criteria::Criterion;
use fisher_prune::harness::{run_experiment, ExperimentConfig};
use fisher_prune::Exec;

#[test]
fn warmup_spends_part_of_the_same_budget() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg =
        ExperimentConfig::parse_str("dataset = blobs\nsteps = 6\nlr_drops = 4\nlr = 0.05\nbatch_size = 16\nwarmup_epochs = 0,1,5\n")
            .unwrap();
    cfg.criteria = vec![Criterion::Fts, Criterion::Magnitude];
    cfg.out_dir = dir.path().to_path_buf();
    cfg.exec = Exec::Sequential;
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.rows.len(), 6);
    for row in &out.rows {
        assert_eq!(row.status, "ok");
        assert_eq!(row.epochs_trained, Some(6), "warm-up {}", row.warmup_epochs);
    }

    cfg.warmup_epochs = vec![7];
    let rows = run_experiment(&cfg).unwrap().rows;
    assert!(rows.iter().filter(|r| r.warmup_epochs == 7).all(|r| r.status != "ok"));
}
