use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fisher_prune::criteria::score_model;
use fisher_prune::harness::{
    build_run_model, export_scatter, prepare_data, run_experiment, run_point, score_stats, sweep_fim_batch, write_scatter_csv,
    ExperimentConfig, GridPoint, PreparedData,
};
use fisher_prune::masking::build_mask_scoped;
use fisher_prune::model::Model;
use fisher_prune::training::Trainer;
use fisher_prune::verify;

/// Pruning at initialization with Fisher-Taylor Sensitivity and baselines.
///
/// Every subcommand reads an optional key-value config file, then applies
/// trailing `--key value` overrides for any config key.
#[derive(Parser)]
#[command(name = "fisher-prune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer score statistics of each configured criterion.
    Score(ConfigArgs),
    /// One prune-and-train run at the first grid point.
    PruneTrain(ConfigArgs),
    /// The full grid, written to results.csv and summary.csv.
    Experiment(ConfigArgs),
    /// Fisher criteria across FIM batch sizes, with an accuracy matrix.
    SweepFim(ConfigArgs),
    /// Magnitude versus score scatter of the first grid point.
    ExportScatter(ScatterArgs),
    /// Oracle checks of gradients, Taylor model and FIM.
    Verify(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Key-value config file (`key = value` per line, `#` comments).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Config overrides such as `--lr 0.01 --seeds 0,1,2`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ScatterArgs {
    /// Output CSV; defaults to `<out_dir>/scatter.csv`.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Magnitude percentile drawn as the reference line.
    #[arg(long, default_value_t = 99.0)]
    percentile: f64,
    /// Export a seeded random subset of this many parameters.
    #[arg(long)]
    sample: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides).context("applying overrides")?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn first_point(cfg: &ExperimentConfig) -> Result<GridPoint> {
    let grid = cfg.grid();
    if grid.len() > 1 {
        eprintln!("note: grid has {} points, using the first", grid.len());
    }
    grid.into_iter().next().context("empty grid")
}

/// Model at `point` after its dense warm-up epochs.
fn warmed_model(cfg: &ExperimentConfig, data: &PreparedData, point: &GridPoint) -> Result<Model> {
    let mut sgd = cfg.sgd()?;
    sgd.seed = point.seed;
    let mut model = build_run_model(cfg, &data.train, point.seed)?;
    let mut trainer = Trainer::new(&model, sgd, cfg.exec)?;
    for _ in 0..point.warmup_epochs {
        trainer.run_epoch(&mut model, None, &data.train)?;
    }
    Ok(model)
}

fn score(cfg: &ExperimentConfig) -> Result<()> {
    let data = prepare_data(cfg)?;
    // Criteria vary inside the loop; the other coordinates come from the first point.
    let point = cfg.grid().into_iter().next().context("empty grid")?;
    let model = warmed_model(cfg, &data, &point)?;
    println!("{:<10} {:<12} {:<7} {:>9} {:>12} {:>12} {:>12} {:>8}", "criterion", "layer", "kind", "length", "min", "mean", "max", "zeros");
    for &criterion in &cfg.criteria {
        let scores = score_model(&model, &data.train, criterion, &cfg.scoring(&point))?;
        for s in score_stats(&scores, model.segments())? {
            println!(
                "{:<10} {:<12} {:<7} {:>9} {:>12.4e} {:>12.4e} {:>12.4e} {:>8}",
                criterion.id(), s.layer_name, s.kind, s.length, s.min, s.mean, s.max, s.zeros
            );
        }
    }
    Ok(())
}

fn prune_train(cfg: &ExperimentConfig) -> Result<bool> {
    let data = prepare_data(cfg)?;
    let point = first_point(cfg)?;
    let record = run_point(cfg, &data, &point)?;
    println!("{:>5} {:>10} {:>12} {:>9} {:>7}", "epoch", "lr", "train_loss", "val_acc", "masked");
    for e in &record.epochs {
        println!("{:>5} {:>10.3e} {:>12.5} {:>9.2} {:>7}", e.epoch, e.lr, e.train_loss, e.val_accuracy, e.masked);
    }
    let row = &record.row;
    if row.status != "ok" {
        eprintln!("run failed ({}): {}", row.status, row.error);
        return Ok(false);
    }
    println!(
        "criterion {} sparsity {} seed {} warmup {}: test accuracy {:.2}% at epoch {}, density {:.4}, collapsed {}",
        row.criterion,
        row.sparsity,
        row.seed,
        row.warmup_epochs,
        row.test_accuracy.unwrap_or(f64::NAN),
        row.best_val_epoch.unwrap_or(0),
        row.density.unwrap_or(f64::NAN),
        row.collapsed.unwrap_or(false),
    );
    println!("wall time {:.1}s", record.wall_time_seconds);
    Ok(true)
}

fn experiment(cfg: &ExperimentConfig) -> Result<bool> {
    let out = run_experiment(cfg)?;
    println!("{:<10} {:>8} {:>6} {:>5} {:>16} {:>10}", "criterion", "sparsity", "warmup", "ok", "test accuracy", "collapsed");
    for s in &out.summary {
        println!(
            "{:<10} {:>8} {:>6} {:>5} {:>16} {:>10}",
            s.criterion,
            s.sparsity,
            s.warmup_epochs,
            format!("{}/{}", s.ok_runs, s.runs),
            s.test_accuracy_cell,
            s.collapsed_runs
        );
    }
    println!("{} computed, {} reused", out.computed, out.reused);
    println!("raw rows: {}\nsummary:  {}", out.results_path.display(), out.summary_path.display());
    Ok(out.rows.iter().all(|r| r.status == "ok"))
}

fn sweep(cfg: &ExperimentConfig) -> Result<bool> {
    let out = sweep_fim_batch(cfg)?;
    print!("{:<10} {:>6}", "criterion", "warmup");
    for b in &cfg.fim_batch_sizes {
        print!(" {:>9}", format!("B={b}"));
    }
    println!();
    for (criterion, warmup, cells) in &out.matrix {
        print!("{:<10} {:>6}", criterion.id(), warmup);
        for c in cells {
            print!(" {:>9}", c.map_or_else(|| "-".to_string(), |v| format!("{v:.2}")));
        }
        println!();
    }
    println!("matrix: {}", out.matrix_path.display());
    Ok(out.experiment.rows.iter().all(|r| r.status == "ok"))
}

fn scatter(args: &ScatterArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let data = prepare_data(&cfg)?;
    let point = first_point(&cfg)?;
    let model = warmed_model(&cfg, &data, &point)?;
    let scores = score_model(&model, &data.train, point.criterion, &cfg.scoring(&point))?;
    let mask = build_mask_scoped(&scores.values, point.sparsity, model.segments(), cfg.mask_scope)?;
    let sample = args.sample.map(|n| (n, point.seed));
    let export = export_scatter(model.params(), &scores, &mask, model.segments(), args.percentile, sample)?;
    let path = args.output.clone().unwrap_or_else(|| cfg.out_dir.join("scatter.csv"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_scatter_csv(&path, &export)?;
    println!(
        "{} rows, {}th magnitude percentile {:.6e} -> {}",
        export.rows.len(),
        export.percentile,
        export.magnitude_threshold,
        path.display()
    );
    Ok(())
}

fn run_verify(cfg: &ExperimentConfig) -> Result<bool> {
    let checks = verify::run_all(cfg.exec)?;
    println!("{:<30} {:<6} {:>8}  detail", "check", "result", "seconds");
    for c in &checks {
        println!("{:<30} {:<6} {:>8.2}  {}", c.name, if c.passed { "PASS" } else { "FAIL" }, c.seconds, c.detail);
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    let ok = match &cli.command {
        Command::Score(a) => score(&a.load()?).map(|()| true)?,
        Command::PruneTrain(a) => prune_train(&a.load()?)?,
        Command::Experiment(a) => experiment(&a.load()?)?,
        Command::SweepFim(a) => sweep(&a.load()?)?,
        Command::ExportScatter(a) => {
            if !(0.0..=100.0).contains(&a.percentile) {
                bail!("percentile must lie in [0, 100], got {}", a.percentile);
            }
            scatter(a).map(|()| true)?
        }
        Command::Verify(a) => run_verify(&a.load()?)?,
    };
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
