//! Declarative experiment grids with CSV and JSON outputs.
//!
//! A configuration is a flat `key = value` text file. List-valued keys take
//! comma-separated values. Every grid point is identified by the SHA-256 of a
//! canonical description of everything that influences its result, so reruns
//! skip finished points and the raw CSV is byte-identical across reruns.
//! Wall-clock time only appears in the per-run JSON files.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::criteria::{Criterion, ScoreVector, ScoringOptions};
use crate::data::{load_cifar10_bin, load_mnist_idx, stratified_split, synth_blobs, DataLayout, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fim::{FimConfig, FimEstimator};
use crate::masking::{MaskScope, PruneMask};
use crate::model::{build_model, ArchitectureSpec, LayerSegment, Model};
use crate::training::{warmup_then_prune, EpochRecord, PruneSpec, SgdConfig, Splits};

/// Environment variable naming the dataset root.
pub const DATA_DIR_ENV: &str = "FTS_DATA_DIR";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const MATRIX_FILE: &str = "fim_matrix.csv";
pub const RUNS_DIR: &str = "runs";

/// Grid points computed between two rewrites of the results file.
const FLUSH_EVERY: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Cifar10,
    /// Gaussian blobs generated in memory.
    Blobs,
}

impl DatasetName {
    pub fn id(self) -> &'static str {
        match self {
            DatasetName::Mnist => "mnist",
            DatasetName::Cifar10 => "cifar10",
            DatasetName::Blobs => "blobs",
        }
    }
}

impl FromStr for DatasetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetName::Mnist),
            "cifar10" => Ok(DatasetName::Cifar10),
            "blobs" => Ok(DatasetName::Blobs),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

/// Optional overrides on top of the training preset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdOverrides {
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub lr_drops: Option<Vec<usize>>,
    pub drop_factor: Option<f64>,
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetName,
    /// Dataset root; `None` defers to the environment, then `./data`.
    pub data_dir: Option<PathBuf>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub blobs_classes: usize,
    pub blobs_dim: usize,
    pub blobs_per_class: usize,
    pub arch: String,
    pub criteria: Vec<Criterion>,
    pub sparsities: Vec<f64>,
    pub seeds: Vec<u64>,
    pub warmup_epochs: Vec<usize>,
    pub fim_batch_sizes: Vec<usize>,
    pub fim_estimator: FimEstimator,
    pub preset: String,
    pub sgd: SgdOverrides,
    pub fbss_damping: f64,
    pub grasp_epsilon: f64,
    pub mask_scope: MaskScope,
    pub split_seed: u64,
    pub train_fraction: f64,
    pub out_dir: PathBuf,
    pub exec: Exec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetName::Mnist,
            data_dir: None,
            train_limit: None,
            test_limit: None,
            blobs_classes: 3,
            blobs_dim: 8,
            blobs_per_class: 50,
            arch: "mlp-small".into(),
            criteria: vec![Criterion::Fts],
            sparsities: vec![0.9],
            seeds: vec![0],
            warmup_epochs: vec![0],
            fim_batch_sizes: vec![64],
            fim_estimator: FimEstimator::BatchWise,
            preset: "desk".into(),
            sgd: SgdOverrides::default(),
            fbss_damping: 1e-8,
            grasp_epsilon: 1e-3,
            mask_scope: MaskScope::Global,
            split_seed: 0,
            train_fraction: 0.8,
            out_dir: PathBuf::from("results"),
            exec: Exec::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(str::trim).filter(|v| !v.is_empty()).map(|v| parse(key, v)).collect()
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value {
        "" | "none" | "all" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt<T: ToString>(value: &Option<T>) -> String {
    value.as_ref().map_or_else(|| "none".into(), T::to_string)
}

impl ExperimentConfig {
    pub const KEYS: [&'static str; 29] = [
        "dataset",
        "data_dir",
        "train_limit",
        "test_limit",
        "blobs_classes",
        "blobs_dim",
        "blobs_per_class",
        "arch",
        "criteria",
        "sparsities",
        "seeds",
        "warmup_epochs",
        "fim_batch_sizes",
        "fim_estimator",
        "preset",
        "steps",
        "lr",
        "momentum",
        "weight_decay",
        "lr_drops",
        "drop_factor",
        "batch_size",
        "fbss_damping",
        "grasp_epsilon",
        "mask_scope",
        "split_seed",
        "train_fraction",
        "out_dir",
        "exec",
    ];

    /// Sets one key. `criterion` is accepted as a synonym of `criteria`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "dataset" => self.dataset = parse(key, value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "train_limit" => self.train_limit = parse_opt(key, value)?,
            "test_limit" => self.test_limit = parse_opt(key, value)?,
            "blobs_classes" => self.blobs_classes = parse(key, value)?,
            "blobs_dim" => self.blobs_dim = parse(key, value)?,
            "blobs_per_class" => self.blobs_per_class = parse(key, value)?,
            "arch" => self.arch = value.to_string(),
            "criteria" | "criterion" => self.criteria = parse_list(key, value)?,
            "sparsities" | "sparsity" => self.sparsities = parse_list(key, value)?,
            "seeds" | "seed" => self.seeds = parse_list(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse_list(key, value)?,
            "fim_batch_sizes" | "fim_batch_size" => self.fim_batch_sizes = parse_list(key, value)?,
            "fim_estimator" => self.fim_estimator = parse(key, value)?,
            "preset" => {
                SgdConfig::preset(value)?;
                self.preset = value.to_string();
            }
            "steps" => self.sgd.steps = Some(parse(key, value)?),
            "lr" => self.sgd.lr = Some(parse(key, value)?),
            "momentum" => self.sgd.momentum = Some(parse(key, value)?),
            "weight_decay" => self.sgd.weight_decay = Some(parse(key, value)?),
            "lr_drops" => self.sgd.lr_drops = Some(parse_list(key, value)?),
            "drop_factor" => self.sgd.drop_factor = Some(parse(key, value)?),
            "batch_size" => self.sgd.batch_size = Some(parse(key, value)?),
            "fbss_damping" => self.fbss_damping = parse(key, value)?,
            "grasp_epsilon" => self.grasp_epsilon = parse(key, value)?,
            "mask_scope" => self.mask_scope = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "exec" => self.exec = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            cfg.set(key.trim(), value)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Applies `--key value` and `--key=value` arguments; dashes in keys may
    /// be written as underscores or hyphens.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, args: &[S]) -> Result<()> {
        let mut i = 0;
        while i < args.len() {
            let arg = args[i].as_ref();
            let flag = arg
                .strip_prefix("--")
                .ok_or_else(|| Error::Config(format!("expected `--key value`, got `{arg}`")))?;
            let (key, value) = match flag.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    i += 1;
                    let v = args.get(i).ok_or_else(|| Error::Config(format!("missing value for `--{flag}`")))?;
                    (flag.to_string(), v.as_ref().to_string())
                }
            };
            self.set(&key.replace('-', "_"), &value)?;
            i += 1;
        }
        Ok(())
    }

    /// Preset with overrides applied.
    pub fn sgd(&self) -> Result<SgdConfig> {
        let mut c = SgdConfig::preset(&self.preset)?;
        let o = &self.sgd;
        if let Some(v) = o.steps {
            c.steps = v;
        }
        if let Some(v) = o.lr {
            c.lr = v;
        }
        if let Some(v) = o.momentum {
            c.momentum = v;
        }
        if let Some(v) = o.weight_decay {
            c.weight_decay = v;
        }
        if let Some(v) = &o.lr_drops {
            c.lr_drops = v.clone();
        }
        if let Some(v) = o.drop_factor {
            c.drop_factor = v;
        }
        if let Some(v) = o.batch_size {
            c.batch_size = v;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn validate(&self) -> Result<()> {
        let empty = |what: &str| Err(Error::Config(format!("`{what}` must list at least one value")));
        if self.criteria.is_empty() {
            return empty("criteria");
        }
        if self.sparsities.is_empty() {
            return empty("sparsities");
        }
        if self.seeds.is_empty() {
            return empty("seeds");
        }
        if self.warmup_epochs.is_empty() {
            return empty("warmup_epochs");
        }
        if self.fim_batch_sizes.is_empty() {
            return empty("fim_batch_sizes");
        }
        if let Some(p) = self.sparsities.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(Error::Config(format!("sparsity {p} not in [0, 1)")));
        }
        self.sgd()?;
        Ok(())
    }

    /// Every grid point, criteria outermost, FIM batch size innermost.
    pub fn grid(&self) -> Vec<GridPoint> {
        let mut points = Vec::new();
        for &criterion in &self.criteria {
            for &sparsity in &self.sparsities {
                for &seed in &self.seeds {
                    for &warmup_epochs in &self.warmup_epochs {
                        for &fim_batch_size in &self.fim_batch_sizes {
                            points.push(GridPoint { criterion, sparsity, seed, warmup_epochs, fim_batch_size });
                        }
                    }
                }
            }
        }
        points
    }

    /// Canonical description of one grid point; paths and the execution
    /// mode are left out since they do not affect results.
    pub fn canonical(&self, point: &GridPoint) -> Result<String> {
        let sgd = self.sgd()?;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("format", "1".into());
        kv("dataset", self.dataset.id().into());
        kv("train_limit", opt(&self.train_limit));
        kv("test_limit", opt(&self.test_limit));
        if self.dataset == DatasetName::Blobs {
            kv("blobs", format!("{}x{}x{}", self.blobs_classes, self.blobs_dim, self.blobs_per_class));
        }
        kv("split", format!("{}:{}", self.train_fraction, self.split_seed));
        kv("arch", self.arch.clone());
        kv("criterion", point.criterion.to_string());
        kv("sparsity", point.sparsity.to_string());
        kv("seed", point.seed.to_string());
        kv("warmup_epochs", point.warmup_epochs.to_string());
        kv("fim_batch_size", point.fim_batch_size.to_string());
        kv("fim_estimator", self.fim_estimator.to_string());
        kv("steps", sgd.steps.to_string());
        kv("lr", sgd.lr.to_string());
        kv("momentum", sgd.momentum.to_string());
        kv("weight_decay", sgd.weight_decay.to_string());
        kv("lr_drops", join(&sgd.lr_drops));
        kv("drop_factor", sgd.drop_factor.to_string());
        kv("batch_size", sgd.batch_size.to_string());
        kv("fbss_damping", self.fbss_damping.to_string());
        kv("grasp_epsilon", self.grasp_epsilon.to_string());
        kv("mask_scope", self.mask_scope.to_string());
        Ok(s)
    }

    pub fn config_hash(&self, point: &GridPoint) -> Result<String> {
        Ok(format!("{:x}", Sha256::digest(self.canonical(point)?.as_bytes())))
    }

    pub fn scoring(&self, point: &GridPoint) -> ScoringOptions {
        ScoringOptions {
            fim: FimConfig { estimator: self.fim_estimator, batch_size: point.fim_batch_size, seed: point.seed },
            fbss_damping: self.fbss_damping,
            grasp_epsilon: self.grasp_epsilon,
            random_seed: point.seed,
            exec: self.exec,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridPoint {
    pub criterion: Criterion,
    pub sparsity: f64,
    pub seed: u64,
    pub warmup_epochs: usize,
    pub fim_batch_size: usize,
}

/// Train/validation/test sets of an experiment.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl PreparedData {
    pub fn splits(&self) -> Splits<'_> {
        Splits { train: &self.train, val: &self.val, test: &self.test }
    }
}

/// Loads the configured dataset and performs the stratified split.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let layout = DataLayout::new(cfg.data_root());
    let limit = |d: Dataset, n: Option<usize>| match n {
        Some(n) if n < d.len() => d.head(n),
        _ => Ok(d),
    };
    let (full, test) = match cfg.dataset {
        DatasetName::Mnist => {
            let (ti, tl) = layout.mnist_train();
            let (vi, vl) = layout.mnist_test();
            (limit(load_mnist_idx(ti, tl)?, cfg.train_limit)?, limit(load_mnist_idx(vi, vl)?, cfg.test_limit)?)
        }
        DatasetName::Cifar10 => {
            (load_cifar10_bin(&layout.cifar_train(), cfg.train_limit)?, load_cifar10_bin(&layout.cifar_test(), cfg.test_limit)?)
        }
        DatasetName::Blobs => {
            let train = synth_blobs(cfg.blobs_classes, cfg.blobs_dim, cfg.blobs_per_class, cfg.split_seed)?;
            let test = synth_blobs(cfg.blobs_classes, cfg.blobs_dim, cfg.blobs_per_class, cfg.split_seed.wrapping_add(1))?;
            (limit(train, cfg.train_limit)?, limit(test, cfg.test_limit)?)
        }
    };
    let (train, val) = stratified_split(&full, &SplitSpec { train_fraction: cfg.train_fraction, seed: cfg.split_seed })?;
    Ok(PreparedData { train, val, test })
}

/// A freshly initialized model for `cfg.arch` shaped for `data`.
pub fn build_run_model(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<Model> {
    let arch = ArchitectureSpec::resolve(&cfg.arch, data.sample_shape(), data.class_count())?;
    build_model(&arch, seed)
}

/// One line of the raw results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub config_hash: String,
    pub dataset: String,
    pub arch: String,
    pub criterion: String,
    pub sparsity: f64,
    pub seed: u64,
    pub warmup_epochs: usize,
    pub fim_batch_size: usize,
    pub fim_estimator: String,
    pub status: String,
    pub test_accuracy: Option<f64>,
    pub best_val_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub epochs_trained: Option<usize>,
    pub density: Option<f64>,
    pub prunable_sparsity: Option<f64>,
    pub min_layer_retention: Option<f64>,
    pub collapsed: Option<bool>,
    pub collapsed_layers: String,
    pub error: String,
}

/// Per-run JSON mirror.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub row: RunRow,
    pub canonical_config: String,
    pub epochs: Vec<EpochRecord>,
    pub layer_retention: Vec<(String, usize, usize)>,
    pub score_provenance: String,
    pub wall_time_seconds: f64,
}

/// One grid point end to end. Failures are reported in the record, not as `Err`.
pub fn run_point(cfg: &ExperimentConfig, data: &PreparedData, point: &GridPoint) -> Result<RunRecord> {
    let started = Instant::now();
    let hash = cfg.config_hash(point)?;
    let mut row = RunRow {
        config_hash: hash,
        dataset: cfg.dataset.id().into(),
        arch: cfg.arch.clone(),
        criterion: point.criterion.to_string(),
        sparsity: point.sparsity,
        seed: point.seed,
        warmup_epochs: point.warmup_epochs,
        fim_batch_size: point.fim_batch_size,
        fim_estimator: cfg.fim_estimator.to_string(),
        status: "ok".into(),
        test_accuracy: None,
        best_val_epoch: None,
        best_val_accuracy: None,
        epochs_trained: None,
        density: None,
        prunable_sparsity: None,
        min_layer_retention: None,
        collapsed: None,
        collapsed_layers: String::new(),
        error: String::new(),
    };
    let mut record = RunRecord {
        row: row.clone(),
        canonical_config: cfg.canonical(point)?,
        epochs: Vec::new(),
        layer_retention: Vec::new(),
        score_provenance: String::new(),
        wall_time_seconds: 0.0,
    };
    let outcome = (|| {
        let mut sgd = cfg.sgd()?;
        sgd.seed = point.seed;
        let mut model = build_run_model(cfg, &data.train, point.seed)?;
        let spec = PruneSpec {
            criterion: point.criterion,
            sparsity: point.sparsity,
            warmup_epochs: point.warmup_epochs,
            scope: cfg.mask_scope,
            scoring: cfg.scoring(point),
        };
        warmup_then_prune(&mut model, &spec, data.splits(), &sgd, cfg.exec)
    })();
    match outcome {
        Ok(out) => {
            let r = &out.report;
            row.test_accuracy = Some(r.test_accuracy_at_best);
            row.best_val_epoch = Some(r.best_val_epoch);
            row.best_val_accuracy = Some(r.best_val_accuracy);
            row.epochs_trained = Some(r.epochs_trained);
            row.density = Some(out.mask.density());
            row.prunable_sparsity = Some(out.mask.prunable_sparsity());
            row.min_layer_retention = Some(out.collapse.min_layer_retention);
            row.collapsed = Some(out.collapse.collapsed());
            row.collapsed_layers = out.collapse.collapsed_layers.join(";");
            record.epochs = out.report.epochs;
            record.layer_retention =
                out.collapse.layers.iter().map(|l| (l.layer_name.clone(), l.retained, l.total)).collect();
            record.score_provenance = out.scores.provenance;
        }
        Err(e) => {
            row.status = e.kind().into();
            row.error = e.to_string();
        }
    }
    record.row = row;
    record.wall_time_seconds = started.elapsed().as_secs_f64();
    Ok(record)
}

fn results_error(path: &Path, e: csv::Error) -> Error {
    Error::Results { path: path.to_path_buf(), detail: e.to_string() }
}

/// Rows of an existing results file; missing file means none.
pub fn read_rows(path: &Path) -> Result<Vec<RunRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| results_error(path, e))?;
    reader.deserialize().map(|r| r.map_err(|e| results_error(path, e))).collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp).map_err(|e| results_error(&tmp, e))?;
        for row in rows {
            w.serialize(row).map_err(|e| results_error(&tmp, e))?;
        }
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Population mean and standard deviation; `(NaN, NaN)` for no values.
pub fn mean_std_pop(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One line of the summary file: a grid cell aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub arch: String,
    pub criterion: String,
    pub sparsity: f64,
    pub warmup_epochs: usize,
    pub fim_batch_size: usize,
    pub runs: usize,
    pub ok_runs: usize,
    pub test_accuracy_mean: Option<f64>,
    /// Population standard deviation over seeds.
    pub test_accuracy_std_pop: Option<f64>,
    pub test_accuracy_cell: String,
    pub collapsed_runs: usize,
    pub min_layer_retention_mean: Option<f64>,
}

/// Groups rows by every grid coordinate except the seed, in first-seen order.
pub fn summarize(rows: &[RunRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String, String, u64, usize, usize)> = Vec::new();
    let mut groups: HashMap<(String, String, String, u64, usize, usize), Vec<&RunRow>> = HashMap::new();
    for r in rows {
        let key = (r.dataset.clone(), r.arch.clone(), r.criterion.clone(), r.sparsity.to_bits(), r.warmup_epochs, r.fim_batch_size);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let members = &groups[&key];
            let ok: Vec<&&RunRow> = members.iter().filter(|r| r.status == "ok").collect();
            let acc: Vec<f64> = ok.iter().filter_map(|r| r.test_accuracy).collect();
            let ret: Vec<f64> = ok.iter().filter_map(|r| r.min_layer_retention).collect();
            let (mean, std) = mean_std_pop(&acc);
            let some = |v: f64| (!v.is_nan()).then_some(v);
            SummaryRow {
                dataset: key.0.clone(),
                arch: key.1.clone(),
                criterion: key.2.clone(),
                sparsity: f64::from_bits(key.3),
                warmup_epochs: key.4,
                fim_batch_size: key.5,
                runs: members.len(),
                ok_runs: ok.len(),
                test_accuracy_mean: some(mean),
                test_accuracy_std_pop: some(std),
                test_accuracy_cell: if acc.is_empty() { String::new() } else { format!("{mean:.2} ± {std:.2}") },
                collapsed_runs: ok.iter().filter(|r| r.collapsed == Some(true)).count(),
                min_layer_retention_mean: some(mean_std_pop(&ret).0),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub rows: Vec<RunRow>,
    pub summary: Vec<SummaryRow>,
    pub results_path: PathBuf,
    pub summary_path: PathBuf,
    pub computed: usize,
    pub reused: usize,
}

/// Runs the grid of `cfg` into `cfg.out_dir`, skipping points whose config
/// hash already has an `ok` row there.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    run_experiment_with(cfg, &data)
}

/// [`run_experiment`] on already loaded data.
pub fn run_experiment_with(cfg: &ExperimentConfig, data: &PreparedData) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    let runs_dir = out.join(RUNS_DIR);
    fs::create_dir_all(&runs_dir).map_err(|e| Error::io(&runs_dir, e))?;
    let results_path = out.join(RESULTS_FILE);
    let summary_path = out.join(SUMMARY_FILE);

    let mut known: HashMap<String, RunRow> =
        read_rows(&results_path)?.into_iter().filter(|r| r.status == "ok").map(|r| (r.config_hash.clone(), r)).collect();
    let grid = cfg.grid();
    let hashes: Vec<String> = grid.iter().map(|p| cfg.config_hash(p)).collect::<Result<_>>()?;
    let pending: Vec<usize> = (0..grid.len()).filter(|&i| !known.contains_key(&hashes[i])).collect();
    let reused = grid.len() - pending.len();

    let current = |known: &HashMap<String, RunRow>| -> Vec<RunRow> { hashes.iter().filter_map(|h| known.get(h).cloned()).collect() };
    let mut failed: HashMap<String, RunRow> = HashMap::new();
    for chunk in pending.chunks(FLUSH_EVERY) {
        let records = cfg.exec.try_map_range(chunk.len(), |j| run_point(cfg, data, &grid[chunk[j]]))?;
        for record in records {
            let path = runs_dir.join(format!("{}.json", record.row.config_hash));
            let json = serde_json::to_string_pretty(&record).map_err(|e| Error::Config(e.to_string()))?;
            fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
            let target = if record.row.status == "ok" { &mut known } else { &mut failed };
            target.insert(record.row.config_hash.clone(), record.row);
        }
        write_csv(&results_path, &current(&known))?;
    }

    let rows: Vec<RunRow> = hashes.iter().filter_map(|h| known.get(h).or_else(|| failed.get(h)).cloned()).collect();
    write_csv(&results_path, &rows)?;
    let summary = summarize(&rows);
    write_csv(&summary_path, &summary)?;
    Ok(ExperimentOutcome { rows, summary, results_path, summary_path, computed: pending.len(), reused })
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub experiment: ExperimentOutcome,
    pub matrix_path: PathBuf,
    /// `(criterion, warmup_epochs, mean accuracy per batch size)`.
    pub matrix: Vec<(Criterion, usize, Vec<Option<f64>>)>,
}

/// Fisher criteria × FIM batch sizes × seeds at the single configured
/// sparsity, plus a criterion × batch-size matrix of mean test accuracy.
pub fn sweep_fim_batch(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    let mut cfg = cfg.clone();
    cfg.criteria = Criterion::FISHER.to_vec();
    if cfg.sparsities.len() != 1 {
        return Err(Error::Config(format!("a FIM sweep takes one sparsity, got {}", cfg.sparsities.len())));
    }
    cfg.validate()?;
    let data = prepare_data(&cfg)?;
    if let Some(&b) = cfg.fim_batch_sizes.iter().find(|&&b| b == 0 || b > data.train.len()) {
        return Err(Error::InvalidArgument(format!("FIM batch size {b} for a training set of {}", data.train.len())));
    }
    let experiment = run_experiment_with(&cfg, &data)?;
    let mut matrix = Vec::new();
    for &criterion in &cfg.criteria {
        for &warmup in &cfg.warmup_epochs {
            let cells: Vec<Option<f64>> = cfg
                .fim_batch_sizes
                .iter()
                .map(|&b| {
                    experiment
                        .summary
                        .iter()
                        .find(|s| s.criterion == criterion.id() && s.warmup_epochs == warmup && s.fim_batch_size == b)
                        .and_then(|s| s.test_accuracy_mean)
                })
                .collect();
            matrix.push((criterion, warmup, cells));
        }
    }
    let matrix_path = cfg.out_dir.join(MATRIX_FILE);
    let mut text = String::from("criterion,warmup_epochs");
    for b in &cfg.fim_batch_sizes {
        let _ = write!(text, ",batch_{b}");
    }
    text.push('\n');
    for (criterion, warmup, cells) in &matrix {
        let _ = write!(text, "{criterion},{warmup}");
        for c in cells {
            let _ = write!(text, ",{}", c.map_or_else(String::new, |v: f64| v.to_string()));
        }
        text.push('\n');
    }
    fs::write(&matrix_path, text).map_err(|e| Error::io(&matrix_path, e))?;
    Ok(SweepOutcome { experiment, matrix_path, matrix })
}

/// One parameter in a score-versus-magnitude scatter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScatterRow {
    pub index: usize,
    pub abs_weight: f64,
    pub score: f64,
    pub selected: u8,
    pub above_magnitude_percentile: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterExport {
    pub rows: Vec<ScatterRow>,
    /// Nearest-rank percentile of `|w|` over all prunable weights.
    pub magnitude_threshold: f64,
    pub percentile: f64,
}

/// Nearest-rank quantile: the smallest value with at least `percentile`% of
/// the sample at or below it.
pub fn nearest_rank_quantile(values: &[f64], percentile: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&percentile) {
        return Err(Error::InvalidArgument(format!("quantile {percentile} of {} values", values.len())));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(sorted.len()) - 1])
}

/// Prunable parameters with their magnitude, score and mask bit. A
/// parameter is above the line when `|w|` exceeds the `percentile`-th
/// magnitude percentile. With `sample = Some((n, seed))` a seeded subset of
/// `n` parameters is exported, in index order.
pub fn export_scatter(
    params: &[f64],
    scores: &ScoreVector,
    mask: &PruneMask,
    segments: &[LayerSegment],
    percentile: f64,
    sample: Option<(usize, u64)>,
) -> Result<ScatterExport> {
    crate::error::check_len(params.len(), scores.len())?;
    crate::error::check_len(params.len(), mask.len())?;
    let prunable: Vec<usize> = segments.iter().filter(|s| s.prunable()).flat_map(LayerSegment::range).collect();
    let magnitudes: Vec<f64> = prunable.iter().map(|&q| params[q].abs()).collect();
    let magnitude_threshold = nearest_rank_quantile(&magnitudes, percentile)?;
    let chosen: Vec<usize> = match sample {
        Some((n, seed)) if n < prunable.len() => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<usize> =
                rand::seq::index::sample(&mut rng, prunable.len(), n).into_iter().map(|i| prunable[i]).collect();
            picked.sort_unstable();
            picked
        }
        _ => prunable,
    };
    let rows = chosen
        .into_iter()
        .map(|q| ScatterRow {
            index: q,
            abs_weight: params[q].abs(),
            score: scores.values[q],
            selected: u8::from(mask.keeps(q)),
            above_magnitude_percentile: u8::from(params[q].abs() > magnitude_threshold),
        })
        .collect();
    Ok(ScatterExport { rows, magnitude_threshold, percentile })
}

pub fn write_scatter_csv(path: &Path, export: &ScatterExport) -> Result<()> {
    write_csv(path, &export.rows)
}

/// Score statistics of one parameter segment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentScoreStats {
    pub layer_name: String,
    pub kind: String,
    pub length: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub zeros: usize,
}

pub fn score_stats(scores: &ScoreVector, segments: &[LayerSegment]) -> Result<Vec<SegmentScoreStats>> {
    let d: usize = segments.iter().map(|s| s.length).sum();
    crate::error::check_len(d, scores.len())?;
    Ok(segments
        .iter()
        .filter(|s| s.length > 0)
        .map(|s| {
            let v = &scores.values[s.range()];
            SegmentScoreStats {
                layer_name: s.layer_name.clone(),
                kind: format!("{:?}", s.kind).to_lowercase(),
                length: s.length,
                min: v.iter().copied().fold(f64::INFINITY, f64::min),
                max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean: v.iter().sum::<f64>() / v.len() as f64,
                zeros: v.iter().filter(|x| **x == 0.0).count(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_lists_and_overrides() {
        let cfg = ExperimentConfig::parse_str(
            "# grid\ndataset = blobs\ncriteria = fts, snip\nsparsities=0.5,0.9\nseeds = 0,1,2\nlr_drops =\npreset = paper-vgg19 # trailing\n",
        )
        .unwrap();
        assert_eq!(cfg.dataset, DatasetName::Blobs);
        assert_eq!(cfg.criteria, vec![Criterion::Fts, Criterion::Snip]);
        assert_eq!(cfg.grid().len(), 12);
        assert_eq!(cfg.sgd().unwrap().lr_drops, Vec::<usize>::new());
        let mut cfg = cfg;
        cfg.apply_overrides(&["--lr", "0.5", "--fim-batch-sizes=1,8", "--steps", "3"]).unwrap();
        let sgd = cfg.sgd().unwrap();
        assert_eq!((sgd.lr, sgd.steps, sgd.weight_decay), (0.5, 3, 1e-4));
        assert_eq!(cfg.fim_batch_sizes, vec![1, 8]);
        assert!(cfg.apply_overrides(&["--lr"]).is_err());
        assert!(cfg.apply_overrides(&["lr", "1"]).is_err());
        assert!(ExperimentConfig::parse_str("colour = red").is_err());
        assert!(ExperimentConfig::parse_str("just words").is_err());
    }

    #[test]
    fn grid_order_and_hashes() {
        let mut cfg = ExperimentConfig::default();
        cfg.criteria = vec![Criterion::Fts, Criterion::Random];
        cfg.sparsities = vec![0.5, 0.9];
        cfg.seeds = vec![0, 1, 2];
        let grid = cfg.grid();
        assert_eq!(grid.len(), 12);
        assert_eq!((grid[0].criterion, grid[0].sparsity, grid[0].seed), (Criterion::Fts, 0.5, 0));
        assert_eq!((grid[1].seed, grid[3].sparsity, grid[6].criterion), (1, 0.9, Criterion::Random));
        let hashes: std::collections::HashSet<String> = grid.iter().map(|p| cfg.config_hash(p).unwrap()).collect();
        assert_eq!(hashes.len(), 12);
        let mut moved = cfg.clone();
        moved.out_dir = PathBuf::from("elsewhere");
        moved.exec = Exec::Sequential;
        assert_eq!(cfg.config_hash(&grid[0]).unwrap(), moved.config_hash(&grid[0]).unwrap());
        moved.sgd.lr = Some(0.2);
        assert_ne!(cfg.config_hash(&grid[0]).unwrap(), moved.config_hash(&grid[0]).unwrap());
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std_pop(&[90.1, 90.5, 90.9]);
        assert_eq!(format!("{m:.2} ± {s:.2}"), "90.50 ± 0.33");
        assert!(mean_std_pop(&[]).0.is_nan());
    }

    #[test]
    fn quantile_nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank_quantile(&v, 99.0).unwrap(), 99.0);
        assert_eq!(nearest_rank_quantile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(nearest_rank_quantile(&[3.0, 1.0, 2.0], 50.0).unwrap(), 2.0);
        assert!(nearest_rank_quantile(&[], 50.0).is_err());
    }
}
