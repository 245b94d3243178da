//! Command-line harness: `generate`, `train`, `eval`, `servo`, `tolerance`.
//!
//! Every command reads an optional JSON [`RunConfig`] (unknown keys are
//! rejected), applies the `--seed`, `--jobs` and `--out` overrides, validates
//! everything, and only then touches the filesystem. Reports are written as
//! CSV/JSON plus an aligned text table, each via temp file and rename.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::geometry::PoseError;
use crate::sampler::{base_placements, generate_dataset, load_dataset, placement_scene, DatasetManifest, SamplingRanges, Station};
use crate::scene::{ConnectorSpec, CONNECTOR_IDS};
use crate::servo::{
    fit_tolerance, run_iterative_trials, run_one_shot_trials, PerfectModel, RelativePoseEstimator, ServoOptions, ToleranceFit, ToleranceGrid,
    ToleranceModel, View,
};
use crate::tensornet::{evaluate, identity_baseline, Checkpoint, NetworkSpec, SiameseModel, TrainConfig, TrainData, Trainer};

#[derive(Debug, Parser)]
#[command(name = "siamese-servo", version, about = "Siamese relative-pose regression and visual-servo simulation")]
pub struct Cli {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed for every random stream of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Render a dataset of images and pose labels.
    Generate,
    /// Train the Siamese network on a generated dataset.
    Train,
    /// Evaluate a checkpoint on every test pair of a dataset.
    Eval,
    /// Simulate one-shot or iterative servo trials.
    Servo,
    /// Fit the insertion tolerance frontier to a pass/fail grid.
    Tolerance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: Option<usize>,
    pub generate: GenerateConfig,
    pub train: TrainCommandConfig,
    pub eval: EvalConfig,
    pub servo: ServoCommandConfig,
    pub tolerance: ToleranceCommandConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("out"),
            jobs: None,
            generate: GenerateConfig::default(),
            train: TrainCommandConfig::default(),
            eval: EvalConfig::default(),
            servo: ServoCommandConfig::default(),
            tolerance: ToleranceCommandConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub connectors: Vec<String>,
    /// Defaults to 4000 for one connector and 1000 each for several.
    pub samples_per_connector: Option<usize>,
    pub val_size: usize,
    pub test_size: usize,
    pub ranges: SamplingRanges,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig { connectors: vec!["A1".into()], samples_per_connector: None, val_size: 50, test_size: 50, ranges: SamplingRanges::default() }
    }
}

impl GenerateConfig {
    pub fn manifest(&self, seed: u64) -> DatasetManifest {
        let ids: Vec<&str> = self.connectors.iter().map(String::as_str).collect();
        let n = self.samples_per_connector.unwrap_or(if ids.len() == 1 { 4000 } else { 1000 });
        let mut m = DatasetManifest::multi_connector(&ids, n, seed);
        m.val_size = self.val_size;
        m.test_size = self.test_size;
        m.ranges = self.ranges;
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub dataset: PathBuf,
    /// Train on these connectors only; all of the dataset's when absent.
    pub connectors: Option<Vec<String>>,
    pub network: NetworkSpec,
    /// `seed` here is replaced by the run seed.
    pub config: TrainConfig,
    /// Continue from `<out>/last.ckpt`.
    pub resume: bool,
}

impl Default for TrainCommandConfig {
    fn default() -> Self {
        TrainCommandConfig {
            dataset: PathBuf::from("data"),
            connectors: None,
            network: NetworkSpec::desk(),
            config: TrainConfig::default(),
            resume: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub dataset: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Use exact labels instead of a checkpoint.
    pub perfect_model: bool,
    pub connectors: Option<Vec<String>>,
    pub thresholds_mm: Vec<f64>,
    pub thresholds_deg: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            dataset: PathBuf::from("data"),
            checkpoint: None,
            perfect_model: false,
            connectors: None,
            thresholds_mm: (0..=30).map(|i| i as f64 / 10.0).collect(),
            thresholds_deg: (0..=30).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServoMode {
    OneShot,
    Iterative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServoCommandConfig {
    pub mode: ServoMode,
    pub connectors: Vec<String>,
    pub checkpoint: Option<PathBuf>,
    pub perfect_model: bool,
    /// Trials per connector and visibility level.
    pub trials: usize,
    pub ranges: SamplingRanges,
    /// Multiplier on `ranges` for start poses.
    pub range_scale: f64,
    pub options: ServoOptions,
    /// Iterative mode: one row of trials per visible fraction.
    pub visible_fractions: Vec<f64>,
    /// Frontier to judge insertions; fitted to the embedded table when absent.
    pub tolerance: Option<ToleranceModel>,
    /// Write one JSONL log per iterative episode.
    pub episode_logs: bool,
}

impl Default for ServoCommandConfig {
    fn default() -> Self {
        ServoCommandConfig {
            mode: ServoMode::OneShot,
            connectors: vec!["A1".into()],
            checkpoint: None,
            perfect_model: false,
            trials: 50,
            ranges: SamplingRanges::default(),
            range_scale: 1.0,
            options: ServoOptions::default(),
            visible_fractions: vec![1.0, 0.5, 0.3],
            tolerance: None,
            episode_logs: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToleranceCommandConfig {
    /// Pass/fail grid; the embedded table when absent.
    pub grid: Option<ToleranceGrid>,
    pub dz_allowance_mm: f64,
}

impl Default for ToleranceCommandConfig {
    fn default() -> Self {
        ToleranceCommandConfig { grid: None, dz_allowance_mm: crate::servo::DEFAULT_DZ_ALLOWANCE_MM }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies command-line overrides.
    pub fn with_overrides(mut self, seed: Option<u64>, jobs: Option<usize>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(j) = jobs {
            self.jobs = Some(j);
        }
        if let Some(o) = out {
            self.out = o;
        }
        self.train.config.seed = self.seed;
        self
    }
}

fn check_connectors(ids: &[String]) -> Result<(), CliError> {
    if ids.is_empty() {
        return Err(invalid("connector list is empty"));
    }
    for id in ids {
        if ConnectorSpec::builtin(id).is_none() {
            return Err(invalid(format!("unknown connector {id:?}; known: {}", CONNECTOR_IDS.join(", "))));
        }
    }
    Ok(())
}

/// Output directory must be creatable; existing non-directories are refused.
fn prepare_out(dir: &Path) -> Result<(), CliError> {
    if dir.exists() && !dir.is_dir() {
        return Err(invalid(format!("{} exists and is not a directory", dir.display())));
    }
    std::fs::create_dir_all(dir).map_err(|e| invalid(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    crate::write_atomic(path, text.as_bytes()).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report types serialize");
    s.push('\n');
    s
}

/// Fixed-width text table.
pub fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> =
            cells.iter().zip(&width).enumerate().map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") }).collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    out += &line(width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect());
    for r in rows {
        out += &line(r.iter().map(String::as_str).collect());
    }
    out
}

fn csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join(",") + "\n";
    for r in rows {
        s += &(r.join(",") + "\n");
    }
    s
}

fn f(v: f64, digits: usize) -> String {
    format!("{v:.digits$}")
}

fn error_cells(e: &PoseError) -> Vec<String> {
    e.to_array().iter().map(|v| f(*v, 4)).collect()
}

/// Runs one command; the binary maps errors to exit codes.
pub fn run(cli: Cli) -> Result<String, CliError> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(cli.seed, cli.jobs, cli.out.clone());
    if cfg.jobs == Some(0) {
        return Err(invalid("--jobs must be at least 1"));
    }
    let work = || match cli.command {
        Command::Generate => cmd_generate(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Eval => cmd_eval(&cfg),
        Command::Servo => cmd_servo(&cfg),
        Command::Tolerance => cmd_tolerance(&cfg),
    };
    match cfg.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(runtime)?.install(work),
        None => work(),
    }
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<String, CliError> {
    let g = &cfg.generate;
    check_connectors(&g.connectors)?;
    let manifest = g.manifest(cfg.seed);
    manifest.validate().map_err(invalid)?;
    let out = &cfg.out;
    if out.exists() && std::fs::read_dir(out).map_err(invalid)?.next().is_some() {
        return Err(invalid(format!("{} is not empty", out.display())));
    }
    match out.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(parent) if !parent.is_dir() => return Err(invalid(format!("parent of {} does not exist", out.display()))),
        _ => {}
    }
    let ds = generate_dataset(&manifest, out).map_err(runtime)?;
    let mut s = format!("dataset {} (seed {})\n", out.display(), manifest.seed);
    for c in &ds.connectors {
        writeln!(s, "  {}: {} samples, train {} / val {} / test {}", c.id, c.samples.len(), c.splits.train.len(), c.splits.val.len(), c.splits.test.len())
            .unwrap();
    }
    writeln!(s, "  total {} samples over {} placements", manifest.total_samples(), manifest.placements.len()).unwrap();
    Ok(s)
}

fn selected<'a>(ds: &'a crate::sampler::Dataset, ids: &Option<Vec<String>>) -> Result<Vec<&'a crate::sampler::ConnectorData>, CliError> {
    match ids {
        None => Ok(ds.connectors.iter().collect()),
        Some(ids) => {
            check_connectors(ids)?;
            ids.iter()
                .map(|id| ds.connectors.iter().find(|c| &c.id == id).ok_or_else(|| invalid(format!("dataset has no connector {id}"))))
                .collect()
        }
    }
}

fn metrics_csv(history: &[crate::tensornet::EpochMetrics]) -> String {
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|m| {
            let mut r = vec![m.epoch.to_string(), format!("{:e}", m.learning_rate), format!("{:.6e}", m.train_loss), format!("{:.6e}", m.val.loss)];
            r.extend(error_cells(&m.val.error));
            r
        })
        .collect();
    csv(&["epoch", "learning_rate", "train_loss", "val_loss", "e_x", "e_y", "e_z", "e_roll", "e_pitch", "e_yaw"], &rows)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<String, CliError> {
    let t = &cfg.train;
    t.config.validate().map_err(invalid)?;
    t.network.validate().map_err(invalid)?;
    let ds = load_dataset(&t.dataset).map_err(invalid)?;
    let conns = selected(&ds, &t.connectors)?;
    let train_sets: Vec<Vec<_>> = conns.iter().map(|c| c.subset(&c.splits.train)).collect();
    let val_sets: Vec<Vec<_>> = conns.iter().map(|c| c.subset(&c.splits.val)).collect();
    if train_sets.iter().any(|s| s.len() < 2) || val_sets.iter().any(|s| s.is_empty()) {
        return Err(invalid("every connector needs at least 2 training and 1 validation sample"));
    }
    prepare_out(&cfg.out)?;
    let (last_path, best_path) = (cfg.out.join("last.ckpt"), cfg.out.join("best.ckpt"));
    let mut trainer = if t.resume {
        let ck = Checkpoint::load(&last_path).map_err(invalid)?;
        let adam = ck.adam.ok_or_else(|| invalid(format!("{} holds no optimizer state", last_path.display())))?;
        if ck.model.spec != t.network {
            return Err(invalid("checkpoint network differs from the configured network"));
        }
        let best = match Checkpoint::load(&best_path) {
            Ok(b) => b.metrics.last().map(|m| (b.epoch, m.val.loss, b.model)),
            Err(_) => None,
        };
        Trainer::resume(ck.model, adam, t.config.clone(), ck.epoch, ck.metrics, best).map_err(invalid)?
    } else {
        let model = SiameseModel::new(t.network.clone(), cfg.seed).map_err(invalid)?;
        Trainer::new(model, t.config.clone()).map_err(invalid)?
    };
    let data = TrainData { train: train_sets.iter().map(Vec::as_slice).collect(), val: val_sets.iter().map(Vec::as_slice).collect() };
    let mut io_error = None;
    let start_epoch = trainer.epoch;
    trainer
        .run(&data, |tr, m| {
            eprintln!("epoch {} train_loss {:.4e} val_loss {:.4e}", m.epoch, m.train_loss, m.val.loss);
            let last = Checkpoint {
                model: tr.model.clone(),
                epoch: tr.epoch,
                seed: cfg.seed,
                metrics: tr.history.clone(),
                train_config: Some(tr.config.clone()),
                adam: Some(tr.adam.clone()),
            };
            let mut r = last.save(&last_path);
            if let Some((e, _, best)) = &tr.best {
                if *e == tr.epoch {
                    let ck = Checkpoint { model: best.clone(), epoch: *e, adam: None, ..last.clone() };
                    r = r.and_then(|_| ck.save(&best_path));
                }
            }
            r = r.map_err(Into::into).and_then(|_| {
                crate::write_atomic(&cfg.out.join("metrics.csv"), metrics_csv(&tr.history).as_bytes())
                    .map_err(|e| crate::tensornet::TensorError::Io { path: cfg.out.join("metrics.csv"), source: e })
            });
            if let Err(e) = r {
                io_error.get_or_insert(e);
            }
        })
        .map_err(runtime)?;
    if let Some(e) = io_error {
        return Err(runtime(e));
    }
    let best_epoch = trainer.best.as_ref().map(|b| b.0);
    let summary = serde_json::json!({
        "seed": cfg.seed,
        "connectors": conns.iter().map(|c| c.id.clone()).collect::<Vec<_>>(),
        "epochs_run": trainer.epoch - start_epoch,
        "epochs_total": trainer.epoch,
        "best_epoch": best_epoch,
        "metrics": trainer.history,
    });
    write_file(&cfg.out.join("train_summary.json"), &to_json(&summary))?;
    let mut s = format!("trained epochs {}..{} (seed {})\n", start_epoch + 1, trainer.epoch, cfg.seed);
    s += &text_table(
        &["epoch", "train_loss", "val_loss", "e_x", "e_y", "e_z", "e_roll", "e_pitch", "e_yaw"],
        &trainer
            .history
            .iter()
            .map(|m| {
                let mut r = vec![m.epoch.to_string(), format!("{:.4e}", m.train_loss), format!("{:.4e}", m.val.loss)];
                r.extend(error_cells(&m.val.error));
                r
            })
            .collect::<Vec<_>>(),
    );
    writeln!(s, "best epoch {:?}; checkpoints in {}", best_epoch, cfg.out.display()).unwrap();
    Ok(s)
}

/// Per-connector evaluation result.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub connector: String,
    pub pairs: usize,
    pub model: PoseError,
    pub identity: PoseError,
}

fn load_estimator(checkpoint: &Option<PathBuf>, perfect: bool) -> Result<Option<SiameseModel>, CliError> {
    match (perfect, checkpoint) {
        (true, _) => Ok(None),
        (false, Some(p)) => Ok(Some(Checkpoint::load(p).map_err(invalid)?.model)),
        (false, None) => Err(invalid("set a checkpoint or perfect_model")),
    }
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<String, CliError> {
    let e = &cfg.eval;
    let bad_thr = |v: &[f64]| v.is_empty() || v.iter().any(|x| !(x.is_finite() && *x >= 0.0));
    if bad_thr(&e.thresholds_mm) || bad_thr(&e.thresholds_deg) {
        return Err(invalid("thresholds must be non-empty, finite and non-negative"));
    }
    let model = load_estimator(&e.checkpoint, e.perfect_model)?;
    let ds = load_dataset(&e.dataset).map_err(invalid)?;
    let conns = selected(&ds, &e.connectors)?;
    if conns.iter().any(|c| c.splits.test.is_empty()) {
        return Err(invalid("dataset has no test split"));
    }
    prepare_out(&cfg.out)?;
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for c in &conns {
        let test = c.subset(&c.splits.test);
        let errors = match &model {
            Some(m) => evaluate(m, &[&test], 0.99).map_err(runtime)?.1,
            None => vec![PoseError::default(); test.len() * test.len()],
        };
        let mean = PoseError::mean(&errors).unwrap_or_default();
        rows.push(EvalRow { connector: c.id.clone(), pairs: errors.len(), model: mean, identity: identity_baseline(&[&test]) });
        for (axis, k) in ["e_x", "e_y", "e_z", "e_roll", "e_pitch", "e_yaw"].iter().zip(0..) {
            let thresholds = if k < 3 { &e.thresholds_mm } else { &e.thresholds_deg };
            for &thr in thresholds {
                let pass = errors.iter().filter(|er| er.to_array()[k] <= thr).count();
                curves.push(vec![c.id.clone(), axis.to_string(), f(thr, 3), f(pass as f64 / errors.len() as f64, 4)]);
            }
        }
    }
    let header = ["connector", "estimator", "pairs", "e_x_mm", "e_y_mm", "e_z_mm", "e_roll_deg", "e_pitch_deg", "e_yaw_deg"];
    let table: Vec<Vec<String>> = rows
        .iter()
        .flat_map(|r| {
            let name = if model.is_some() { "model" } else { "perfect" };
            [(name, &r.model), ("identity", &r.identity)].map(|(n, err)| {
                let mut v = vec![r.connector.clone(), n.to_string(), r.pairs.to_string()];
                v.extend(error_cells(err));
                v
            })
        })
        .collect();
    write_file(&cfg.out.join("eval_errors.csv"), &csv(&header, &table))?;
    write_file(&cfg.out.join("pass_fraction.csv"), &csv(&["connector", "axis", "threshold", "fraction"], &curves))?;
    let text = format!("mean absolute error per test pair (seed {})\n", cfg.seed) + &text_table(&header, &table);
    write_file(&cfg.out.join("eval_errors.txt"), &text)?;
    write_file(
        &cfg.out.join("eval_summary.json"),
        &to_json(&serde_json::json!({ "seed": cfg.seed, "checkpoint": e.checkpoint, "perfect_model": e.perfect_model, "rows": rows })),
    )?;
    Ok(text)
}

fn stations(ids: &[String], cam: crate::scene::CameraIntrinsics) -> Vec<Station> {
    let placements = base_placements();
    ids.iter()
        .flat_map(|id| {
            let spec = ConnectorSpec::builtin(id).expect("connector ids checked");
            placements.iter().map(move |p| Station::new(placement_scene(&spec, p), cam)).collect::<Vec<_>>()
        })
        .collect()
}

enum Estimator {
    Model(Box<SiameseModel>),
    Perfect,
}

impl RelativePoseEstimator for Estimator {
    fn estimate(&self, reference: View, test: View) -> Result<crate::geometry::Pose, crate::servo::ServoError> {
        match self {
            Estimator::Model(m) => m.estimate(reference, test),
            Estimator::Perfect => PerfectModel.estimate(reference, test),
        }
    }
}

pub fn cmd_servo(cfg: &RunConfig) -> Result<String, CliError> {
    let s = &cfg.servo;
    check_connectors(&s.connectors)?;
    s.options.validate().map_err(invalid)?;
    if s.trials == 0 || !(s.range_scale > 0.0 && s.range_scale.is_finite()) {
        return Err(invalid("trials and range_scale must be positive"));
    }
    s.ranges.validate().map_err(invalid)?;
    if s.visible_fractions.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
        return Err(invalid("visible fractions must lie in (0, 1]"));
    }
    let tol = match &s.tolerance {
        Some(t) if t.is_monotone() => t.clone(),
        Some(_) => return Err(invalid("tolerance frontier must be non-increasing and non-negative")),
        None => fit_tolerance(&ToleranceGrid::table_one()).map_err(runtime)?.model,
    };
    let estimator = match load_estimator(&s.checkpoint, s.perfect_model)? {
        Some(m) => Estimator::Model(Box::new(m)),
        None => Estimator::Perfect,
    };
    let camera = match &estimator {
        Estimator::Model(m) => crate::scene::CameraIntrinsics::from_fov(m.spec.input_width, m.spec.input_height, 70.0),
        Estimator::Perfect => crate::scene::CameraIntrinsics::default(),
    };
    prepare_out(&cfg.out)?;
    let ranges = s.ranges.scaled(s.range_scale);
    let mut summary_rows = Vec::new();
    let mut trial_rows = Vec::new();
    let text;
    match s.mode {
        ServoMode::OneShot => {
            let mut total = (0, 0);
            for (ci, id) in s.connectors.iter().enumerate() {
                let st = stations(std::slice::from_ref(id), camera);
                let seed = crate::sampler::derive_seed(cfg.seed, 0x7365_7276, ci as u64);
                let trials = run_one_shot_trials(&estimator, &st, s.trials, &ranges, &tol, seed).map_err(runtime)?;
                let ok = trials.iter().filter(|t| t.success).count();
                total = (total.0 + ok, total.1 + trials.len());
                summary_rows.push(vec![id.clone(), ok.to_string(), trials.len().to_string(), f(100.0 * ok as f64 / trials.len() as f64, 1)]);
                for t in &trials {
                    trial_rows.push(vec![
                        id.clone(),
                        t.trial.to_string(),
                        t.placement.to_string(),
                        f(t.offsets.t_xy_mm, 4),
                        f(t.offsets.theta_max_deg, 4),
                        f(t.offsets.dz_mm, 4),
                        t.success.to_string(),
                    ]);
                }
            }
            summary_rows.push(vec!["Overall".into(), total.0.to_string(), total.1.to_string(), f(100.0 * total.0 as f64 / total.1 as f64, 1)]);
            let header = ["connector", "successes", "attempts", "percent"];
            write_file(&cfg.out.join("servo_summary.csv"), &csv(&header, &summary_rows))?;
            write_file(
                &cfg.out.join("servo_trials.csv"),
                &csv(&["connector", "trial", "placement", "t_xy_mm", "theta_max_deg", "dz_mm", "success"], &trial_rows),
            )?;
            text = format!("one-shot insertion trials (seed {})\n", cfg.seed) + &text_table(&header, &summary_rows);
        }
        ServoMode::Iterative => {
            let logs = cfg.out.join("episodes");
            if s.episode_logs {
                prepare_out(&logs)?;
            }
            for (ci, id) in s.connectors.iter().enumerate() {
                let st = stations(std::slice::from_ref(id), camera);
                for &vis in &s.visible_fractions {
                    let opts = ServoOptions { visible_fraction: vis, ..s.options };
                    let seed = crate::sampler::derive_seed(cfg.seed, 0x6974_6572, ci as u64);
                    let trials = run_iterative_trials(&estimator, &st, s.trials, &ranges, &opts, &tol, seed).map_err(runtime)?;
                    let conv: Vec<usize> = trials.iter().filter(|t| t.converged).map(|t| t.iterations).collect();
                    let ok = trials.iter().filter(|t| t.success).count();
                    let mean_iter = if conv.is_empty() { f64::NAN } else { conv.iter().sum::<usize>() as f64 / conv.len() as f64 };
                    summary_rows.push(vec![
                        id.clone(),
                        format!("{:.0}%", vis * 100.0),
                        conv.len().to_string(),
                        trials.len().to_string(),
                        f(mean_iter, 1),
                        conv.iter().max().map_or("-".into(), |m| m.to_string()),
                        ok.to_string(),
                    ]);
                    for t in &trials {
                        trial_rows.push(vec![
                            id.clone(),
                            f(vis, 2),
                            t.trial.to_string(),
                            t.placement.to_string(),
                            t.iterations.to_string(),
                            t.converged.to_string(),
                            t.success.to_string(),
                            f(t.initial_error.max_translation_mm(), 4),
                            f(t.final_error.max_translation_mm(), 4),
                            f(t.final_error.max_rotation_deg(), 4),
                        ]);
                        if s.episode_logs {
                            let mut buf = Vec::new();
                            for l in &t.log {
                                serde_json::to_writer(&mut buf, l).map_err(runtime)?;
                                buf.push(b'\n');
                            }
                            let name = format!("{id}_vis{:03}_trial{:03}.jsonl", (vis * 100.0).round() as u32, t.trial);
                            crate::write_atomic(&logs.join(name), &buf).map_err(runtime)?;
                        }
                    }
                }
            }
            let header = ["connector", "visible", "converged", "trials", "mean_iterations", "max_iterations", "insertions"];
            write_file(&cfg.out.join("servo_summary.csv"), &csv(&header, &summary_rows))?;
            write_file(
                &cfg.out.join("servo_trials.csv"),
                &csv(
                    &["connector", "visible", "trial", "placement", "iterations", "converged", "success", "initial_mm", "final_mm", "final_deg"],
                    &trial_rows,
                ),
            )?;
            text = format!("iterative servo trials (seed {}, start range x{})\n", cfg.seed, s.range_scale) + &text_table(&header, &summary_rows);
        }
    }
    write_file(&cfg.out.join("servo_summary.txt"), &text)?;
    write_file(
        &cfg.out.join("servo_config.json"),
        &to_json(&serde_json::json!({ "seed": cfg.seed, "servo": s, "tolerance_used": tol })),
    )?;
    Ok(text)
}

/// Renders a pass/fail grid with the fitted predicate alongside.
pub fn tolerance_report(grid: &ToleranceGrid, fit: &ToleranceFit) -> String {
    let mut header = vec!["deg \\ mm".to_string()];
    header.extend(grid.offset_mm.iter().map(|m| f(*m, 1)));
    header.push("c(deg)".into());
    let rows: Vec<Vec<String>> = grid
        .theta_deg
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut r = vec![f(*t, 2)];
            for (j, m) in grid.offset_mm.iter().enumerate() {
                let fitted = fit.model.passes(*m, *t);
                let mark = if grid.pass[i][j] { "pass" } else { "fail" };
                r.push(if fitted == grid.pass[i][j] { mark.to_string() } else { format!("{mark}*") });
            }
            r.push(f(fit.model.frontier(*t), 3));
            r
        })
        .collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut s = text_table(&h, &rows);
    writeln!(s, "* = misclassified by the fitted frontier").unwrap();
    writeln!(s, "frontier breakpoints (deg, mm): {:?}", fit.model.breakpoints).unwrap();
    writeln!(s, "reproduced {}/{} cells; monotone frontier: {}", fit.cells - fit.misclassified, fit.cells, fit.model.is_monotone()).unwrap();
    s
}

pub fn cmd_tolerance(cfg: &RunConfig) -> Result<String, CliError> {
    let t = &cfg.tolerance;
    if !(t.dz_allowance_mm >= 0.0 && t.dz_allowance_mm.is_finite()) {
        return Err(invalid("dz_allowance_mm must be non-negative"));
    }
    let grid = t.grid.clone().unwrap_or_else(ToleranceGrid::table_one);
    grid.validate().map_err(invalid)?;
    let mut fit = fit_tolerance(&grid).map_err(invalid)?;
    fit.model.dz_allowance_mm = t.dz_allowance_mm;
    prepare_out(&cfg.out)?;
    let text = tolerance_report(&grid, &fit);
    write_file(&cfg.out.join("tolerance.txt"), &text)?;
    write_file(&cfg.out.join("tolerance.json"), &to_json(&serde_json::json!({ "seed": cfg.seed, "grid": grid, "fit": fit })))?;
    Ok(text)
}
