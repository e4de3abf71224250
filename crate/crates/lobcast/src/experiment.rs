//! Experiment configuration and the command implementations behind the
//! CLI: one TOML file pins the dataset, windowing, model, and training
//! choices, and every command re-serializes the effective config into its
//! output directory so a run is reproducible from that file alone.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointError;
use crate::data::synth::{synth_dataset, SynthParams};
use crate::data::{cache, grid, lobster, DataError, Dataset};
use crate::embedding::EmbeddingMode;
use crate::evaluation::{
    compare, evaluate, export_forecast, EvalError, MetricRow, MetricSpace,
};
use crate::model::{baseline::LinearBaseline, Forecaster, LobTransformer, ModelConfig, ModelError};
use crate::objective::{structure_violations, StructureSpace};
use crate::tensor::ParamSet;
use crate::trainer::{self, train, TrainConfig, TrainError};
use crate::transforms::{prepare_windows, PipelineError, PreparedData, TransformMode};

// --- errors and exit codes ------------------------------------------------

/// Process exit codes: 0 success, 2 usage, 3 data error, 4 numeric
/// divergence.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config { path: String, detail: String },
    Locked { path: String },
    Io { path: String, source: std::io::Error },
    Data(DataError),
    Pipeline(PipelineError),
    Model(ModelError),
    Train(TrainError),
    Eval(EvalError),
    Checkpoint(CheckpointError),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage: {msg}"),
            CliError::Config { path, detail } => write!(f, "config {path}: {detail}"),
            CliError::Locked { path } => {
                write!(f, "output directory locked (stale run? remove {path})")
            }
            CliError::Io { path, source } => write!(f, "io {path}: {source}"),
            CliError::Data(e) => write!(f, "data: {e}"),
            CliError::Pipeline(e) => write!(f, "pipeline: {e}"),
            CliError::Model(e) => write!(f, "model: {e}"),
            CliError::Train(e) => write!(f, "train: {e}"),
            CliError::Eval(e) => write!(f, "evaluate: {e}"),
            CliError::Checkpoint(e) => write!(f, "checkpoint: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    /// Map to the documented process exit codes. Anything that diverged
    /// numerically is 4; malformed input of any kind is 3; bad invocation
    /// is 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Train(TrainError::NonFiniteLoss { .. })
            | CliError::Train(TrainError::NonFiniteGradient { .. })
            | CliError::Model(ModelError::NonFiniteActivation { .. })
            | CliError::Eval(EvalError::Model(ModelError::NonFiniteActivation { .. })) => {
                EXIT_NUMERIC
            }
            CliError::Train(TrainError::Model(ModelError::NonFiniteActivation { .. })) => {
                EXIT_NUMERIC
            }
            _ => EXIT_DATA,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e)
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Model(e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Train(e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Eval(e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Checkpoint(e)
    }
}

// --- config file ----------------------------------------------------------

/// `[data]`: where the gridded dataset file lives.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset file produced by `synth` or `ingest`. Depth, tickers, and
    /// the grid interval are read from its header, never restated here.
    pub dataset: String,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dataset: "dataset.csv".to_string(),
        }
    }
}

/// `[windows]`: chronological split and sliding-window geometry.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSection {
    pub context: usize,
    pub target: usize,
    pub stride: usize,
    /// `percent`, `minmax`, or `both`.
    pub transform: String,
}

impl Default for WindowSection {
    fn default() -> Self {
        WindowSection {
            context: 30,
            target: 6,
            stride: 1,
            transform: "both".to_string(),
        }
    }
}

/// `[model]`: architecture.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `transformer` or `linear`.
    pub kind: String,
    /// `temporal`, `per_variable`, or `compound` (transformer only).
    pub embedding: String,
    pub d_model: usize,
    pub d_time: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_ff: usize,
    pub revin: bool,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            kind: "transformer".to_string(),
            embedding: m.embedding.label().to_string(),
            d_model: m.d_model,
            d_time: m.d_time,
            heads: m.n_heads,
            encoder_layers: m.n_encoder_layers,
            decoder_layers: m.n_decoder_layers,
            d_ff: m.d_ff,
            revin: m.revin,
            dropout: m.dropout,
        }
    }
}

/// `[train]`: optimization schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub decay_factor: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub w_o: f64,
    /// `dollars` or `scaled`: where the structure penalty is measured.
    pub structure_space: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            base_lr: t.base_lr,
            warmup_steps: t.warmup_steps,
            decay_factor: t.decay_factor,
            patience: t.patience,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            seed: t.seed,
            w_o: t.w_o,
            structure_space: t.structure_space.label().to_string(),
        }
    }
}

/// The whole experiment file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub windows: WindowSection,
    pub model: ModelSection,
    pub train: TrainSection,
}

/// Flag-level overrides; `None` keeps the file's value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    /// `temporal`, `per_variable`, `compound`, or `linear`.
    pub mode: Option<String>,
    pub transform: Option<String>,
    pub context: Option<usize>,
    pub target: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Apply command-line overrides. `--mode linear` switches the model
    /// kind; the embedding names switch both kind and embedding.
    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        if let Some(mode) = &o.mode {
            match mode.as_str() {
                "linear" => self.model.kind = "linear".to_string(),
                m if EmbeddingMode::parse(m).is_some() => {
                    self.model.kind = "transformer".to_string();
                    self.model.embedding = m.to_string();
                }
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown --mode {other:?} (temporal|per_variable|compound|linear)"
                    )))
                }
            }
        }
        if let Some(t) = &o.transform {
            if TransformMode::parse(t).is_none() {
                return Err(CliError::Usage(format!(
                    "unknown --transform {t:?} (percent|minmax|both)"
                )));
            }
            self.windows.transform = t.clone();
        }
        if let Some(c) = o.context {
            self.windows.context = c;
        }
        if let Some(t) = o.target {
            self.windows.target = t;
        }
        Ok(())
    }

    pub fn transform_mode(&self) -> Result<TransformMode, CliError> {
        TransformMode::parse(&self.windows.transform).ok_or_else(|| CliError::Config {
            path: "windows.transform".to_string(),
            detail: format!("unknown transform {:?}", self.windows.transform),
        })
    }

    pub fn structure_space(&self) -> Result<StructureSpace, CliError> {
        StructureSpace::parse(&self.train.structure_space).ok_or_else(|| CliError::Config {
            path: "train.structure_space".to_string(),
            detail: format!("unknown structure space {:?}", self.train.structure_space),
        })
    }

    /// Short run label used in metric rows, e.g. `transformer.compound`.
    pub fn model_label(&self) -> String {
        match self.model.kind.as_str() {
            "linear" => "linear".to_string(),
            _ => format!("{}.{}", self.model.kind, self.model.embedding),
        }
    }

    /// Assemble the architecture config against a concrete dataset shape.
    pub fn model_config(&self, levels: usize, tickers: usize) -> Result<ModelConfig, CliError> {
        let embedding = EmbeddingMode::parse(&self.model.embedding).ok_or_else(|| {
            CliError::Config {
                path: "model.embedding".to_string(),
                detail: format!("unknown embedding {:?}", self.model.embedding),
            }
        })?;
        let cfg = ModelConfig {
            d_model: self.model.d_model,
            d_time: self.model.d_time,
            n_heads: self.model.heads,
            n_encoder_layers: self.model.encoder_layers,
            n_decoder_layers: self.model.decoder_layers,
            d_ff: self.model.d_ff,
            embedding,
            revin: self.model.revin,
            dropout: self.model.dropout,
            w_o: self.train.w_o,
            levels,
            tickers,
            context_len: self.windows.context,
            target_len: self.windows.target,
        };
        cfg.validate().map_err(|detail| CliError::Config {
            path: "model".to_string(),
            detail,
        })?;
        Ok(cfg)
    }

    pub fn train_config(&self, out: &Path) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            base_lr: self.train.base_lr,
            warmup_steps: self.train.warmup_steps,
            decay_factor: self.train.decay_factor,
            patience: self.train.patience,
            batch_size: self.train.batch_size,
            max_epochs: self.train.max_epochs,
            seed: self.train.seed,
            w_o: self.train.w_o,
            structure_space: self.structure_space()?,
            checkpoint_dir: Some(out.to_path_buf()),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// --- output directory plumbing ---------------------------------------------

/// Guards one output directory against concurrent writers. The lock file
/// is removed on drop; a crash leaves it behind with the owning command
/// line inside for forensics.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "pid={}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked {
                path: path.display().to_string(),
            }),
            Err(e) => Err(CliError::Io {
                path: path.display().to_string(),
                source: e,
            }),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// One of the two supported forecasters, selected by config.
pub enum ModelChoice {
    Transformer(LobTransformer),
    Linear(LinearBaseline),
}

impl ModelChoice {
    pub fn build(cfg: &ExperimentConfig, ds: &Dataset) -> Result<ModelChoice, CliError> {
        let layout = &ds.layout;
        match cfg.model.kind.as_str() {
            "transformer" => Ok(ModelChoice::Transformer(LobTransformer::new(
                cfg.model_config(layout.levels(), layout.ticker_count())?,
            ))),
            "linear" => Ok(ModelChoice::Linear(LinearBaseline::new(
                cfg.windows.context,
                cfg.windows.target,
                layout.n_variables(),
            ))),
            other => Err(CliError::Config {
                path: "model.kind".to_string(),
                detail: format!("unknown model kind {other:?} (transformer|linear)"),
            }),
        }
    }
}

impl Forecaster for ModelChoice {
    fn register_params(&self, params: &mut ParamSet, rng: &mut rand_chacha::ChaCha8Rng) {
        match self {
            ModelChoice::Transformer(m) => m.register_params(params, rng),
            ModelChoice::Linear(m) => m.register_params(params, rng),
        }
    }

    fn predict<'g>(
        &self,
        g: &'g crate::tensor::Graph,
        p: &crate::tensor::Bound<'g>,
        window: &crate::data::WindowPair,
    ) -> Result<crate::tensor::Tensor<'g>, ModelError> {
        match self {
            ModelChoice::Transformer(m) => m.predict(g, p, window),
            ModelChoice::Linear(m) => m.predict(g, p, window),
        }
    }

    fn predict_training<'g>(
        &self,
        g: &'g crate::tensor::Graph,
        p: &crate::tensor::Bound<'g>,
        window: &crate::data::WindowPair,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<crate::tensor::Tensor<'g>, ModelError> {
        match self {
            ModelChoice::Transformer(m) => m.predict_training(g, p, window, rng),
            ModelChoice::Linear(m) => m.predict_training(g, p, window, rng),
        }
    }
}

/// Load the dataset, split it chronologically, and run the transform
/// pipeline as configured.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(Dataset, PreparedData), CliError> {
    let ds = cache::read_dataset(Path::new(&cfg.data.dataset))?;
    let min_len = cfg.windows.context + cfg.windows.target;
    let segments = grid::split(&ds, min_len)?;
    let prepared = prepare_windows(
        &segments,
        cfg.transform_mode()?,
        cfg.windows.context,
        cfg.windows.target,
        cfg.windows.stride,
    )?;
    Ok((ds, prepared))
}

// --- commands ---------------------------------------------------------------

pub struct SynthArgs {
    pub seed: u64,
    pub steps: usize,
    pub tickers: usize,
    pub levels: usize,
    pub interval: f64,
    pub out: PathBuf,
}

/// `synth`: generate a synthetic trading day and write it in the dataset
/// format. Prints a one-line invariant summary.
pub fn run_synth(args: &SynthArgs) -> Result<(), CliError> {
    if args.steps == 0 {
        return Err(CliError::Usage("--steps must be positive".to_string()));
    }
    if args.tickers == 0 || args.levels == 0 {
        return Err(CliError::Usage("--tickers and --levels must be positive".to_string()));
    }
    if !(args.interval > 0.0) {
        return Err(CliError::Usage("--interval must be positive".to_string()));
    }
    let params = SynthParams {
        levels: args.levels,
        ..SynthParams::default()
    };
    let ds = synth_dataset(args.seed, args.steps, args.tickers, args.interval, &params)?;
    let _lock = DirLock::acquire(&args.out)?;
    cache::write_dataset(&args.out.join("dataset.csv"), &ds)?;
    let violations = structure_violations(&ds.matrix, &ds.layout);
    println!(
        "synth: rows={} variables={} tickers={} levels={} interval={} ordinal_violations={}",
        ds.rows(),
        ds.layout.n_variables(),
        ds.layout.ticker_count(),
        ds.layout.levels(),
        ds.interval,
        violations
    );
    Ok(())
}

pub struct IngestArgs {
    pub orderbook: PathBuf,
    pub messages: PathBuf,
    pub ticker: String,
    pub levels: usize,
    pub interval: f64,
    pub out: PathBuf,
}

/// `ingest`: parse a LOBSTER orderbook/message pair, resample onto the
/// grid, and write the dataset format.
pub fn run_ingest(args: &IngestArgs) -> Result<(), CliError> {
    if args.levels == 0 {
        return Err(CliError::Usage("--levels must be positive".to_string()));
    }
    if !(args.interval > 0.0) {
        return Err(CliError::Usage("--interval must be positive".to_string()));
    }
    let events = lobster::parse_lobster(&args.orderbook, &args.messages, args.levels)?;
    let series = grid::resample(&events, &args.ticker, args.interval, grid::DEFAULT_SESSION)?;
    let ds = grid::concat_tickers(std::slice::from_ref(&series))?;
    let _lock = DirLock::acquire(&args.out)?;
    cache::write_dataset(&args.out.join("dataset.csv"), &ds)?;
    println!(
        "ingest: events={} rows={} variables={} interval={}",
        events.len(),
        ds.rows(),
        ds.layout.n_variables(),
        ds.interval
    );
    Ok(())
}

pub struct RunArgs {
    pub config: PathBuf,
    pub overrides: Overrides,
    pub out: PathBuf,
}

/// `train`: fit the configured model, leaving `best.ckpt`, `last.ckpt`,
/// `metrics.csv`, and the effective `config.toml` in the output directory.
pub fn run_train(args: &RunArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    cfg.apply(&args.overrides)?;
    let (ds, prepared) = prepare(&cfg)?;
    let model = ModelChoice::build(&cfg, &ds)?;
    let _lock = DirLock::acquire(&args.out)?;
    write_text(&args.out.join("config.toml"), &cfg.to_toml())?;
    let tcfg = cfg.train_config(&args.out)?;
    let outcome = train(&model, &prepared, &ds.layout, &tcfg)?;
    println!(
        "train: model={} epochs={} best_epoch={} best_val_total={} stopped_early={}",
        cfg.model_label(),
        outcome.state.epoch,
        outcome.best_epoch,
        outcome.best_val,
        outcome.stopped_early
    );
    Ok(())
}

pub struct EvaluateArgs {
    pub config: PathBuf,
    pub overrides: Overrides,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
}

/// `evaluate`: score a checkpoint over the test windows in both scaled
/// and dollar space, writing `eval.csv` (one row per space).
pub fn run_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    cfg.apply(&args.overrides)?;
    let (ds, prepared) = prepare(&cfg)?;
    let model = ModelChoice::build(&cfg, &ds)?;
    let params = trainer::load_model(&args.checkpoint)?;
    let label = cfg.model_label();
    let mut rows = Vec::new();
    for space in [MetricSpace::Scaled, MetricSpace::Dollars] {
        rows.push(evaluate(
            &label,
            &model,
            &params,
            &prepared.test,
            &prepared.scalers,
            &ds.layout,
            space,
            cfg.train.w_o,
        )?);
    }
    let mut csv = MetricRow::csv_header();
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    let _lock = DirLock::acquire(&args.out)?;
    write_text(&args.out.join("config.toml"), &cfg.to_toml())?;
    write_text(&args.out.join("eval.csv"), &csv)?;
    for row in &rows {
        println!(
            "evaluate: model={} space={} total={} violations={}",
            row.model,
            row.space.label(),
            row.metrics.total,
            row.metrics.violations
        );
    }
    Ok(())
}

pub struct ForecastArgs {
    pub config: PathBuf,
    pub overrides: Overrides,
    pub checkpoint: PathBuf,
    pub window: usize,
    pub out: PathBuf,
}

/// `forecast`: export one test window's context, truth, and prediction in
/// original units as `forecast.csv`.
pub fn run_forecast(args: &ForecastArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    cfg.apply(&args.overrides)?;
    let (ds, prepared) = prepare(&cfg)?;
    let model = ModelChoice::build(&cfg, &ds)?;
    let params = trainer::load_model(&args.checkpoint)?;
    let window = prepared.test.get(args.window).ok_or_else(|| {
        CliError::Usage(format!(
            "--window {} out of range ({} test windows)",
            args.window,
            prepared.test.len()
        ))
    })?;
    let csv = export_forecast(&model, &params, window, &prepared.scalers, &ds.layout)?;
    let _lock = DirLock::acquire(&args.out)?;
    write_text(&args.out.join("config.toml"), &cfg.to_toml())?;
    write_text(&args.out.join("forecast.csv"), &csv)?;
    println!(
        "forecast: window={} rows={} file={}",
        args.window,
        (window.context_len() + window.target_len()) * ds.layout.n_variables(),
        args.out.join("forecast.csv").display()
    );
    Ok(())
}

pub struct ReportArgs {
    pub runs: Vec<PathBuf>,
    pub space: MetricSpace,
    pub out: PathBuf,
}

/// `report`: gather `eval.csv` rows from several run directories, keep
/// the requested space, and write a single comparison table with
/// best-per-column marks.
pub fn run_report(args: &ReportArgs) -> Result<(), CliError> {
    if args.runs.is_empty() {
        return Err(CliError::Usage("report needs at least one run directory".to_string()));
    }
    let mut rows = Vec::new();
    for dir in &args.runs {
        let path = dir.join("eval.csv");
        let text = fs::read_to_string(&path).map_err(|e| CliError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut found = false;
        for line in text.lines().skip(1) {
            let row = MetricRow::parse_csv(line).ok_or_else(|| CliError::Config {
                path: path.display().to_string(),
                detail: format!("unparseable metric row: {line}"),
            })?;
            if row.space == args.space {
                rows.push(row);
                found = true;
            }
        }
        if !found {
            return Err(CliError::Config {
                path: path.display().to_string(),
                detail: format!("no {} rows", args.space.label()),
            });
        }
    }
    let n_rows = rows.len();
    let table = compare(rows);
    let _lock = DirLock::acquire(&args.out)?;
    write_text(&args.out.join("comparison.csv"), &table.csv())?;
    println!(
        "report: runs={} rows={} space={} file={}",
        args.runs.len(),
        n_rows,
        args.space.label(),
        args.out.join("comparison.csv").display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.to_toml(), text);
        assert_eq!(back.model.d_model, 48);
        assert_eq!(back.train.warmup_steps, 1000);
        assert_eq!(back.windows.transform, "both");
    }

    #[test]
    fn partial_config_files_inherit_defaults() {
        let cfg: ExperimentConfig = toml::from_str(
            "[windows]\ncontext = 12\n\n[train]\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.windows.context, 12);
        assert_eq!(cfg.windows.target, 6);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.patience, 10);
        assert_eq!(cfg.model.kind, "transformer");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<ExperimentConfig>("[train]\nlearning_rate = 0.1\n");
        assert!(err.is_err(), "misspelled keys must not be ignored");
    }

    #[test]
    fn overrides_rewire_mode_and_seed() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&Overrides {
            seed: Some(42),
            mode: Some("linear".to_string()),
            transform: Some("percent".to_string()),
            context: Some(10),
            target: Some(3),
        })
        .unwrap();
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.model.kind, "linear");
        assert_eq!(cfg.model_label(), "linear");
        assert_eq!(cfg.windows.transform, "percent");
        assert_eq!(cfg.windows.context, 10);
        assert_eq!(cfg.windows.target, 3);

        cfg.apply(&Overrides {
            mode: Some("temporal".to_string()),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(cfg.model.kind, "transformer");
        assert_eq!(cfg.model.embedding, "temporal");
        assert_eq!(cfg.model_label(), "transformer.temporal");

        let err = cfg
            .apply(&Overrides {
                mode: Some("quantum".to_string()),
                ..Overrides::default()
            })
            .err()
            .unwrap();
        assert_eq!(err.exit_code(), EXIT_USAGE);
    }

    #[test]
    fn exit_codes_follow_the_documented_mapping() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 2);
        assert_eq!(
            CliError::Data(DataError::EmptyInput).exit_code(),
            3
        );
        assert_eq!(
            CliError::Train(TrainError::NonFiniteLoss { epoch: 1, step: 2 }).exit_code(),
            4
        );
        assert_eq!(
            CliError::Model(ModelError::NonFiniteActivation {
                stage: "encoder layer 0".to_string()
            })
            .exit_code(),
            4
        );
    }

    #[test]
    fn dir_lock_blocks_second_acquisition_until_released() {
        let dir = TempDir::new().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        let second = DirLock::acquire(dir.path());
        assert!(matches!(second, Err(CliError::Locked { .. })));
        drop(lock);
        let third = DirLock::acquire(dir.path());
        assert!(third.is_ok());
    }

    #[test]
    fn synth_rejects_zero_steps_with_a_usage_error() {
        let dir = TempDir::new().unwrap();
        let err = run_synth(&SynthArgs {
            seed: 0,
            steps: 0,
            tickers: 1,
            levels: 2,
            interval: 5.0,
            out: dir.path().join("d"),
        })
        .err()
        .unwrap();
        assert_eq!(err.exit_code(), EXIT_USAGE);
    }

    #[test]
    fn synth_then_prepare_round_trips_through_the_dataset_file() {
        let dir = TempDir::new().unwrap();
        let out = dir.path().join("data");
        run_synth(&SynthArgs {
            seed: 5,
            steps: 400,
            tickers: 5,
            levels: 5,
            interval: 60.0,
            out: out.clone(),
        })
        .unwrap();
        // T=5, K=5: the dataset header must declare 100 variables.
        let ds = cache::read_dataset(&out.join("dataset.csv")).unwrap();
        assert_eq!(ds.layout.n_variables(), 100);

        let mut cfg = ExperimentConfig::default();
        cfg.data.dataset = out.join("dataset.csv").display().to_string();
        cfg.windows.context = 8;
        cfg.windows.target = 2;
        cfg.windows.stride = 4;
        let (ds2, prepared) = prepare(&cfg).unwrap();
        assert_eq!(ds2.layout.n_variables(), 100);
        assert!(!prepared.train.is_empty());
        assert!(!prepared.test.is_empty());
    }

    #[test]
    fn synth_is_deterministic_across_invocations() {
        let dir = TempDir::new().unwrap();
        let args = |out: PathBuf| SynthArgs {
            seed: 11,
            steps: 200,
            tickers: 1,
            levels: 3,
            interval: 30.0,
            out,
        };
        run_synth(&args(dir.path().join("a"))).unwrap();
        run_synth(&args(dir.path().join("b"))).unwrap();
        let a = fs::read(dir.path().join("a/dataset.csv")).unwrap();
        let b = fs::read(dir.path().join("b/dataset.csv")).unwrap();
        assert_eq!(a, b);
    }
}
