//! Deterministic training loop: adaptive-moment optimizer, linear warmup
//! with plateau-triggered decay, early stopping on validation total loss,
//! and resumable checkpoints.
//!
//! Determinism is load-bearing. Three independent ChaCha streams are
//! derived from one seed — stream 0 initializes weights, stream 1
//! shuffles epochs, stream 2 drives dropout — so ablations that differ
//! only in schedule or regularization still start from identical weights.
//! Checkpoints capture the optimizer moments, the counters, and both
//! stream positions, which is what makes a resumed run replay the
//! remainder of training bit for bit.

use std::fs::{self, OpenOptions};
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Archive, CheckpointError};
use crate::data::{BookLayout, WindowPair};
use crate::model::{Forecaster, ModelError};
use crate::objective::{
    combine, loss_breakdown, structure_loss, structure_violations, total_loss_graph,
    LossBreakdown, StructureSpace,
};
use crate::tensor::{Array, Graph, ParamSet, TensorError};
use crate::transforms::PreparedData;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

/// RNG stream indices under the experiment seed.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

/// One ChaCha stream of the experiment seed.
pub fn seed_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The weight-initialization stream; exposed so evaluation-side code can
/// rebuild untrained baselines identical to what training started from.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    seed_stream(seed, STREAM_INIT)
}

#[derive(Debug)]
pub enum TrainError {
    InvalidConfig(String),
    /// A parameter gradient went NaN/inf at this step.
    NonFiniteGradient { name: String, step: usize },
    /// The batch loss itself went NaN/inf; the last good checkpoint on
    /// disk is left untouched.
    NonFiniteLoss { epoch: usize, step: usize },
    NoTrainingWindows,
    Model(ModelError),
    Tensor(TensorError),
    Checkpoint(CheckpointError),
    Io { path: String, source: std::io::Error },
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::InvalidConfig(msg) => write!(f, "invalid training config: {msg}"),
            TrainError::NonFiniteGradient { name, step } => {
                write!(f, "non-finite gradient for {name} at step {step}")
            }
            TrainError::NonFiniteLoss { epoch, step } => {
                write!(f, "non-finite loss at epoch {epoch}, step {step}")
            }
            TrainError::NoTrainingWindows => write!(f, "no training windows"),
            TrainError::Model(e) => write!(f, "model error: {e}"),
            TrainError::Tensor(e) => write!(f, "tensor error: {e}"),
            TrainError::Checkpoint(e) => write!(f, "checkpoint error: {e}"),
            TrainError::Io { path, source } => write!(f, "io error on {path}: {source}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

impl From<CheckpointError> for TrainError {
    fn from(e: CheckpointError) -> Self {
        TrainError::Checkpoint(e)
    }
}

/// Training hyperparameters and bookkeeping knobs.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Peak learning rate reached at the end of warmup. Zero is allowed
    /// (a frozen run, useful for probing the early-stopping logic).
    pub base_lr: f64,
    pub warmup_steps: usize,
    /// Multiplier applied once per epoch that fails to improve validation.
    pub decay_factor: f64,
    /// Consecutive non-improving epochs tolerated before halting.
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Weight of the structure penalty in the total loss.
    pub w_o: f64,
    /// Space in which the structure penalty is measured.
    pub structure_space: StructureSpace,
    /// Where `best.ckpt`, `last.ckpt`, and `metrics.csv` go; `None`
    /// trains purely in memory.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            warmup_steps: 1000,
            decay_factor: 0.8,
            patience: 10,
            batch_size: 8,
            max_epochs: 100,
            seed: 0,
            w_o: 0.01,
            structure_space: StructureSpace::Dollars,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: &str| Err(TrainError::InvalidConfig(msg.to_string()));
        if !self.base_lr.is_finite() || self.base_lr < 0.0 {
            return fail("base_lr must be finite and nonnegative");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return fail("decay_factor must lie in (0, 1]");
        }
        if self.patience == 0 {
            return fail("patience must be at least 1 epoch");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1");
        }
        if !self.w_o.is_finite() || self.w_o < 0.0 {
            return fail("w_o must be finite and nonnegative");
        }
        Ok(())
    }
}

/// Everything that evolves during training besides the weights.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Epochs completed so far.
    pub epoch: usize,
    /// First-moment accumulators, parallel to the parameter set's order.
    pub m1: Vec<Array>,
    /// Second-moment accumulators.
    pub m2: Vec<Array>,
    pub best_val: f64,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    /// Non-improving epochs seen in total; exponent of the decay factor.
    pub plateaus: usize,
    /// Word position of the shuffle stream (ChaCha is counter-based, so
    /// the position plus the seed reconstructs the stream exactly).
    pub shuffle_pos: u128,
    /// Word position of the dropout stream.
    pub dropout_pos: u128,
}

impl TrainState {
    pub fn fresh(params: &ParamSet) -> Self {
        let zeros: Vec<Array> = (0..params.len())
            .map(|i| Array::zeros(params.array_at(i).shape()))
            .collect();
        TrainState {
            step: 0,
            epoch: 0,
            m1: zeros.clone(),
            m2: zeros,
            best_val: f64::INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
            plateaus: 0,
            shuffle_pos: 0,
            dropout_pos: 0,
        }
    }
}

/// Learning rate at a given optimizer step: linear ramp from zero over
/// the warmup, then the base rate shrunk once per plateau epoch.
pub fn lr_at(step: usize, plateaus: usize, cfg: &TrainConfig) -> f64 {
    let ramp = if cfg.warmup_steps == 0 || step >= cfg.warmup_steps {
        1.0
    } else {
        step as f64 / cfg.warmup_steps as f64
    };
    cfg.base_lr * ramp * cfg.decay_factor.powi(plateaus as i32)
}

/// One adaptive-moment update with bias correction. `grads` must be
/// parallel to the parameter set's registration order.
pub fn optimizer_step(
    params: &mut ParamSet,
    grads: &[Array],
    state: &mut TrainState,
    lr: f64,
) -> Result<(), TrainError> {
    assert_eq!(grads.len(), params.len(), "gradient/parameter count mismatch");
    for (i, g) in grads.iter().enumerate() {
        if !g.data().iter().all(|v| v.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                name: params.name_at(i).to_string(),
                step: state.step,
            });
        }
    }
    let t = state.step + 1;
    let bias1 = 1.0 - BETA1.powi(t as i32);
    let bias2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i].data();
        let m1 = state.m1[i].data_mut();
        let m2 = state.m2[i].data_mut();
        let p = params.array_at_mut(i).data_mut();
        assert_eq!(g.len(), p.len(), "gradient shape mismatch at index {i}");
        for j in 0..g.len() {
            m1[j] = BETA1 * m1[j] + (1.0 - BETA1) * g[j];
            m2[j] = BETA2 * m2[j] + (1.0 - BETA2) * g[j] * g[j];
            let mhat = m1[j] / bias1;
            let vhat = m2[j] / bias2;
            p[j] -= lr * mhat / (vhat.sqrt() + EPSILON);
        }
    }
    state.step = t;
    Ok(())
}

/// One epoch's log row.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed by the end of the epoch.
    pub step: usize,
    /// Learning rate used by the epoch's final step.
    pub lr: f64,
    /// Training losses averaged over the epoch's windows.
    pub train_forecasting: f64,
    pub train_structure: f64,
    pub train_total: f64,
    pub val: LossBreakdown,
}

impl EpochRecord {
    pub fn csv_header() -> String {
        format!(
            "epoch,step,lr,train_forecasting,train_structure,train_total,{}",
            LossBreakdown::csv_header().replace(' ', "")
        )
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.lr,
            self.train_forecasting,
            self.train_structure,
            self.train_total,
            self.val.csv_row()
        )
    }
}

/// What a finished (or halted) run hands back.
pub struct TrainOutcome {
    /// Weights after the final step.
    pub params: ParamSet,
    /// Weights at the best validation epoch.
    pub best: ParamSet,
    pub best_val: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
    pub state: TrainState,
    /// True when patience halted the run before `max_epochs`.
    pub stopped_early: bool,
}

/// Validation pass: deterministic forward over every window, forecasting
/// error in model space, structure penalty in the configured space, and
/// the component metrics of [`LossBreakdown`] averaged across windows.
pub fn validate<M: Forecaster>(
    model: &M,
    params: &ParamSet,
    windows: &[WindowPair],
    prepared: &PreparedData,
    layout: &BookLayout,
    cfg: &TrainConfig,
) -> Result<LossBreakdown, TrainError> {
    assert!(!windows.is_empty(), "validation needs at least one window");
    let mut rows = Vec::with_capacity(windows.len());
    for w in windows {
        let g = Graph::new();
        let bound = params.bind(&g);
        let pred = model.predict(&g, &bound, w)?.value();
        // Component metrics live in model space; the structure penalty is
        // measured where the training objective measures it.
        let mut b = loss_breakdown(&pred, &w.target, layout, cfg.w_o)?;
        if cfg.structure_space == StructureSpace::Dollars {
            let dollars = prepared.scalers.invert_window(&pred, &w.anchor);
            b.structure = structure_loss(&dollars, layout);
            b.structure_per_snapshot =
                b.structure / (pred.rows() * layout.ticker_count()) as f64;
            b.violations = structure_violations(&dollars, layout);
            b.total = combine(b.forecasting, b.structure, cfg.w_o);
        }
        rows.push(b);
    }
    Ok(LossBreakdown::mean_of(&rows))
}

/// Train from fresh weights.
pub fn train<M: Forecaster>(
    model: &M,
    prepared: &PreparedData,
    layout: &BookLayout,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    model.register_params(&mut params, &mut init_rng(cfg.seed));
    let state = TrainState::fresh(&params);
    run_loop(model, params, state, Vec::new(), prepared, layout, cfg)
}

/// Continue a run from a `last.ckpt` written by an earlier invocation
/// with the same config and data.
pub fn resume<M: Forecaster>(
    model: &M,
    prepared: &PreparedData,
    layout: &BookLayout,
    cfg: &TrainConfig,
    checkpoint: &Path,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let archive = Archive::load(checkpoint)?;
    let (params, state) = unpack_training(&archive)?;
    run_loop(model, params, state, Vec::new(), prepared, layout, cfg)
}

fn run_loop<M: Forecaster>(
    model: &M,
    mut params: ParamSet,
    mut state: TrainState,
    mut log: Vec<EpochRecord>,
    prepared: &PreparedData,
    layout: &BookLayout,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if prepared.train.is_empty() {
        return Err(TrainError::NoTrainingWindows);
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| TrainError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
    }

    let mut shuffle_rng = seed_stream(cfg.seed, STREAM_SHUFFLE);
    shuffle_rng.set_word_pos(state.shuffle_pos);
    let mut dropout_rng = seed_stream(cfg.seed, STREAM_DROPOUT);
    dropout_rng.set_word_pos(state.dropout_pos);

    // On resume, the best weights so far live in best.ckpt next to the
    // state checkpoint; fall back to the current weights.
    let mut best = match &cfg.checkpoint_dir {
        Some(dir) if dir.join("best.ckpt").is_file() && state.epoch > 0 => {
            load_model(&dir.join("best.ckpt"))?
        }
        _ => params.clone(),
    };

    let n_train = prepared.train.len();
    let mut stopped_early = false;
    let mut last_lr = lr_at(state.step, state.plateaus, cfg);

    while state.epoch < cfg.max_epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut shuffle_rng);

        let mut sum_f = 0.0;
        let mut sum_s = 0.0;
        let mut sum_t = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let g = Graph::new();
            let bound = params.bind(&g);
            let mut batch_total: Option<crate::tensor::Tensor<'_>> = None;
            for &wi in batch {
                let w = &prepared.train[wi];
                let pred = model.predict_training(&g, &bound, w, &mut dropout_rng)?;
                let terms = total_loss_graph(
                    &g,
                    pred,
                    w,
                    &prepared.scalers,
                    layout,
                    cfg.w_o,
                    cfg.structure_space,
                )?;
                sum_f += terms.forecasting.item();
                sum_s += terms.structure.item();
                sum_t += terms.total.item();
                batch_total = Some(match batch_total {
                    None => terms.total,
                    Some(acc) => acc.add(terms.total)?,
                });
            }
            let loss = batch_total
                .expect("chunks() never yields an empty batch")
                .scale(1.0 / batch.len() as f64);
            if !loss.item().is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: state.epoch,
                    step: state.step,
                });
            }
            g.backward(loss)?;
            let grads: Vec<Array> = (0..bound.len()).map(|i| bound.grad_at(i)).collect();
            last_lr = lr_at(state.step, state.plateaus, cfg);
            optimizer_step(&mut params, &grads, &mut state, last_lr)?;
        }
        state.epoch += 1;

        let val = validate(model, &params, &prepared.val, prepared, layout, cfg)?;
        if val.total < state.best_val {
            state.best_val = val.total;
            state.best_epoch = state.epoch;
            state.epochs_since_improvement = 0;
            best = params.clone();
            if let Some(dir) = &cfg.checkpoint_dir {
                save_model(&best, &dir.join("best.ckpt"))?;
            }
        } else {
            state.epochs_since_improvement += 1;
            state.plateaus += 1;
        }

        state.shuffle_pos = shuffle_rng.get_word_pos();
        state.dropout_pos = dropout_rng.get_word_pos();

        let record = EpochRecord {
            epoch: state.epoch,
            step: state.step,
            lr: last_lr,
            train_forecasting: sum_f / n_train as f64,
            train_structure: sum_s / n_train as f64,
            train_total: sum_t / n_train as f64,
            val,
        };
        if let Some(dir) = &cfg.checkpoint_dir {
            append_metrics(&dir.join("metrics.csv"), &record)?;
            save_training(&params, &state, &dir.join("last.ckpt"))?;
        }
        log.push(record);

        if state.epochs_since_improvement >= cfg.patience {
            stopped_early = true;
            break;
        }
    }

    Ok(TrainOutcome {
        params,
        best,
        best_val: state.best_val,
        best_epoch: state.best_epoch,
        log,
        state,
        stopped_early,
    })
}

fn append_metrics(path: &Path, record: &EpochRecord) -> Result<(), TrainError> {
    let io_err = |e| TrainError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let fresh = !path.is_file();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err)?;
    if fresh {
        writeln!(f, "{}", EpochRecord::csv_header()).map_err(io_err)?;
    }
    writeln!(f, "{}", record.csv_row()).map_err(io_err)?;
    Ok(())
}

// --- checkpoint packing -------------------------------------------------
//
// Everything rides on the array archive format. Parameters are stored as
// `param.{name}`, moments as `m1.{name}` / `m2.{name}`, and the loop's
// scalars and RNG positions as two small arrays. f64 carries u32 exactly,
// so u128 word positions travel as four 32-bit limbs.

const MODEL_HEADER: &str = "lobcast model checkpoint v1";
const TRAIN_HEADER: &str = "lobcast training checkpoint v1";

fn u128_limbs(x: u128) -> [f64; 4] {
    [
        (x & 0xffff_ffff) as f64,
        ((x >> 32) & 0xffff_ffff) as f64,
        ((x >> 64) & 0xffff_ffff) as f64,
        ((x >> 96) & 0xffff_ffff) as f64,
    ]
}

fn limbs_u128(l: &[f64]) -> u128 {
    (l[0] as u128) | ((l[1] as u128) << 32) | ((l[2] as u128) << 64) | ((l[3] as u128) << 96)
}

/// Save bare model weights (the published artifact).
pub fn save_model(params: &ParamSet, path: &Path) -> Result<(), CheckpointError> {
    let mut a = Archive::new(MODEL_HEADER.to_string());
    for (name, arr) in params.iter() {
        a.insert(&format!("param.{name}"), arr.clone());
    }
    a.save(path)
}

/// Load bare model weights, preserving registration order.
pub fn load_model(path: &Path) -> Result<ParamSet, CheckpointError> {
    let a = Archive::load(path)?;
    let mut params = ParamSet::new();
    for (name, arr) in a.iter() {
        if let Some(bare) = name.strip_prefix("param.") {
            params.register(bare, arr.clone());
        }
    }
    Ok(params)
}

/// Save weights plus optimizer/loop state for exact resumption.
pub fn save_training(
    params: &ParamSet,
    state: &TrainState,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut a = Archive::new(TRAIN_HEADER.to_string());
    for (name, arr) in params.iter() {
        a.insert(&format!("param.{name}"), arr.clone());
    }
    for i in 0..params.len() {
        a.insert(&format!("m1.{}", params.name_at(i)), state.m1[i].clone());
        a.insert(&format!("m2.{}", params.name_at(i)), state.m2[i].clone());
    }
    a.insert(
        "train.counters",
        Array::new(
            vec![6],
            vec![
                state.step as f64,
                state.epoch as f64,
                state.best_val,
                state.best_epoch as f64,
                state.epochs_since_improvement as f64,
                state.plateaus as f64,
            ],
        ),
    );
    let mut rng = Vec::with_capacity(8);
    rng.extend_from_slice(&u128_limbs(state.shuffle_pos));
    rng.extend_from_slice(&u128_limbs(state.dropout_pos));
    a.insert("train.rng", Array::new(vec![8], rng));
    a.save(path)
}

/// Load weights plus state written by [`save_training`].
pub fn load_training(path: &Path) -> Result<(ParamSet, TrainState), TrainError> {
    let a = Archive::load(path)?;
    unpack_training(&a)
}

fn unpack_training(a: &Archive) -> Result<(ParamSet, TrainState), TrainError> {
    let mut params = ParamSet::new();
    for (name, arr) in a.iter() {
        if let Some(bare) = name.strip_prefix("param.") {
            params.register(bare, arr.clone());
        }
    }
    let mut m1 = Vec::with_capacity(params.len());
    let mut m2 = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        m1.push(a.require(&format!("m1.{}", params.name_at(i)))?.clone());
        m2.push(a.require(&format!("m2.{}", params.name_at(i)))?.clone());
    }
    let counters = a.require("train.counters")?.data();
    let rng = a.require("train.rng")?.data();
    if counters.len() != 6 || rng.len() != 8 {
        return Err(TrainError::Checkpoint(CheckpointError::Malformed(
            "unexpected training-state record length".to_string(),
        )));
    }
    let state = TrainState {
        step: counters[0] as usize,
        epoch: counters[1] as usize,
        best_val: counters[2],
        best_epoch: counters[3] as usize,
        epochs_since_improvement: counters[4] as usize,
        plateaus: counters[5] as usize,
        m1,
        m2,
        shuffle_pos: limbs_u128(&rng[0..4]),
        dropout_pos: limbs_u128(&rng[4..8]),
    };
    Ok((params, state))
}
