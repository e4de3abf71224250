//! The forecasting models: an attention encoder-decoder over embedded
//! book tokens, and a linear autoregressive baseline behind the same
//! interface.
//!
//! Data flow for the attention model, per window:
//!
//! ```text
//! context values ──(reversible norm)──> embed ──> encoder ─┐
//! target shape ──────────────────────> embed ──> decoder <─┘ (cross)
//!                                                  │
//!                                  readout ──(denorm)──> (L_t × N)
//! ```
//!
//! Everything runs on one autodiff graph per window, so a single backward
//! call reaches every parameter, including the embedding tables and the
//! normalization affine.

pub mod attention;
pub mod baseline;
pub mod blocks;
pub mod revin;

use std::error::Error;
use std::fmt;

use rand_chacha::ChaCha8Rng;

use crate::data::WindowPair;
use crate::embedding::{
    embed_window_with, register_embedding_params, EmbeddingConfig, EmbeddingMode, TokenMeta,
};
use crate::tensor::{Bound, Graph, ParamSet, Tensor, TensorError};

pub use attention::{multi_head_attention, scaled_dot_attention, AttentionMask, MASK_FILL};
pub use baseline::LinearBaseline;
pub use blocks::{
    decoder_forward, encoder_forward, feed_forward, layer_norm, register_decoder_layer,
    register_encoder_layer, Dropout, LAYER_NORM_EPS,
};
pub use revin::{revin_denormalize, revin_normalize, revin_stats, RevinStats, STD_FLOOR};

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Tensor(TensorError),
    /// A layer produced NaN or infinity — training has diverged.
    NonFiniteActivation { stage: String },
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Tensor(e) => write!(f, "{e}"),
            ModelError::NonFiniteActivation { stage } => {
                write!(f, "non-finite activation in {stage}")
            }
        }
    }
}

impl Error for ModelError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            ModelError::Tensor(e) => Some(e),
            ModelError::NonFiniteActivation { .. } => None,
        }
    }
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

/// Everything that determines the network's architecture. Serialized into
/// checkpoints so a saved model is self-describing.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Time2Vec width feeding the time embedding.
    pub d_time: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    /// Hidden width of the position-wise feed-forward blocks.
    pub d_ff: usize,
    pub embedding: EmbeddingMode,
    /// Reversible per-window normalization around the network.
    pub revin: bool,
    /// Dropout rate on sublayer outputs during training; 0 disables.
    pub dropout: f64,
    /// Weight of the ordinal structure penalty in the total loss.
    pub w_o: f64,
    /// Book depth K per ticker.
    pub levels: usize,
    pub tickers: usize,
    pub context_len: usize,
    pub target_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 48,
            d_time: 6,
            n_heads: 3,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            d_ff: 96,
            embedding: EmbeddingMode::Compound,
            revin: true,
            dropout: 0.0,
            w_o: 0.01,
            levels: 5,
            tickers: 1,
            context_len: 30,
            target_len: 6,
        }
    }
}

impl ModelConfig {
    pub fn n_variables(&self) -> usize {
        self.tickers * 2 * self.levels * 2
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(format!(
                "d_model {} is not divisible into {} heads",
                self.d_model, self.n_heads
            ));
        }
        if self.d_time < 2 {
            return Err("d_time must be at least 2 (one linear + one periodic)".into());
        }
        if self.d_model < self.d_time {
            return Err(format!(
                "d_model {} is smaller than d_time {}",
                self.d_model, self.d_time
            ));
        }
        for (name, v) in [
            ("d_ff", self.d_ff),
            ("levels", self.levels),
            ("tickers", self.tickers),
            ("context_len", self.context_len),
            ("target_len", self.target_len),
        ] {
            if v == 0 {
                return Err(format!("{name} must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !self.w_o.is_finite() || self.w_o < 0.0 {
            return Err(format!("structure weight {} must be finite and >= 0", self.w_o));
        }
        Ok(())
    }

    pub fn embedding_config(&self) -> EmbeddingConfig {
        EmbeddingConfig::new(self.d_model, self.d_time, self.embedding, self.levels, self.tickers)
    }
}

/// A model that maps a context window to an (L_t × N) prediction in the
/// scaled space, differentiable end to end. One implementation is the
/// attention network, the other the linear baseline; the trainer and
/// evaluator do not care which.
pub trait Forecaster {
    /// Create this model's parameters in `params` under its stable names.
    fn register_params(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng);

    /// Deterministic forward pass (no dropout); used for evaluation and
    /// anywhere reproducibility is load-bearing.
    fn predict<'g>(
        &self,
        g: &'g Graph,
        p: &Bound<'g>,
        window: &WindowPair,
    ) -> Result<Tensor<'g>, ModelError>;

    /// Forward pass for a training step. The default ignores the RNG and
    /// behaves exactly like [`Forecaster::predict`]; models with
    /// stochastic regularization override it.
    fn predict_training<'g>(
        &self,
        g: &'g Graph,
        p: &Bound<'g>,
        window: &WindowPair,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<'g>, ModelError> {
        self.predict(g, p, window)
    }
}

/// The attention encoder-decoder.
#[derive(Debug, Clone)]
pub struct LobTransformer {
    pub cfg: ModelConfig,
}

impl LobTransformer {
    pub fn new(cfg: ModelConfig) -> Self {
        if let Err(e) = cfg.validate() {
            panic!("invalid model config: {e}");
        }
        LobTransformer { cfg }
    }

    fn forward<'g>(
        &self,
        g: &'g Graph,
        p: &Bound<'g>,
        window: &WindowPair,
        drop: &mut Dropout<'_>,
    ) -> Result<Tensor<'g>, ModelError> {
        let cfg = &self.cfg;
        assert_eq!(window.context_len(), cfg.context_len, "context length mismatch");
        assert_eq!(window.target_len(), cfg.target_len, "target length mismatch");

        let stats = cfg.revin.then(|| revin_stats(&window.context));
        let ctx_values = match &stats {
            Some(s) => revin_normalize(g, p, &window.context, s)?,
            None => g.constant(window.context.clone()),
        };

        let ecfg = cfg.embedding_config();
        let (ctx_seq, tgt_seq) = embed_window_with(g, p, &ecfg, window, ctx_values)?;
        if !ctx_seq.tokens.is_finite() || !tgt_seq.tokens.is_finite() {
            return Err(ModelError::NonFiniteActivation {
                stage: "embedding".into(),
            });
        }

        let memory = encoder_forward(
            g,
            p,
            cfg.n_encoder_layers,
            cfg.n_heads,
            ctx_seq.tokens,
            drop,
        )?;

        let causal = AttentionMask::causal(&tgt_seq.meta, &tgt_seq.meta);
        let self_mask = if causal.all_visible() {
            None
        } else {
            Some(g.constant(causal.to_additive()))
        };
        let decoded = decoder_forward(
            g,
            p,
            cfg.n_decoder_layers,
            cfg.n_heads,
            tgt_seq.tokens,
            memory,
            self_mask,
            drop,
        )?;

        let pred = readout(g, p, cfg, decoded, &tgt_seq.meta)?;
        let pred = match &stats {
            Some(s) => revin_denormalize(g, p, pred, s)?,
            None => pred,
        };
        if !pred.is_finite() {
            return Err(ModelError::NonFiniteActivation {
                stage: "readout".into(),
            });
        }
        Ok(pred)
    }
}

impl Forecaster for LobTransformer {
    fn register_params(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
        let cfg = &self.cfg;
        register_embedding_params(params, &cfg.embedding_config(), rng);
        for i in 0..cfg.n_encoder_layers {
            register_encoder_layer(params, i, cfg.d_model, cfg.d_ff, rng);
        }
        for i in 0..cfg.n_decoder_layers {
            register_decoder_layer(params, i, cfg.d_model, cfg.d_ff, rng);
        }
        match cfg.embedding {
            EmbeddingMode::Temporal => {
                let n = cfg.n_variables();
                params.register_uniform("head.w", &[cfg.d_model, n], cfg.d_model, rng);
                params.register_uniform("head.b", &[n], cfg.d_model, rng);
            }
            _ => {
                params.register_uniform("head.w", &[cfg.d_model, 1], cfg.d_model, rng);
                params.register_uniform("head.b", &[1], cfg.d_model, rng);
            }
        }
        if cfg.revin {
            revin::register_revin(params, cfg.n_variables());
        }
    }

    fn predict<'g>(
        &self,
        g: &'g Graph,
        p: &Bound<'g>,
        window: &WindowPair,
    ) -> Result<Tensor<'g>, ModelError> {
        self.forward(g, p, window, &mut Dropout::Off)
    }

    fn predict_training<'g>(
        &self,
        g: &'g Graph,
        p: &Bound<'g>,
        window: &WindowPair,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<'g>, ModelError> {
        if self.cfg.dropout == 0.0 {
            self.forward(g, p, window, &mut Dropout::Off)
        } else {
            self.forward(
                g,
                p,
                window,
                &mut Dropout::On {
                    rng,
                    rate: self.cfg.dropout,
                },
            )
        }
    }
}

/// Map decoded target tokens back to the (L_t × N) value grid. Flattened
/// modes scatter one scalar per token into its (time, variable) cell;
/// temporal mode maps each step's token to all N values at once.
fn readout<'g>(
    g: &'g Graph,
    p: &Bound<'g>,
    cfg: &ModelConfig,
    decoded: Tensor<'g>,
    meta: &[TokenMeta],
) -> Result<Tensor<'g>, TensorError> {
    let _ = g;
    let l_t = cfg.target_len;
    let n = cfg.n_variables();
    let head = decoded.matmul(p.get("head.w"))?.add(p.get("head.b"))?;
    if cfg.embedding.flattened() {
        // The embedding emits target tokens time-major, which makes the
        // scatter a reshape — but verify the bijection rather than assume.
        assert_eq!(meta.len(), l_t * n, "token count mismatch");
        for (i, m) in meta.iter().enumerate() {
            let expect_step = cfg.context_len + i / n;
            assert_eq!(m.time_index, expect_step, "token {i} out of order");
            assert_eq!(m.column, Some(i % n), "token {i} scattered to wrong cell");
        }
        head.reshape(&[l_t, n])
    } else {
        assert_eq!(meta.len(), l_t, "token count mismatch");
        Ok(head)
    }
}
