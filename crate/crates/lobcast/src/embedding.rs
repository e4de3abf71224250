//! Token embeddings: from a scaled window to the model's input sequences.
//!
//! Every token is an additive composition at width `d_model`:
//!
//! ```text
//! token = value + time + variable + given
//! ```
//!
//! - *value*: the scaled cell value through a learned projection; target
//!   tokens, whose values are unknown at prediction time, carry a learned
//!   placeholder vector instead;
//! - *time*: a Time2Vec encoding (one linear plus sinusoidal components)
//!   of the token's position, mapped to `d_model` by a learned affine;
//! - *variable*: which book variable the token carries, in one of three
//!   modes (below);
//! - *given*: a two-row lookup distinguishing context from target.
//!
//! The three variable modes trade off parameters against resolution:
//! `Temporal` packs each time step's full N-vector into one token (no
//! variable component at all); `PerVariable` gives each of the N flattened
//! variables its own embedding row; `Compound` composes a variable's
//! embedding from four small attribute tables — depth level, book side,
//! price/volume feature, and ticker — summed and scaled. The compound
//! table holds `K + 2 + 2 + T` rows instead of `N = T*2*K*2`, which is 14
//! versus 100 rows for five tickers at five levels, yet still assigns every
//! variable a distinct vector.

use rand::Rng;

use crate::data::{Feature, Side, VariableIndex, WindowPair};
use crate::tensor::{concat, Array, Bound, Graph, ParamSet, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingMode {
    Temporal,
    PerVariable,
    Compound,
}

impl EmbeddingMode {
    pub fn label(self) -> &'static str {
        match self {
            EmbeddingMode::Temporal => "temporal",
            EmbeddingMode::PerVariable => "per_variable",
            EmbeddingMode::Compound => "compound",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "temporal" => Some(EmbeddingMode::Temporal),
            "per_variable" => Some(EmbeddingMode::PerVariable),
            "compound" => Some(EmbeddingMode::Compound),
            _ => None,
        }
    }

    /// Whether this mode emits one token per (time, variable) cell.
    pub fn flattened(self) -> bool {
        !matches!(self, EmbeddingMode::Temporal)
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingConfig {
    pub d_model: usize,
    /// Time2Vec width: 1 linear + (d_time - 1) sinusoidal components.
    pub d_time: usize,
    pub mode: EmbeddingMode,
    /// Book depth K.
    pub levels: usize,
    /// Ticker count T.
    pub tickers: usize,
    /// Multiplier applied to the summed attribute embeddings in compound
    /// mode; 1/sqrt(4) keeps the sum's variance at one table's scale.
    pub compound_scale: f64,
    /// Feed absolute grid seconds to Time2Vec instead of the normalized
    /// within-window position.
    pub absolute_time: bool,
}

impl EmbeddingConfig {
    pub fn new(d_model: usize, d_time: usize, mode: EmbeddingMode, levels: usize, tickers: usize) -> Self {
        let cfg = EmbeddingConfig {
            d_model,
            d_time,
            mode,
            levels,
            tickers,
            compound_scale: 0.5,
            absolute_time: false,
        };
        cfg.assert_valid();
        cfg
    }

    pub fn assert_valid(&self) {
        assert!(self.d_time >= 2, "d_time must be at least 2");
        assert!(self.d_model >= self.d_time, "d_model must be at least d_time");
        assert!(self.levels >= 1 && self.tickers >= 1, "empty book layout");
    }

    /// Flattened variable count N.
    pub fn n_variables(&self) -> usize {
        self.tickers * 2 * self.levels * 2
    }

    /// The [`VariableIndex`] behind flat column `c`, mirroring the dataset
    /// column order.
    fn variable_of(&self, c: usize) -> VariableIndex {
        let feature = if c % 2 == 0 { Feature::Price } else { Feature::Volume };
        let rest = c / 2;
        let level = rest % self.levels + 1;
        let rest = rest / self.levels;
        let side = if rest % 2 == 0 { Side::Bid } else { Side::Ask };
        VariableIndex { ticker: rest / 2, side, level, feature }
    }
}

/// Register every embedding parameter under its stable name.
pub fn register_embedding_params<R: Rng>(
    params: &mut ParamSet,
    cfg: &EmbeddingConfig,
    rng: &mut R,
) {
    cfg.assert_valid();
    let d = cfg.d_model;
    // Time2Vec frequencies/phases, then the affine map to token width.
    params.register_uniform("embed.time.w", &[cfg.d_time], 1, rng);
    params.register_uniform("embed.time.b", &[cfg.d_time], 1, rng);
    params.register_uniform("embed.time.affine.w", &[cfg.d_time, d], cfg.d_time, rng);
    params.register_uniform("embed.time.affine.b", &[d], cfg.d_time, rng);
    match cfg.mode {
        EmbeddingMode::Temporal => {
            let n = cfg.n_variables();
            params.register_uniform("embed.value.w", &[n, d], n, rng);
        }
        _ => {
            params.register_uniform("embed.value.w", &[1, d], 1, rng);
        }
    }
    params.register_uniform("embed.value.b", &[d], 1, rng);
    params.register_uniform("embed.value.mask", &[d], 1, rng);
    params.register_uniform("embed.given", &[2, d], d, rng);
    match cfg.mode {
        EmbeddingMode::Temporal => {}
        EmbeddingMode::PerVariable => {
            params.register_uniform("embed.variable", &[cfg.n_variables(), d], d, rng);
        }
        EmbeddingMode::Compound => {
            params.register_uniform("embed.level", &[cfg.levels, d], d, rng);
            params.register_uniform("embed.side", &[2, d], d, rng);
            params.register_uniform("embed.feature", &[2, d], d, rng);
            params.register_uniform("embed.ticker", &[cfg.tickers, d], d, rng);
        }
    }
}

/// Scalars a variable-identity scheme stores, readable off the registry.
/// Compound mode: `(K + 2 + 2 + T) * d_model`; per-variable: `N * d_model`;
/// temporal: 0.
pub fn variable_embedding_param_count(params: &ParamSet) -> usize {
    const TABLES: [&str; 5] = [
        "embed.level",
        "embed.side",
        "embed.feature",
        "embed.ticker",
        "embed.variable",
    ];
    params
        .iter()
        .filter(|(name, _)| TABLES.contains(name))
        .map(|(_, a)| a.numel())
        .sum()
}

/// Per-token bookkeeping the model needs for masking and readout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenMeta {
    /// Position within the whole window: context steps first, then target
    /// steps, `0 .. L_c + L_t`.
    pub time_index: usize,
    /// The variable this token carries; `None` in temporal mode where one
    /// token spans all N variables.
    pub column: Option<usize>,
    /// True for context tokens.
    pub given: bool,
}

/// A token matrix plus its per-row metadata.
pub struct TokenSequence<'g> {
    /// `(token count, d_model)`.
    pub tokens: Tensor<'g>,
    pub meta: Vec<TokenMeta>,
}

impl<'g> TokenSequence<'g> {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }
}

/// Time2Vec over plain values, for inspection and tests: component 0 is
/// `w[0] * t + b[0]`, component `j >= 1` is `sin(w[j] * t + b[j])`.
pub fn time2vec_values(t: f64, w: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(w.len(), b.len(), "frequency/phase length mismatch");
    w.iter()
        .zip(b)
        .enumerate()
        .map(|(j, (&wj, &bj))| {
            let z = wj * t + bj;
            if j == 0 {
                z
            } else {
                z.sin()
            }
        })
        .collect()
}

/// One variable's embedding vector under the configured mode, computed
/// outside any graph. Mostly for tests and inspection; the batch path in
/// [`embed_window`] gathers the same rows in-graph.
pub fn variable_embedding(
    v: VariableIndex,
    cfg: &EmbeddingConfig,
    params: &ParamSet,
) -> Result<Vec<f64>, String> {
    if v.ticker >= cfg.tickers || v.level == 0 || v.level > cfg.levels {
        return Err(format!(
            "variable {v:?} outside a {}-ticker, {}-level book",
            cfg.tickers, cfg.levels
        ));
    }
    let d = cfg.d_model;
    let row = |name: &str, idx: usize| -> Vec<f64> {
        let table = params.get(name).expect("embedding table registered");
        table.row(idx).to_vec()
    };
    match cfg.mode {
        EmbeddingMode::Temporal => Err("temporal mode has no per-variable embedding".to_string()),
        EmbeddingMode::PerVariable => {
            let col = column_of(v, cfg.levels);
            Ok(row("embed.variable", col))
        }
        EmbeddingMode::Compound => {
            let side_idx = match v.side {
                Side::Bid => 0,
                Side::Ask => 1,
            };
            let feature_idx = match v.feature {
                Feature::Price => 0,
                Feature::Volume => 1,
            };
            let mut out = vec![0.0; d];
            for source in [
                row("embed.level", v.level - 1),
                row("embed.side", side_idx),
                row("embed.feature", feature_idx),
                row("embed.ticker", v.ticker),
            ] {
                for (o, s) in out.iter_mut().zip(&source) {
                    *o += s;
                }
            }
            for o in &mut out {
                *o *= cfg.compound_scale;
            }
            Ok(out)
        }
    }
}

fn column_of(v: VariableIndex, levels: usize) -> usize {
    let side = match v.side {
        Side::Bid => 0,
        Side::Ask => 1,
    };
    let feature = match v.feature {
        Feature::Price => 0,
        Feature::Volume => 1,
    };
    ((v.ticker * 2 + side) * levels + (v.level - 1)) * 2 + feature
}

/// Embed a scaled window into context and target token sequences. Target
/// tokens get the learned placeholder in place of their (unknown) values.
pub fn embed_window<'g>(
    g: &'g Graph,
    p: &Bound<'g>,
    cfg: &EmbeddingConfig,
    window: &WindowPair,
) -> Result<(TokenSequence<'g>, TokenSequence<'g>), TensorError> {
    let ctx_values = g.constant(window.context.clone());
    embed_window_with(g, p, cfg, window, ctx_values)
}

/// Like [`embed_window`], but with the context values supplied as a graph
/// tensor, so upstream differentiable preprocessing (window normalization
/// with learned affines, say) stays on the gradient path.
pub fn embed_window_with<'g>(
    g: &'g Graph,
    p: &Bound<'g>,
    cfg: &EmbeddingConfig,
    window: &WindowPair,
    ctx_values: Tensor<'g>,
) -> Result<(TokenSequence<'g>, TokenSequence<'g>), TensorError> {
    cfg.assert_valid();
    let n = window.n_variables();
    assert_eq!(n, cfg.n_variables(), "window width disagrees with config");
    assert_eq!(
        ctx_values.shape(),
        vec![window.context_len(), n],
        "context values must match the window"
    );
    let l_c = window.context_len();
    let l_t = window.target_len();
    let total = l_c + l_t;

    // One Time2Vec row per window step, shared by every token at that step.
    let step_time = |s: usize| -> f64 {
        if cfg.absolute_time {
            if s < l_c {
                window.context_times[s]
            } else {
                window.target_times[s - l_c]
            }
        } else {
            s as f64 / total as f64
        }
    };
    let times: Vec<f64> = (0..total).map(step_time).collect();
    let time_rows = time2vec_rows(g, p, &times)?; // (total, d_model)

    let ctx = embed_block(g, p, cfg, ctx_values, &time_rows, 0, l_c, true)?;
    let tgt = embed_block(g, p, cfg, ctx_values, &time_rows, l_c, l_t, false)?;
    Ok((ctx, tgt))
}

/// Time2Vec for a batch of scalar times, already mapped to token width:
/// `(len, d_model)`.
fn time2vec_rows<'g>(
    g: &'g Graph,
    p: &Bound<'g>,
    times: &[f64],
) -> Result<Tensor<'g>, TensorError> {
    let d_time = p.get("embed.time.w").numel();
    let t = g.constant(Array::new(vec![times.len(), 1], times.to_vec()));
    let w = p.get("embed.time.w").reshape(&[1, d_time])?;
    let b = p.get("embed.time.b").reshape(&[1, d_time])?;
    let z = t.matmul(w)?.add(b)?; // (len, d_time), row = w*t + b
    let linear = z.narrow(1, 0, 1);
    let periodic = z.narrow(1, 1, d_time - 1).sin();
    let features = concat(&[linear, periodic], 1)?;
    features
        .matmul(p.get("embed.time.affine.w"))?
        .add(p.get("embed.time.affine.b"))
}

/// Embed `len` consecutive window steps starting at global step `start`.
/// Target blocks never read values — their tokens carry the placeholder —
/// so `ctx_values` only feeds the `given` branch.
fn embed_block<'g>(
    g: &'g Graph,
    p: &Bound<'g>,
    cfg: &EmbeddingConfig,
    ctx_values: Tensor<'g>,
    time_rows: &Tensor<'g>,
    start: usize,
    len: usize,
    given: bool,
) -> Result<TokenSequence<'g>, TensorError> {
    let n = cfg.n_variables();
    let d = cfg.d_model;
    let given_row = p.get("embed.given").narrow(0, usize::from(!given), 1);

    if !cfg.mode.flattened() {
        // One token per step; values projected jointly through (N, d).
        let value_part = if given {
            ctx_values
                .matmul(p.get("embed.value.w"))?
                .add(p.get("embed.value.b"))?
        } else {
            // Placeholder broadcast over all target steps.
            let zeros = g.constant(Array::zeros(&[len, d]));
            zeros.add(p.get("embed.value.mask").reshape(&[1, d])?)?
        };
        let time_part = time_rows.narrow(0, start, len);
        let tokens = value_part.add(time_part)?.add(given_row)?;
        let meta = (0..len)
            .map(|s| TokenMeta {
                time_index: start + s,
                column: None,
                given,
            })
            .collect();
        return Ok(TokenSequence { tokens, meta });
    }

    // Flattened modes: one token per cell, time-major (step s, column c)
    // at row s*N + c.
    let count = len * n;
    let value_part = if given {
        let flat = ctx_values.reshape(&[count, 1])?;
        flat.matmul(p.get("embed.value.w"))?
            .add(p.get("embed.value.b"))?
    } else {
        let zeros = g.constant(Array::zeros(&[count, d]));
        zeros.add(p.get("embed.value.mask").reshape(&[1, d])?)?
    };

    let step_indices: Vec<usize> = (0..count).map(|i| start + i / n).collect();
    let time_part = time_rows.gather_rows(&step_indices)?;

    let variable_part = match cfg.mode {
        EmbeddingMode::Temporal => unreachable!("handled above"),
        EmbeddingMode::PerVariable => {
            let idx: Vec<usize> = (0..count).map(|i| i % n).collect();
            p.get("embed.variable").gather_rows(&idx)?
        }
        EmbeddingMode::Compound => {
            let mut level_idx = Vec::with_capacity(count);
            let mut side_idx = Vec::with_capacity(count);
            let mut feature_idx = Vec::with_capacity(count);
            let mut ticker_idx = Vec::with_capacity(count);
            for i in 0..count {
                let v = cfg.variable_of(i % n);
                level_idx.push(v.level - 1);
                side_idx.push(match v.side {
                    Side::Bid => 0,
                    Side::Ask => 1,
                });
                feature_idx.push(match v.feature {
                    Feature::Price => 0,
                    Feature::Volume => 1,
                });
                ticker_idx.push(v.ticker);
            }
            p.get("embed.level")
                .gather_rows(&level_idx)?
                .add(p.get("embed.side").gather_rows(&side_idx)?)?
                .add(p.get("embed.feature").gather_rows(&feature_idx)?)?
                .add(p.get("embed.ticker").gather_rows(&ticker_idx)?)?
                .scale(cfg.compound_scale)
        }
    };

    let tokens = value_part
        .add(time_part)?
        .add(variable_part)?
        .add(given_row)?;
    let meta = (0..count)
        .map(|i| TokenMeta {
            time_index: start + i / n,
            column: Some(i % n),
            given,
        })
        .collect();
    Ok(TokenSequence { tokens, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_window(l_c: usize, l_t: usize, n: usize) -> WindowPair {
        let cell = |r: usize, c: usize| (r * n + c) as f64 / 100.0;
        let ctx = Array::new(
            vec![l_c, n],
            (0..l_c * n).map(|i| cell(i / n, i % n)).collect(),
        );
        let tgt = Array::new(
            vec![l_t, n],
            (0..l_t * n).map(|i| 1.0 + cell(i / n, i % n)).collect(),
        );
        WindowPair {
            split: Split::Train,
            context: ctx.clone(),
            target: tgt.clone(),
            raw_context: ctx,
            raw_target: tgt,
            anchor: vec![1.0; n],
            context_times: (0..l_c).map(|i| i as f64 * 5.0).collect(),
            target_times: (0..l_t).map(|i| (l_c + i) as f64 * 5.0).collect(),
        }
    }

    fn setup(mode: EmbeddingMode) -> (EmbeddingConfig, ParamSet) {
        // N = 1 ticker * 2 sides * 1 level * 2 features... too small for
        // interesting tests; use levels so N matches the toy window.
        let cfg = EmbeddingConfig::new(8, 3, mode, 1, 1); // N = 4
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        register_embedding_params(&mut params, &cfg, &mut rng);
        (cfg, params)
    }

    #[test]
    fn time2vec_zero_params_and_ranges() {
        assert_eq!(time2vec_values(3.7, &[0.0; 4], &[0.0; 4]), vec![0.0; 4]);
        let w = [0.5, 1.0, -2.0];
        let b = [0.25, 0.0, 1.0];
        let v1 = time2vec_values(1.0, &w, &b);
        let v2 = time2vec_values(2.0, &w, &b);
        // Linear component: doubling t doubles (component - b0).
        assert!(((v2[0] - b[0]) - 2.0 * (v1[0] - b[0])).abs() < 1e-15);
        for t in [0.0, 0.3, 11.0, -4.0] {
            for (j, v) in time2vec_values(t, &w, &b).iter().enumerate() {
                if j > 0 {
                    assert!((-1.0..=1.0).contains(v));
                }
            }
        }
    }

    #[test]
    fn token_counts_per_mode() {
        let window = toy_window(2, 1, 4);
        for (mode, ctx_expect, tgt_expect) in [
            (EmbeddingMode::Compound, 8, 4),
            (EmbeddingMode::PerVariable, 8, 4),
            (EmbeddingMode::Temporal, 2, 1),
        ] {
            let (cfg, params) = setup(mode);
            let g = Graph::new();
            let bound = params.bind(&g);
            let (ctx, tgt) = embed_window(&g, &bound, &cfg, &window).unwrap();
            assert_eq!(ctx.len(), ctx_expect, "{mode:?}");
            assert_eq!(tgt.len(), tgt_expect, "{mode:?}");
            assert_eq!(ctx.tokens.shape(), vec![ctx_expect, 8]);
            assert_eq!(tgt.tokens.shape(), vec![tgt_expect, 8]);
            // Metadata walks time-major and tags given-ness.
            assert!(ctx.meta.iter().all(|m| m.given));
            assert!(tgt.meta.iter().all(|m| !m.given));
            assert_eq!(ctx.meta[0].time_index, 0);
            assert_eq!(tgt.meta[0].time_index, 2);
        }
    }

    #[test]
    fn compound_difference_is_scaled_level_row_difference() {
        let cfg = EmbeddingConfig::new(16, 4, EmbeddingMode::Compound, 3, 2);
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        register_embedding_params(&mut params, &cfg, &mut rng);
        let base = VariableIndex {
            ticker: 1,
            side: Side::Ask,
            level: 1,
            feature: Feature::Volume,
        };
        let other = VariableIndex { level: 3, ..base };
        let e1 = variable_embedding(base, &cfg, &params).unwrap();
        let e2 = variable_embedding(other, &cfg, &params).unwrap();
        let table = params.get("embed.level").unwrap();
        for j in 0..cfg.d_model {
            let expect = (table.at(0, j) - table.at(2, j)) * cfg.compound_scale;
            assert_eq!(e1[j] - e2[j], expect);
        }
    }

    #[test]
    fn unknown_variable_is_an_error() {
        let (cfg, params) = setup(EmbeddingMode::Compound);
        let bad = VariableIndex {
            ticker: 9,
            side: Side::Bid,
            level: 1,
            feature: Feature::Price,
        };
        assert!(variable_embedding(bad, &cfg, &params).is_err());
    }

    #[test]
    fn parameter_economy_counts() {
        // T = 5, K = 5: N = 100. Compound stores 14 rows, per-variable 100.
        for (mode, rows) in [
            (EmbeddingMode::Compound, 14),
            (EmbeddingMode::PerVariable, 100),
            (EmbeddingMode::Temporal, 0),
        ] {
            let cfg = EmbeddingConfig::new(16, 4, mode, 5, 5);
            let mut params = ParamSet::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            register_embedding_params(&mut params, &cfg, &mut rng);
            assert_eq!(
                variable_embedding_param_count(&params),
                rows * cfg.d_model,
                "{mode:?}"
            );
        }
    }

    #[test]
    fn gradient_reaches_only_referenced_attribute_rows() {
        let (cfg, params) = setup(EmbeddingMode::Compound);
        let window = toy_window(2, 1, 4);
        let g = Graph::new();
        let bound = params.bind(&g);
        let (ctx, _) = embed_window(&g, &bound, &cfg, &window).unwrap();
        // Column 3 of a 1-ticker, 1-level book is (bid... ) — column 3 =
        // ask volume; its token at step 0 sits at row 0*4 + 3.
        let single = ctx.tokens.narrow(0, 3, 1);
        g.backward(single.sum_all()).unwrap();
        let level_grad = bound.get("embed.level").grad().unwrap();
        assert!(level_grad.data().iter().all(|&v| v != 0.0)); // only level row 0 exists (K=1)
        let side_grad = bound.get("embed.side").grad().unwrap();
        // Ask row touched, bid row untouched.
        assert!(side_grad.row(1).iter().all(|&v| v != 0.0));
        assert!(side_grad.row(0).iter().all(|&v| v == 0.0));
        let feature_grad = bound.get("embed.feature").grad().unwrap();
        assert!(feature_grad.row(1).iter().all(|&v| v != 0.0)); // volume
        assert!(feature_grad.row(0).iter().all(|&v| v == 0.0)); // price
    }

    #[test]
    fn zeroed_tables_leave_only_the_value_component() {
        let (cfg, mut params) = setup(EmbeddingMode::PerVariable);
        // Zero everything except the value projection, which becomes
        // "copy the value into lane 0".
        for name in [
            "embed.time.w",
            "embed.time.b",
            "embed.time.affine.w",
            "embed.time.affine.b",
            "embed.value.b",
            "embed.variable",
            "embed.given",
        ] {
            let a = params.get_mut(name).unwrap();
            for v in a.data_mut() {
                *v = 0.0;
            }
        }
        let w = params.get_mut("embed.value.w").unwrap();
        for v in w.data_mut() {
            *v = 0.0;
        }
        w.set(0, 0, 1.0);
        let window = toy_window(2, 1, 4);
        let g = Graph::new();
        let bound = params.bind(&g);
        let (ctx, _) = embed_window(&g, &bound, &cfg, &window).unwrap();
        let toks = ctx.tokens.value();
        for (i, meta) in ctx.meta.iter().enumerate() {
            let expect = window.context.at(meta.time_index, meta.column.unwrap());
            assert_eq!(toks.at(i, 0), expect);
            for j in 1..cfg.d_model {
                assert_eq!(toks.at(i, j), 0.0);
            }
        }
    }
}
