//! Residual transformer blocks: layer normalization, position-wise
//! feed-forward maps, and the encoder/decoder stacks built from them.
//!
//! Blocks are post-norm: `LayerNorm(x + Sublayer(x))`. Parameters live in
//! a flat registry under dotted prefixes (`enc.0.attn.q`, `dec.1.norm.3.g`,
//! ...), so a stack is defined entirely by its prefix and layer count.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::attention::multi_head_attention;
use super::ModelError;
use crate::tensor::{Array, Bound, Graph, ParamSet, Tensor, TensorError};

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Optional inverted dropout, applied to sublayer outputs before their
/// residual add. `Off` draws nothing from any RNG, so disabled training
/// and evaluation walk identical code paths.
pub enum Dropout<'r> {
    Off,
    On { rng: &'r mut ChaCha8Rng, rate: f64 },
}

impl Dropout<'_> {
    fn apply<'g>(&mut self, g: &'g Graph, t: Tensor<'g>) -> Tensor<'g> {
        match self {
            Dropout::Off => t,
            Dropout::On { rng, rate } => {
                let keep = 1.0 - *rate;
                let shape = t.shape();
                let mask: Vec<f64> = (0..t.numel())
                    .map(|_| {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                t.mul(g.constant(Array::new(shape, mask)))
                    .expect("dropout mask shares the activation's shape")
            }
        }
    }
}

/// Register a multi-head attention block's four projection matrices.
pub fn register_attention<R: Rng>(params: &mut ParamSet, prefix: &str, d_model: usize, rng: &mut R) {
    for leaf in ["q", "k", "v", "o"] {
        params.register_uniform(&format!("{prefix}.{leaf}"), &[d_model, d_model], d_model, rng);
    }
}

/// Register a two-map feed-forward block `{prefix}.1.{w,b}`, `{prefix}.2.{w,b}`.
pub fn register_feed_forward<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    d_model: usize,
    d_ff: usize,
    rng: &mut R,
) {
    params.register_uniform(&format!("{prefix}.1.w"), &[d_model, d_ff], d_model, rng);
    params.register_uniform(&format!("{prefix}.1.b"), &[d_ff], d_model, rng);
    params.register_uniform(&format!("{prefix}.2.w"), &[d_ff, d_model], d_ff, rng);
    params.register_uniform(&format!("{prefix}.2.b"), &[d_model], d_ff, rng);
}

/// Register layer-norm gain (init 1) and offset (init 0) as `{prefix}.{g,b}`.
pub fn register_layer_norm(params: &mut ParamSet, prefix: &str, d_model: usize) {
    params.register(&format!("{prefix}.g"), Array::ones(&[d_model]));
    params.register(&format!("{prefix}.b"), Array::zeros(&[d_model]));
}

/// Normalize each token row to zero mean and unit variance over the model
/// width, then apply the learned gain and offset.
pub fn layer_norm<'g>(
    g: &'g Graph,
    p: &Bound<'g>,
    prefix: &str,
    x: Tensor<'g>,
) -> Result<Tensor<'g>, TensorError> {
    let rows = x.shape()[0];
    let mu = x.mean(1).reshape(&[rows, 1])?;
    let centered = x.sub(mu)?;
    let var = centered.mul(centered)?.mean(1).reshape(&[rows, 1])?;
    let denom = var
        .add(g.constant(Array::full(&[rows, 1], LAYER_NORM_EPS)))?
        .sqrt();
    centered
        .div(denom)?
        .mul(p.get(&format!("{prefix}.g")))?
        .add(p.get(&format!("{prefix}.b")))
}

/// Token-wise two-layer map with a ReLU between.
pub fn feed_forward<'g>(
    p: &Bound<'g>,
    prefix: &str,
    x: Tensor<'g>,
) -> Result<Tensor<'g>, TensorError> {
    x.matmul(p.get(&format!("{prefix}.1.w")))?
        .add(p.get(&format!("{prefix}.1.b")))?
        .relu()
        .matmul(p.get(&format!("{prefix}.2.w")))?
        .add(p.get(&format!("{prefix}.2.b")))
}

/// Register one encoder layer under `enc.{i}`.
pub fn register_encoder_layer<R: Rng>(
    params: &mut ParamSet,
    i: usize,
    d_model: usize,
    d_ff: usize,
    rng: &mut R,
) {
    register_attention(params, &format!("enc.{i}.attn"), d_model, rng);
    register_feed_forward(params, &format!("enc.{i}.ff"), d_model, d_ff, rng);
    register_layer_norm(params, &format!("enc.{i}.norm.1"), d_model);
    register_layer_norm(params, &format!("enc.{i}.norm.2"), d_model);
}

/// Register one decoder layer under `dec.{i}` (self-attention, cross
/// attention, feed-forward, three norms).
pub fn register_decoder_layer<R: Rng>(
    params: &mut ParamSet,
    i: usize,
    d_model: usize,
    d_ff: usize,
    rng: &mut R,
) {
    register_attention(params, &format!("dec.{i}.attn"), d_model, rng);
    register_attention(params, &format!("dec.{i}.cross"), d_model, rng);
    register_feed_forward(params, &format!("dec.{i}.ff"), d_model, d_ff, rng);
    for norm in 1..=3 {
        register_layer_norm(params, &format!("dec.{i}.norm.{norm}"), d_model);
    }
}

/// Run the encoder stack: unmasked self-attention per layer. Zero layers
/// is the identity.
pub fn encoder_forward<'g>(
    g: &'g Graph,
    p: &Bound<'g>,
    n_layers: usize,
    n_heads: usize,
    tokens: Tensor<'g>,
    drop: &mut Dropout<'_>,
) -> Result<Tensor<'g>, ModelError> {
    let mut x = tokens;
    for i in 0..n_layers {
        let a = multi_head_attention(p, &format!("enc.{i}.attn"), n_heads, x, x, None)?;
        let a = drop.apply(g, a);
        let x1 = layer_norm(g, p, &format!("enc.{i}.norm.1"), x.add(a)?)?;
        let f = feed_forward(p, &format!("enc.{i}.ff"), x1)?;
        let f = drop.apply(g, f);
        x = layer_norm(g, p, &format!("enc.{i}.norm.2"), x1.add(f)?)?;
        if !x.is_finite() {
            return Err(ModelError::NonFiniteActivation {
                stage: format!("encoder layer {i}"),
            });
        }
    }
    Ok(x)
}

/// Run the decoder stack: causally masked self-attention, unmasked cross
/// attention into `memory`, then feed-forward, each with residual and
/// norm. `self_mask` holds the additive causal mask, or `None` when every
/// position may see every other (a single-step target).
pub fn decoder_forward<'g>(
    g: &'g Graph,
    p: &Bound<'g>,
    n_layers: usize,
    n_heads: usize,
    tokens: Tensor<'g>,
    memory: Tensor<'g>,
    self_mask: Option<Tensor<'g>>,
    drop: &mut Dropout<'_>,
) -> Result<Tensor<'g>, ModelError> {
    let mut x = tokens;
    for i in 0..n_layers {
        let a = multi_head_attention(p, &format!("dec.{i}.attn"), n_heads, x, x, self_mask)?;
        let a = drop.apply(g, a);
        let x1 = layer_norm(g, p, &format!("dec.{i}.norm.1"), x.add(a)?)?;
        let c = multi_head_attention(p, &format!("dec.{i}.cross"), n_heads, x1, memory, None)?;
        let c = drop.apply(g, c);
        let x2 = layer_norm(g, p, &format!("dec.{i}.norm.2"), x1.add(c)?)?;
        let f = feed_forward(p, &format!("dec.{i}.ff"), x2)?;
        let f = drop.apply(g, f);
        x = layer_norm(g, p, &format!("dec.{i}.norm.3"), x2.add(f)?)?;
        if !x.is_finite() {
            return Err(ModelError::NonFiniteActivation {
                stage: format!("decoder layer {i}"),
            });
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::TokenMeta;
    use crate::model::attention::AttentionMask;
    use rand::SeedableRng;

    fn stack_params(enc: usize, dec: usize, d: usize, d_ff: usize, seed: u64) -> ParamSet {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..enc {
            register_encoder_layer(&mut params, i, d, d_ff, &mut rng);
        }
        for i in 0..dec {
            register_decoder_layer(&mut params, i, d, d_ff, &mut rng);
        }
        params
    }

    #[test]
    fn layer_norm_matches_hand_computation() {
        let mut params = ParamSet::new();
        register_layer_norm(&mut params, "n", 3);
        params.get_mut("n.g").unwrap().data_mut()[1] = 2.0;
        params.get_mut("n.b").unwrap().data_mut()[2] = 0.5;
        let g = Graph::new();
        let bound = params.bind(&g);
        let x = g.constant(Array::new(vec![1, 3], vec![1.0, 2.0, 3.0]));
        let out = layer_norm(&g, &bound, "n", x).unwrap().value();
        let denom = (2.0 / 3.0 + LAYER_NORM_EPS).sqrt();
        assert!((out.at(0, 0) - (-1.0 / denom)).abs() < 1e-12);
        assert!((out.at(0, 1) - 2.0 * 0.0 / denom).abs() < 1e-12);
        assert!((out.at(0, 2) - (1.0 / denom + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn zero_layers_is_identity() {
        let params = stack_params(0, 0, 4, 8, 1);
        let g = Graph::new();
        let bound = params.bind(&g);
        let x = g.constant(Array::new(vec![2, 4], (0..8).map(f64::from).collect()));
        let out = encoder_forward(&g, &bound, 0, 2, x, &mut Dropout::Off).unwrap();
        assert_eq!(out.value(), x.value());
    }

    #[test]
    fn encoder_keeps_shape_for_any_layer_count() {
        for layers in [1, 2, 3] {
            let params = stack_params(layers, 0, 6, 12, 3);
            let g = Graph::new();
            let bound = params.bind(&g);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let x = g.constant(Array::uniform(&[7, 6], -1.0, 1.0, &mut rng));
            let out = encoder_forward(&g, &bound, layers, 3, x, &mut Dropout::Off).unwrap();
            assert_eq!(out.shape(), vec![7, 6]);
            assert!(out.is_finite());
        }
    }

    #[test]
    fn unmasked_encoder_is_permutation_equivariant() {
        // Swap two input tokens; outputs swap identically (up to float
        // summation order inside softmax).
        let params = stack_params(2, 0, 6, 12, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let base = Array::uniform(&[4, 6], -1.0, 1.0, &mut rng);
        let mut swapped_rows: Vec<Vec<f64>> = (0..4).map(|r| base.row(r).to_vec()).collect();
        swapped_rows.swap(1, 3);
        let swapped = Array::from_rows(&swapped_rows);

        let run = |input: &Array| {
            let g = Graph::new();
            let bound = params.bind(&g);
            let x = g.constant(input.clone());
            encoder_forward(&g, &bound, 2, 2, x, &mut Dropout::Off)
                .unwrap()
                .value()
        };
        let out_base = run(&base);
        let out_swapped = run(&swapped);
        for r in 0..4 {
            let source = match r {
                1 => 3,
                3 => 1,
                other => other,
            };
            for c in 0..6 {
                assert!((out_swapped.at(r, c) - out_base.at(source, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_outputs_ignore_later_time_perturbations() {
        let params = stack_params(0, 2, 6, 12, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let memory = Array::uniform(&[5, 6], -1.0, 1.0, &mut rng);
        let tokens = Array::uniform(&[4, 6], -1.0, 1.0, &mut rng);
        // Two time steps, two tokens each.
        let meta: Vec<TokenMeta> = [0, 0, 1, 1]
            .iter()
            .map(|&s| TokenMeta {
                time_index: s,
                column: Some(0),
                given: false,
            })
            .collect();
        let mask = AttentionMask::causal(&meta, &meta);

        let run = |toks: &Array| {
            let g = Graph::new();
            let bound = params.bind(&g);
            let x = g.constant(toks.clone());
            let mem = g.constant(memory.clone());
            let m = g.constant(mask.to_additive());
            decoder_forward(&g, &bound, 2, 3, x, mem, Some(m), &mut Dropout::Off)
                .unwrap()
                .value()
        };
        let base_out = run(&tokens);
        let mut poked = tokens.clone();
        poked.set(3, 2, 99.0); // a time-1 token
        let poked_out = run(&poked);
        // Time-0 rows are bitwise unchanged; the poked row moved.
        assert_eq!(base_out.row(0), poked_out.row(0));
        assert_eq!(base_out.row(1), poked_out.row(1));
        assert_ne!(base_out.row(3), poked_out.row(3));
    }

    #[test]
    fn zeroed_memory_makes_cross_attention_contribute_nothing() {
        // With all-zero memory, K and V are zero, so the cross block's
        // output is exactly zero and the residual passes x1 through.
        let mut params = stack_params(0, 1, 4, 8, 13);
        // Force the norms downstream of the cross block to identity so we
        // can observe the pass-through directly.
        for name in ["dec.0.norm.2.g", "dec.0.norm.2.b"] {
            let a = params.get_mut(name).unwrap();
            let one = name.ends_with(".g");
            for v in a.data_mut() {
                *v = if one { 1.0 } else { 0.0 };
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tokens = Array::uniform(&[3, 4], -1.0, 1.0, &mut rng);

        let g = Graph::new();
        let bound = params.bind(&g);
        let x = g.constant(tokens.clone());
        let a = multi_head_attention(&bound, "dec.0.attn", 2, x, x, None).unwrap();
        let x1 = layer_norm(&g, &bound, "dec.0.norm.1", x.add(a).unwrap()).unwrap();
        let zero_mem = g.constant(Array::zeros(&[6, 4]));
        let c = multi_head_attention(&bound, "dec.0.cross", 2, x1, zero_mem, None).unwrap();
        assert_eq!(c.value(), Array::zeros(&[3, 4]));
        let x2 = layer_norm(&g, &bound, "dec.0.norm.2", x1.add(c).unwrap()).unwrap();
        assert_eq!(x2.value(), layer_norm(&g, &bound, "dec.0.norm.2", x1).unwrap().value());
    }

    #[test]
    fn non_finite_activations_are_reported_with_their_stage() {
        let mut params = stack_params(2, 0, 4, 8, 19);
        // Poison a bias applied after the ReLU: max(0, x) would swallow a
        // NaN fed in front of it.
        params.get_mut("enc.1.ff.2.b").unwrap().data_mut()[0] = f64::NAN;
        let g = Graph::new();
        let bound = params.bind(&g);
        let x = g.constant(Array::ones(&[2, 4]));
        match encoder_forward(&g, &bound, 2, 2, x, &mut Dropout::Off).err() {
            Some(ModelError::NonFiniteActivation { stage }) => {
                assert_eq!(stage, "encoder layer 1");
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn dropout_off_and_zero_rate_share_no_randomness_cost() {
        let params = stack_params(1, 0, 4, 8, 29);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x_vals = Array::uniform(&[3, 4], -1.0, 1.0, &mut rng);

        let g = Graph::new();
        let bound = params.bind(&g);
        let x = g.constant(x_vals.clone());
        let off = encoder_forward(&g, &bound, 1, 2, x, &mut Dropout::Off)
            .unwrap()
            .value();

        // rate 0 keeps everything with weight 1/(1-0) = 1.
        let mut drop_rng = ChaCha8Rng::seed_from_u64(99);
        let g2 = Graph::new();
        let bound2 = params.bind(&g2);
        let x2 = g2.constant(x_vals);
        let on = encoder_forward(
            &g2,
            &bound2,
            1,
            2,
            x2,
            &mut Dropout::On {
                rng: &mut drop_rng,
                rate: 0.0,
            },
        )
        .unwrap()
        .value();
        assert_eq!(off, on);
    }
}
