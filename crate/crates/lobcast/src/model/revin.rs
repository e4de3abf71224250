//! Reversible per-window normalization.
//!
//! Each variable (column) is standardized against its own context-window
//! statistics before embedding, and predictions pass the exact inverse
//! before any loss or metric sees them. A learned per-variable affine
//! (`revin.gamma`, `revin.beta`) rides on top; at gamma = 1, beta = 0 the
//! pair is plain standardization. Statistics are function of the context
//! values only — model inputs, not parameters — so computing them outside
//! the graph loses no gradient paths, while the affine itself is applied
//! in-graph on both sides.

use crate::tensor::{Array, Bound, Graph, ParamSet, Tensor, TensorError};

/// Standard-deviation floor: constant columns normalize to zeros instead
/// of dividing by zero.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-column context mean and floored population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct RevinStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn revin_stats(context: &Array) -> RevinStats {
    let (rows, cols) = (context.rows(), context.cols());
    assert!(rows > 0, "empty context window");
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += context.at(r, c);
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    let mut var = vec![0.0; cols];
    for r in 0..rows {
        for (c, v) in var.iter_mut().enumerate() {
            let d = context.at(r, c) - mean[c];
            *v += d * d;
        }
    }
    let std = var
        .iter()
        .map(|v| (v / rows as f64).sqrt().max(STD_FLOOR))
        .collect();
    RevinStats { mean, std }
}

/// Register the learned affine at identity: gamma = 1, beta = 0.
pub fn register_revin(params: &mut ParamSet, n_variables: usize) {
    params.register("revin.gamma", Array::ones(&[n_variables]));
    params.register("revin.beta", Array::zeros(&[n_variables]));
}

/// Normalize context values in-graph: `gamma * (x - mean) / std + beta`,
/// column-wise.
pub fn revin_normalize<'g>(
    g: &'g Graph,
    p: &Bound<'g>,
    context: &Array,
    stats: &RevinStats,
) -> Result<Tensor<'g>, TensorError> {
    let n = context.cols();
    let mu = g.constant(Array::new(vec![1, n], stats.mean.clone()));
    let sigma = g.constant(Array::new(vec![1, n], stats.std.clone()));
    g.constant(context.clone())
        .sub(mu)?
        .div(sigma)?
        .mul(p.get("revin.gamma"))?
        .add(p.get("revin.beta"))
}

/// The exact inverse on predictions: `(y - beta) / gamma * std + mean`.
pub fn revin_denormalize<'g>(
    g: &'g Graph,
    p: &Bound<'g>,
    predictions: Tensor<'g>,
    stats: &RevinStats,
) -> Result<Tensor<'g>, TensorError> {
    let n = stats.mean.len();
    let mu = g.constant(Array::new(vec![1, n], stats.mean.clone()));
    let sigma = g.constant(Array::new(vec![1, n], stats.std.clone()));
    predictions
        .sub(p.get("revin.beta"))?
        .div(p.get("revin.gamma"))?
        .mul(sigma)?
        .add(mu)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn context() -> Array {
        Array::from_rows(&[
            vec![1.0, 10.0, 5.0],
            vec![2.0, 10.0, 7.0],
            vec![3.0, 10.0, 3.0],
            vec![6.0, 10.0, 5.0],
        ])
    }

    #[test]
    fn stats_use_population_variance_with_floor() {
        let s = revin_stats(&context());
        assert_eq!(s.mean, vec![3.0, 10.0, 5.0]);
        // Column 0: deviations -2,-1,0,3 → var 14/4.
        assert!((s.std[0] - (14.0 / 4.0_f64).sqrt()).abs() < 1e-12);
        // Constant column floors.
        assert_eq!(s.std[1], STD_FLOOR);
    }

    #[test]
    fn round_trip_is_tight_at_identity_affine() {
        let ctx = context();
        let stats = revin_stats(&ctx);
        let mut params = ParamSet::new();
        register_revin(&mut params, 3);
        let g = Graph::new();
        let bound = params.bind(&g);
        let normed = revin_normalize(&g, &bound, &ctx, &stats).unwrap();
        let back = revin_denormalize(&g, &bound, normed, &stats)
            .unwrap()
            .value();
        for r in 0..4 {
            for c in 0..3 {
                assert!((back.at(r, c) - ctx.at(r, c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_columns_normalize_to_zero() {
        let ctx = context();
        let stats = revin_stats(&ctx);
        let mut params = ParamSet::new();
        register_revin(&mut params, 3);
        let g = Graph::new();
        let bound = params.bind(&g);
        let normed = revin_normalize(&g, &bound, &ctx, &stats).unwrap().value();
        for r in 0..4 {
            assert_eq!(normed.at(r, 1), 0.0);
        }
    }

    #[test]
    fn affine_is_inverted_exactly() {
        let ctx = context();
        let stats = revin_stats(&ctx);
        let mut params = ParamSet::new();
        register_revin(&mut params, 3);
        params
            .get_mut("revin.gamma")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[2.0, -0.5, 1.5]);
        params
            .get_mut("revin.beta")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.1, 0.0, -3.0]);
        let g = Graph::new();
        let bound = params.bind(&g);
        let normed = revin_normalize(&g, &bound, &ctx, &stats).unwrap();
        let back = revin_denormalize(&g, &bound, normed, &stats)
            .unwrap()
            .value();
        for r in 0..4 {
            for c in 0..3 {
                assert!((back.at(r, c) - ctx.at(r, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gradients_flow_to_the_affine_through_both_sides() {
        let ctx = context();
        let stats = revin_stats(&ctx);
        let mut params = ParamSet::new();
        register_revin(&mut params, 3);
        let g = Graph::new();
        let bound = params.bind(&g);
        let normed = revin_normalize(&g, &bound, &ctx, &stats).unwrap();
        let back = revin_denormalize(&g, &bound, normed, &stats).unwrap();
        g.backward(back.mul(back).unwrap().mean_all()).unwrap();
        let ggrad = bound.get("revin.gamma").grad().unwrap();
        let bgrad = bound.get("revin.beta").grad().unwrap();
        // Round-tripping the same values cancels the affine's effect on
        // the output, but each side still contributes opposing gradient
        // terms; at identity they cancel exactly.
        assert_eq!(ggrad.numel(), 3);
        assert_eq!(bgrad.numel(), 3);
        for v in ggrad.data().iter().chain(bgrad.data()) {
            assert!(v.abs() < 1e-9);
        }
    }
}
