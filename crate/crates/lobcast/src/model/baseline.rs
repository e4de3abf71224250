//! Linear autoregressive baseline.
//!
//! For horizon `h` and variable `n`:
//!
//! ```text
//! prediction[h, n] = sum over lags l of a[h, l] * context[L_c - l, n] + b[h, n]
//! ```
//!
//! (1-based lags: lag 1 is the most recent context row.) The lag weights
//! `baseline.a` are shared across variables; the bias `baseline.b` is per
//! (horizon, variable). It trains through the same loop and losses as the
//! attention model, which is exactly the point of keeping it behind the
//! same interface.

use rand_chacha::ChaCha8Rng;

use super::{Forecaster, ModelError};
use crate::data::WindowPair;
use crate::tensor::{Array, Bound, Graph, ParamSet, Tensor};

#[derive(Debug, Clone)]
pub struct LinearBaseline {
    pub context_len: usize,
    pub target_len: usize,
    pub n_variables: usize,
}

impl LinearBaseline {
    pub fn new(context_len: usize, target_len: usize, n_variables: usize) -> Self {
        assert!(context_len >= 1 && target_len >= 1 && n_variables >= 1);
        LinearBaseline {
            context_len,
            target_len,
            n_variables,
        }
    }

    /// Overwrite the weights with the persistence forecast: lag-1 weight
    /// one, everything else zero. Useful as a sanity anchor.
    pub fn set_persistence(&self, params: &mut ParamSet) {
        let a = params.get_mut("baseline.a").expect("baseline registered");
        for v in a.data_mut() {
            *v = 0.0;
        }
        for h in 0..self.target_len {
            a.set(h, 0, 1.0);
        }
        let b = params.get_mut("baseline.b").expect("baseline registered");
        for v in b.data_mut() {
            *v = 0.0;
        }
    }
}

impl Forecaster for LinearBaseline {
    fn register_params(&self, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
        params.register_uniform(
            "baseline.a",
            &[self.target_len, self.context_len],
            self.context_len,
            rng,
        );
        params.register("baseline.b", Array::zeros(&[self.target_len, self.n_variables]));
    }

    fn predict<'g>(
        &self,
        g: &'g Graph,
        p: &Bound<'g>,
        window: &WindowPair,
    ) -> Result<Tensor<'g>, ModelError> {
        assert_eq!(window.context_len(), self.context_len, "window length mismatch");
        assert_eq!(window.n_variables(), self.n_variables, "variable count mismatch");
        let ctx = g.constant(window.context.clone());
        // Row l of the flipped context is the lag-(l+1) snapshot, so the
        // plain product a · flipped realizes the lag sum.
        let newest_first: Vec<usize> = (0..self.context_len).rev().collect();
        let flipped = ctx.gather_rows(&newest_first)?;
        let out = p
            .get("baseline.a")
            .matmul(flipped)?
            .add(p.get("baseline.b"))?;
        Ok(out)
    }
}
