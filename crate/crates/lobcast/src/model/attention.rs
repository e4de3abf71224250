//! Scaled dot-product attention, its multi-head wrapper, and visibility
//! masks.

use crate::embedding::TokenMeta;
use crate::tensor::{concat, Array, Bound, Tensor, TensorError};

/// Additive logit for hidden positions. Finite on purpose: a true -inf
/// can turn into NaN inside softmax when a whole row is hidden, while
/// exp(-1e30 - max) underflows to an exact zero weight.
pub const MASK_FILL: f64 = -1e30;

/// Boolean visibility over (query, key) pairs: `true` means the query may
/// attend to the key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    l_q: usize,
    l_k: usize,
    visible: Vec<bool>,
}

impl AttentionMask {
    pub fn new(l_q: usize, l_k: usize, rule: impl Fn(usize, usize) -> bool) -> Self {
        let mut visible = Vec::with_capacity(l_q * l_k);
        for i in 0..l_q {
            for j in 0..l_k {
                visible.push(rule(i, j));
            }
        }
        AttentionMask { l_q, l_k, visible }
    }

    /// The decoder's rule: a token sees exactly the keys whose time index
    /// does not exceed its own. Tokens sharing a time step see each other,
    /// since a book snapshot's values arrive together.
    pub fn causal(queries: &[TokenMeta], keys: &[TokenMeta]) -> Self {
        AttentionMask::new(queries.len(), keys.len(), |i, j| {
            keys[j].time_index <= queries[i].time_index
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.l_q, self.l_k)
    }

    pub fn visible(&self, i: usize, j: usize) -> bool {
        self.visible[i * self.l_k + j]
    }

    pub fn all_visible(&self) -> bool {
        self.visible.iter().all(|&v| v)
    }

    /// The mask as additive logits: 0 where visible, [`MASK_FILL`] where
    /// hidden.
    pub fn to_additive(&self) -> Array {
        let data = self
            .visible
            .iter()
            .map(|&v| if v { 0.0 } else { MASK_FILL })
            .collect();
        Array::new(vec![self.l_q, self.l_k], data)
    }
}

/// softmax(q kᵀ / sqrt(width)) v over row-token matrices, with an optional
/// additive mask on the logits.
pub fn scaled_dot_attention<'g>(
    q: Tensor<'g>,
    k: Tensor<'g>,
    v: Tensor<'g>,
    additive_mask: Option<Tensor<'g>>,
) -> Result<Tensor<'g>, TensorError> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(TensorError::ShapeMismatch {
            op: "attention q/k",
            lhs: qs,
            rhs: ks,
        });
    }
    if vs.len() != 2 || vs[0] != ks[0] {
        return Err(TensorError::ShapeMismatch {
            op: "attention k/v",
            lhs: ks,
            rhs: vs,
        });
    }
    let mut scores = q.matmul(k.t())?.scale(1.0 / (qs[1] as f64).sqrt());
    if let Some(mask) = additive_mask {
        if mask.shape() != vec![qs[0], ks[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "attention mask",
                lhs: vec![qs[0], ks[0]],
                rhs: mask.shape(),
            });
        }
        scores = scores.add(mask)?;
    }
    scores.softmax(1).matmul(v)
}

/// Multi-head attention under a parameter prefix holding four square
/// projection matrices `{prefix}.q`, `.k`, `.v`, `.o` (no biases). Queries
/// come from `query_src`; keys and values from `memory` (equal to
/// `query_src` for self-attention). Heads split the model width evenly,
/// each scaled by its own sqrt(d_head).
pub fn multi_head_attention<'g>(
    p: &Bound<'g>,
    prefix: &str,
    n_heads: usize,
    query_src: Tensor<'g>,
    memory: Tensor<'g>,
    additive_mask: Option<Tensor<'g>>,
) -> Result<Tensor<'g>, TensorError> {
    let q = query_src.matmul(p.get(&format!("{prefix}.q")))?;
    let k = memory.matmul(p.get(&format!("{prefix}.k")))?;
    let v = memory.matmul(p.get(&format!("{prefix}.v")))?;
    let d = q.shape()[1];
    assert!(
        n_heads >= 1 && d % n_heads == 0,
        "width {d} not divisible into {n_heads} heads"
    );
    let d_head = d / n_heads;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let slice = |t: Tensor<'g>| t.narrow(1, h * d_head, d_head);
        heads.push(scaled_dot_attention(
            slice(q),
            slice(k),
            slice(v),
            additive_mask,
        )?);
    }
    concat(&heads, 1)?.matmul(p.get(&format!("{prefix}.o")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, ParamSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_hand_computed_two_by_two() {
        // Oracle computed with plain f64 arithmetic, independent of the
        // graph ops.
        let q = [[1.0, 2.0], [0.5, -1.0]];
        let k = [[0.3, 0.7], [-0.2, 0.4]];
        let v = [[1.0, 0.0], [0.0, 1.0]];
        let scale = 1.0 / 2.0_f64.sqrt();
        let mut expect = [[0.0; 2]; 2];
        for i in 0..2 {
            let s0 = (q[i][0] * k[0][0] + q[i][1] * k[0][1]) * scale;
            let s1 = (q[i][0] * k[1][0] + q[i][1] * k[1][1]) * scale;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let z = e0 + e1;
            for j in 0..2 {
                expect[i][j] = (e0 / z) * v[0][j] + (e1 / z) * v[1][j];
            }
        }
        let g = Graph::new();
        let gq = g.constant(Array::from_rows(&[q[0].to_vec(), q[1].to_vec()]));
        let gk = g.constant(Array::from_rows(&[k[0].to_vec(), k[1].to_vec()]));
        let gv = g.constant(Array::from_rows(&[v[0].to_vec(), v[1].to_vec()]));
        let out = scaled_dot_attention(gq, gk, gv, None).unwrap().value();
        for i in 0..2 {
            for j in 0..2 {
                assert!((out.at(i, j) - expect[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_keys_average_the_values() {
        let g = Graph::new();
        let q = g.constant(Array::new(vec![1, 3], vec![0.2, -1.0, 4.0]));
        let k = g.constant(Array::new(vec![4, 3], vec![0.5; 12]));
        let v = g.constant(Array::new(
            vec![4, 2],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        ));
        let out = scaled_dot_attention(q, k, v, None).unwrap().value();
        assert!((out.at(0, 0) - 4.0).abs() < 1e-12);
        assert!((out.at(0, 1) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn one_hot_mask_selects_a_single_value_row() {
        let g = Graph::new();
        let q = g.constant(Array::new(vec![1, 2], vec![3.0, -2.0]));
        let k = g.constant(Array::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]));
        let v = g.constant(Array::new(vec![3, 2], vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0]));
        for j in 0..3 {
            let mask = AttentionMask::new(1, 3, |_, key| key == j);
            let masked = g.constant(mask.to_additive());
            let out = scaled_dot_attention(q, k, v, Some(masked)).unwrap().value();
            assert!((out.at(0, 0) - v.value().at(j, 0)).abs() < 1e-9);
            assert!((out.at(0, 1) - v.value().at(j, 1)).abs() < 1e-9);
        }
    }

    #[test]
    fn causal_mask_blocks_later_steps_and_allows_same_step() {
        let meta: Vec<TokenMeta> = [0, 0, 1, 1]
            .iter()
            .map(|&s| TokenMeta {
                time_index: s,
                column: Some(0),
                given: false,
            })
            .collect();
        let mask = AttentionMask::causal(&meta, &meta);
        assert!(mask.visible(0, 1)); // same step
        assert!(mask.visible(3, 0)); // earlier step
        assert!(!mask.visible(0, 2)); // later step
        assert!(!mask.all_visible());
        let single: Vec<TokenMeta> = meta[..2].to_vec();
        assert!(AttentionMask::causal(&single, &single).all_visible());
    }

    #[test]
    fn masked_keys_cannot_leak_through_their_contents() {
        // Changing a hidden key/value row leaves the output bit-identical.
        let run = |hidden_row: f64| {
            let g = Graph::new();
            let q = g.constant(Array::new(vec![1, 2], vec![1.0, 1.0]));
            let k = g.constant(Array::new(vec![2, 2], vec![0.1, 0.2, hidden_row, 0.9]));
            let v = g.constant(Array::new(vec![2, 2], vec![1.0, 2.0, hidden_row, -5.0]));
            let mask = AttentionMask::new(1, 2, |_, j| j == 0);
            scaled_dot_attention(q, k, v, Some(g.constant(mask.to_additive())))
                .unwrap()
                .value()
        };
        assert_eq!(run(0.0), run(1e6));
    }

    #[test]
    fn shape_errors_name_the_offending_pair() {
        let g = Graph::new();
        let q = g.constant(Array::zeros(&[2, 3]));
        let k = g.constant(Array::zeros(&[2, 4]));
        let v = g.constant(Array::zeros(&[2, 4]));
        match scaled_dot_attention(q, k, v, None).err() {
            Some(TensorError::ShapeMismatch { op, .. }) => assert_eq!(op, "attention q/k"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        let k2 = g.constant(Array::zeros(&[2, 3]));
        let v2 = g.constant(Array::zeros(&[3, 4]));
        assert!(scaled_dot_attention(q, k2, v2, None).is_err());
    }

    #[test]
    fn heads_partition_the_width() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for leaf in ["q", "k", "v", "o"] {
            params.register_uniform(&format!("blk.{leaf}"), &[6, 6], 6, &mut rng);
        }
        let g = Graph::new();
        let bound = params.bind(&g);
        let x = g.constant(Array::uniform(&[5, 6], -1.0, 1.0, &mut rng));
        let out = multi_head_attention(&bound, "blk", 3, x, x, None).unwrap();
        assert_eq!(out.shape(), vec![5, 6]);
        assert!(out.is_finite());
        // 1 head vs 3 heads genuinely differ (the split matters).
        let g2 = Graph::new();
        let bound2 = params.bind(&g2);
        let x2 = g2.constant(x.value());
        let out1 = multi_head_attention(&bound2, "blk", 1, x2, x2, None).unwrap();
        assert_ne!(out.value(), out1.value());
    }
}
