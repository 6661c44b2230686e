//! Scaled dot-product attention over `slots ⊕ tokens`.
//!
//! Prefix slots are per-head key/value rows that are prepended to the key and
//! value sequences of a layer. They carry no positional encoding, so the
//! attention output is invariant to any permutation of the slot rows.

use prefixrep_tensor::{Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};

/// Key and value slots injected into one layer, shaped `[slots, heads, head_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPrefixSlots<T> {
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
}

impl<T: Scalar> LayerPrefixSlots<T> {
    pub fn new(keys: Tensor<T>, values: Tensor<T>) -> Result<Self> {
        if keys.shape() != values.shape() || keys.rank() != 3 {
            return Err(Error::SlotShape { got: keys.shape().to_vec(), heads: 0, head_dim: 0 });
        }
        Ok(LayerPrefixSlots { keys, values })
    }

    pub fn empty(num_heads: usize, head_dim: usize) -> Self {
        LayerPrefixSlots { keys: Tensor::zeros(&[0, num_heads, head_dim]), values: Tensor::zeros(&[0, num_heads, head_dim]) }
    }

    pub fn len(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stack slot rows of several prefixes in the given order.
    pub fn concat(parts: &[&LayerPrefixSlots<T>], num_heads: usize, head_dim: usize) -> Result<Self> {
        if parts.is_empty() {
            return Ok(Self::empty(num_heads, head_dim));
        }
        let keys: Vec<&Tensor<T>> = parts.iter().map(|p| &p.keys).collect();
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| &p.values).collect();
        Ok(LayerPrefixSlots { keys: Tensor::concat(&keys, 0)?, values: Tensor::concat(&values, 0)? })
    }

    pub fn check_shape(&self, num_heads: usize, head_dim: usize) -> Result<()> {
        let s = self.keys.shape();
        if s.len() != 3 || s[1] != num_heads || s[2] != head_dim || self.values.shape() != s {
            return Err(Error::SlotShape { got: s.to_vec(), heads: num_heads, head_dim });
        }
        Ok(())
    }

    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> Option<SlotVars> {
        if self.is_empty() {
            return None;
        }
        Some(SlotVars {
            keys: g.leaf(self.keys.clone(), trainable),
            values: g.leaf(self.values.clone(), trainable),
        })
    }

    pub fn cast<U: Scalar>(&self) -> LayerPrefixSlots<U> {
        LayerPrefixSlots { keys: self.keys.cast(), values: self.values.cast() }
    }
}

/// Graph handles for one layer's slots.
#[derive(Debug, Clone, Copy)]
pub struct SlotVars {
    pub keys: Var,
    pub values: Var,
}

/// Additive key mask `[batch, slots + tokens]`: `-inf` on padded token
/// positions and on any slot whose `slot_keep` entry is false, `0` elsewhere.
///
/// Returns `None` when nothing is masked, so unpadded batches take exactly the
/// same arithmetic path as an encoder without masking.
pub fn build_key_mask<T: Scalar>(
    lengths: &[usize],
    seq_len: usize,
    slot_count: usize,
    slot_keep: Option<&[bool]>,
) -> Option<Tensor<T>> {
    let slots_masked = slot_keep.is_some_and(|k| k.iter().any(|keep| !keep));
    let padded = lengths.iter().any(|&l| l < seq_len);
    if !slots_masked && !padded {
        return None;
    }
    let cols = slot_count + seq_len;
    let mut data = vec![T::zero(); lengths.len() * cols];
    for (row, &len) in lengths.iter().enumerate() {
        let r = &mut data[row * cols..(row + 1) * cols];
        if let Some(keep) = slot_keep {
            for (s, &k) in keep.iter().enumerate() {
                if !k {
                    r[s] = T::neg_infinity();
                }
            }
        }
        for v in &mut r[slot_count + len..] {
            *v = T::neg_infinity();
        }
    }
    Some(Tensor::new(vec![lengths.len(), cols], data).expect("mask shape"))
}

/// `softmax(Q·K'ᵀ/√d_k + mask)·V'` with `K' = slots.K ⊕ K`, `V' = slots.V ⊕ V`.
///
/// `q`, `k`, `v` are `[batch, heads, tokens, head_dim]`; slot tensors are
/// `[slots, heads, head_dim]` and shared across the batch. Slot columns come
/// first. `key_mask`, when given, is `[batch, slots + tokens]`.
pub fn attend_with_prefix<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    slots: Option<SlotVars>,
    key_mask: Option<&Tensor<T>>,
) -> Result<Var> {
    let qs = g.shape(q).to_vec();
    if qs.len() != 4 {
        return Err(Error::Precondition(format!("attention expects [b, h, n, d_k] queries, got {qs:?}")));
    }
    let (batch, heads, head_dim) = (qs[0], qs[1], qs[3]);
    let (keys, values) = match slots {
        Some(s) => {
            let ss = g.shape(s.keys).to_vec();
            if ss.len() != 3 || ss[1] != heads || ss[2] != head_dim || g.shape(s.values) != ss.as_slice() {
                return Err(Error::SlotShape { got: ss, heads, head_dim });
            }
            let sk = g.permute(s.keys, &[1, 0, 2])?;
            let sk = g.repeat(sk, batch);
            let sv = g.permute(s.values, &[1, 0, 2])?;
            let sv = g.repeat(sv, batch);
            (g.concat(&[sk, k], 2)?, g.concat(&[sv, v], 2)?)
        }
        None => (k, v),
    };
    let scores = g.matmul_t(q, keys)?;
    let scores = g.scale(scores, T::from_f64_lossy(1.0 / (head_dim as f64).sqrt()));
    let scores = match key_mask {
        Some(m) => g.add_key_mask(scores, m)?,
        None => scores,
    };
    let weights = g.softmax(scores)?;
    Ok(g.matmul(weights, values)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn single_slot_hand_example() {
        // Q=[[1,0]], K=[[1,0]], V=[[2,0]], slot K_p=[[0,1]], V_p=[[0,4]], d_k=2.
        // logits: token 1/√2, slot 0 → weights e^{0.7071}/(e^{0.7071}+1) and its complement.
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[1, 1, 1, 2], &[1.0, 0.0]));
        let k = g.constant(t(&[1, 1, 1, 2], &[1.0, 0.0]));
        let v = g.constant(t(&[1, 1, 1, 2], &[2.0, 0.0]));
        let slots = LayerPrefixSlots::new(t(&[1, 1, 2], &[0.0, 1.0]), t(&[1, 1, 2], &[0.0, 4.0])).unwrap();
        let sv = slots.register(&mut g, false);
        let out = attend_with_prefix(&mut g, q, k, v, sv, None).unwrap();
        let w_tok = (0.5f64.sqrt()).exp() / ((0.5f64.sqrt()).exp() + 1.0);
        let o = g.value(out).data();
        assert!((o[0] - 2.0 * w_tok).abs() < 1e-12);
        assert!((o[1] - 4.0 * (1.0 - w_tok)).abs() < 1e-12);
        assert!((o[0] - 1.3396).abs() < 1e-3 && (o[1] - 1.3208).abs() < 1e-3, "{o:?}");
    }

    #[test]
    fn empty_slots_equal_vanilla_attention() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(t(&[1, 1, 2, 2], &[0.3, -1.0, 2.0, 0.5]));
        let k = g.constant(t(&[1, 1, 2, 2], &[1.0, 0.2, -0.4, 0.9]));
        let v = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let empty = LayerPrefixSlots::<f64>::empty(1, 2);
        let sv = empty.register(&mut g, false);
        assert!(sv.is_none());
        let a = attend_with_prefix(&mut g, q, k, v, sv, None).unwrap();

        let s = g.matmul_t(q, k).unwrap();
        let s = g.scale(s, 1.0 / 2f64.sqrt());
        let w = g.softmax(s).unwrap();
        let b = g.matmul(w, v).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn slot_shape_mismatch_is_rejected() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros(&[1, 2, 3, 4]));
        let slots = LayerPrefixSlots::<f64>::new(Tensor::zeros(&[5, 2, 3]), Tensor::zeros(&[5, 2, 3])).unwrap();
        let sv = slots.register(&mut g, false);
        let err = attend_with_prefix(&mut g, q, q, q, sv, None).unwrap_err();
        assert!(matches!(err, Error::SlotShape { .. }));
    }

    #[test]
    fn key_mask_is_absent_when_nothing_is_masked() {
        assert!(build_key_mask::<f64>(&[3, 3], 3, 2, None).is_none());
        assert!(build_key_mask::<f64>(&[3, 3], 3, 2, Some(&[true, true])).is_none());
        let m = build_key_mask::<f64>(&[3, 2], 3, 2, Some(&[false, true])).unwrap();
        assert_eq!(m.shape(), &[2, 5]);
        let d = m.data();
        assert_eq!(d[0], f64::NEG_INFINITY);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[9], f64::NEG_INFINITY);
        assert_eq!(d[8], 0.0);
    }
}
