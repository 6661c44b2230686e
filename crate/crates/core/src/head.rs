//! Classifier heads on top of encoder outputs.

use prefixrep_tensor::{Graph, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::path::Path;

use serde_json::json;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::{Linear, LinearVars};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    /// `out(tanh(dense(cls)))`.
    MlpOnCls,
    /// Single-head attention from the CLS position over the whole sequence,
    /// added back to CLS, followed by the same MLP.
    AttentionPlusMlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadAttention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    pub variant: HeadVariant,
    pub attention: Option<HeadAttention<T>>,
    pub dense: Linear<T>,
    pub out: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct HeadVars {
    attention: Option<[LinearVars; 3]>,
    dense: LinearVars,
    out: LinearVars,
}

impl HeadVars {
    /// Rebuild from handles in [`HeadVars::flat`] order.
    pub fn from_flat(variant: HeadVariant, vars: &[Var]) -> Self {
        let lin = |i: usize| LinearVars { weight: vars[i], bias: vars[i + 1] };
        match variant {
            HeadVariant::MlpOnCls => {
                assert_eq!(vars.len(), 4, "head handle count");
                HeadVars { attention: None, dense: lin(0), out: lin(2) }
            }
            HeadVariant::AttentionPlusMlp => {
                assert_eq!(vars.len(), 10, "head handle count");
                HeadVars { attention: Some([lin(0), lin(2), lin(4)]), dense: lin(6), out: lin(8) }
            }
        }
    }

    pub fn flat(&self) -> Vec<Var> {
        let mut v = Vec::new();
        if let Some(a) = &self.attention {
            for l in a {
                v.extend(l.flat());
            }
        }
        v.extend(self.dense.flat());
        v.extend(self.out.flat());
        v
    }
}

pub const HEAD_MAGIC: &[u8; 8] = b"PRXHEAD\0";
pub const HEAD_VERSION: u32 = 1;

impl<T: Scalar> ClassifierHead<T> {
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let header = json!({
            "variant": self.variant,
            "d_model": self.d_model(),
            "classes": self.classes(),
            "extra": extra,
        });
        let mut c = Container::new(*HEAD_MAGIC, HEAD_VERSION, header, T::DTYPE);
        for (name, t) in self.named_tensors() {
            c.push_tensor(name, t);
        }
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path, HEAD_MAGIC, HEAD_VERSION)?;
        let mut head = ClassifierHead::<T>::init(c.header_field("variant")?, c.header_field("d_model")?, c.header_field("classes")?, 0);
        let names: Vec<String> = head.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(head.params_mut()) {
            let t: Tensor<T> = c.tensor(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!("tensor '{name}' has shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        Ok(head)
    }

    /// Weights are normal with standard deviation `1/√fan_in`, biases zero.
    pub fn init(variant: HeadVariant, d_model: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (d_model as f64).sqrt();
        let attention = match variant {
            HeadVariant::MlpOnCls => None,
            HeadVariant::AttentionPlusMlp => Some(HeadAttention {
                query: Linear::init(d_model, d_model, s, &mut rng),
                key: Linear::init(d_model, d_model, s, &mut rng),
                value: Linear::init(d_model, d_model, s, &mut rng),
            }),
        };
        let dense = Linear::init(d_model, d_model, s, &mut rng);
        let out = Linear::init(d_model, classes, s, &mut rng);
        ClassifierHead { variant, attention, dense, out }
    }

    pub fn classes(&self) -> usize {
        self.out.bias.len()
    }

    pub fn d_model(&self) -> usize {
        self.dense.weight.shape()[0]
    }

    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> HeadVars {
        HeadVars {
            attention: self.attention.as_ref().map(|a| {
                [a.query.register(g, trainable), a.key.register(g, trainable), a.value.register(g, trainable)]
            }),
            dense: self.dense.register(g, trainable),
            out: self.out.register(g, trainable),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::new();
        if let Some(a) = &mut self.attention {
            v.extend(a.query.tensors_mut());
            v.extend(a.key.tensors_mut());
            v.extend(a.value.tensors_mut());
        }
        v.extend(self.dense.tensors_mut());
        v.extend(self.out.tensors_mut());
        v
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = Vec::new();
        if let Some(a) = &self.attention {
            for (n, l) in [("query", &a.query), ("key", &a.key), ("value", &a.value)] {
                v.push((format!("attention.{n}.weight"), &l.weight));
                v.push((format!("attention.{n}.bias"), &l.bias));
            }
        }
        v.push(("dense.weight".into(), &self.dense.weight));
        v.push(("dense.bias".into(), &self.dense.bias));
        v.push(("out.weight".into(), &self.out.weight));
        v.push(("out.bias".into(), &self.out.bias));
        v
    }

    /// Logits `[batch, classes]` from a `[batch, seq, d_model]` representation.
    /// `key_mask` (`[batch, seq]`, `-inf` on padding) is used by the attention variant.
    pub fn forward(&self, g: &mut Graph<T>, vars: &HeadVars, reps: Var, key_mask: Option<&Tensor<T>>) -> Result<Var> {
        let shape = g.shape(reps).to_vec();
        if shape.len() != 3 || shape[2] != self.d_model() {
            return Err(Error::Precondition(format!(
                "head expects [batch, seq, {}] input, got {shape:?}",
                self.d_model()
            )));
        }
        let (b, d) = (shape[0], shape[2]);
        let cls = g.narrow(reps, 1, 0, 1)?;
        let pooled = match &vars.attention {
            None => cls,
            Some([q, k, v]) => {
                let qv = q.forward(g, cls)?;
                let kv = k.forward(g, reps)?;
                let vv = v.forward(g, reps)?;
                let scores = g.matmul_t(qv, kv)?;
                let scores = g.scale(scores, T::from_f64_lossy(1.0 / (d as f64).sqrt()));
                let scores = match key_mask {
                    Some(m) => g.add_key_mask(scores, m)?,
                    None => scores,
                };
                let w = g.softmax(scores)?;
                let ctx = g.matmul(w, vv)?;
                g.add(cls, ctx)?
            }
        };
        let pooled = g.reshape(pooled, &[b, d])?;
        let h = vars.dense.forward(g, pooled)?;
        let h = g.tanh(h);
        Ok(vars.out.forward(g, h)?)
    }

    pub fn cast<U: Scalar>(&self) -> ClassifierHead<U> {
        ClassifierHead {
            variant: self.variant,
            attention: self.attention.as_ref().map(|a| HeadAttention {
                query: a.query.cast(),
                key: a.key.cast(),
                value: a.value.cast(),
            }),
            dense: self.dense.cast(),
            out: self.out.cast(),
        }
    }
}

/// Index of the largest logit per row. Ties resolve to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let c = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(c.max(1))
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_first_on_ties() {
        let t = Tensor::<f64>::from_f64(&[3, 2], &[0.0, 0.0, -1.0, 2.0, 5.0, 1.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1, 0]);
    }

    #[test]
    fn output_width_is_class_count() {
        for variant in [HeadVariant::MlpOnCls, HeadVariant::AttentionPlusMlp] {
            let h = ClassifierHead::<f64>::init(variant, 4, 3, 0);
            let mut g = Graph::new();
            let vars = h.register(&mut g, false);
            let x = g.constant(Tensor::full(&[2, 5, 4], 0.1));
            let y = h.forward(&mut g, &vars, x, None).unwrap();
            assert_eq!(g.shape(y), &[2, 3]);
            assert_eq!(h.classes(), 3);
        }
    }
}
