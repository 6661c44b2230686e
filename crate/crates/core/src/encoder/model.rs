use prefixrep_tensor::{Graph, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::attention::{attend_with_prefix, build_key_mask, LayerPrefixSlots, SlotVars};
use super::config::EncoderConfig;
use super::vocab::{CLS, PAD};
use crate::container::{checksum_tensors, sha256_hex};
use crate::error::{Error, Result};
use crate::nn::{dropout, Linear, LinearVars, Norm, NormVars};

/// One post-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub attn_norm: Norm<T>,
    pub ff_in: Linear<T>,
    pub ff_out: Linear<T>,
    pub ff_norm: Norm<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub query: LinearVars,
    pub key: LinearVars,
    pub value: LinearVars,
    pub output: LinearVars,
    pub attn_norm: NormVars,
    pub ff_in: LinearVars,
    pub ff_out: LinearVars,
    pub ff_norm: NormVars,
}

impl<T: Scalar> EncoderLayer<T> {
    fn init(c: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, s) = (c.d_model, c.init_std);
        EncoderLayer {
            query: Linear::init(d, d, s, rng),
            key: Linear::init(d, d, s, rng),
            value: Linear::init(d, d, s, rng),
            output: Linear::init(d, d, s, rng),
            attn_norm: Norm::init(d),
            ff_in: Linear::init(d, c.d_ff, s, rng),
            ff_out: Linear::init(c.d_ff, d, s, rng),
            ff_norm: Norm::init(d),
        }
    }

    fn named(&self, i: usize) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::with_capacity(16);
        let lin = [("query", &self.query), ("key", &self.key), ("value", &self.value), ("output", &self.output)];
        for (name, l) in lin {
            out.push((format!("layers.{i}.{name}.weight"), &l.weight));
            out.push((format!("layers.{i}.{name}.bias"), &l.bias));
        }
        out.push((format!("layers.{i}.attn_norm.gain"), &self.attn_norm.gain));
        out.push((format!("layers.{i}.attn_norm.bias"), &self.attn_norm.bias));
        for (name, l) in [("ff_in", &self.ff_in), ("ff_out", &self.ff_out)] {
            out.push((format!("layers.{i}.{name}.weight"), &l.weight));
            out.push((format!("layers.{i}.{name}.bias"), &l.bias));
        }
        out.push((format!("layers.{i}.ff_norm.gain"), &self.ff_norm.gain));
        out.push((format!("layers.{i}.ff_norm.bias"), &self.ff_norm.bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::with_capacity(16);
        out.extend(self.query.tensors_mut());
        out.extend(self.key.tensors_mut());
        out.extend(self.value.tensors_mut());
        out.extend(self.output.tensors_mut());
        out.extend(self.attn_norm.tensors_mut());
        out.extend(self.ff_in.tensors_mut());
        out.extend(self.ff_out.tensors_mut());
        out.extend(self.ff_norm.tensors_mut());
        out
    }

    fn register(&self, g: &mut Graph<T>, trainable: bool) -> LayerVars {
        LayerVars {
            query: self.query.register(g, trainable),
            key: self.key.register(g, trainable),
            value: self.value.register(g, trainable),
            output: self.output.register(g, trainable),
            attn_norm: self.attn_norm.register(g, trainable),
            ff_in: self.ff_in.register(g, trainable),
            ff_out: self.ff_out.register(g, trainable),
            ff_norm: self.ff_norm.register(g, trainable),
        }
    }

    fn cast<U: Scalar>(&self) -> EncoderLayer<U> {
        EncoderLayer {
            query: self.query.cast(),
            key: self.key.cast(),
            value: self.value.cast(),
            output: self.output.cast(),
            attn_norm: self.attn_norm.cast(),
            ff_in: self.ff_in.cast(),
            ff_out: self.ff_out.cast(),
            ff_norm: self.ff_norm.cast(),
        }
    }
}

impl LayerVars {
    fn flat(&self) -> Vec<Var> {
        let mut v = Vec::with_capacity(16);
        v.extend(self.query.flat());
        v.extend(self.key.flat());
        v.extend(self.value.flat());
        v.extend(self.output.flat());
        v.extend(self.attn_norm.flat());
        v.extend(self.ff_in.flat());
        v.extend(self.ff_out.flat());
        v.extend(self.ff_norm.flat());
        v
    }
}

/// Transformer encoder with learned absolute positions and prefix-aware attention.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T> {
    pub config: EncoderConfig,
    pub token_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub emb_norm: Norm<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub frozen: bool,
}

/// Graph handles for every encoder parameter, in [`EncoderModel::params_mut`] order.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub token_emb: Var,
    pub pos_emb: Var,
    pub emb_norm: NormVars,
    pub layers: Vec<LayerVars>,
}

impl EncoderVars {
    /// Rebuild from handles in [`EncoderVars::flat`] order.
    pub fn from_flat(num_layers: usize, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), 4 + 16 * num_layers, "encoder handle count");
        let lin = |i: usize| LinearVars { weight: vars[i], bias: vars[i + 1] };
        let norm = |i: usize| NormVars { gain: vars[i], bias: vars[i + 1] };
        let layers = (0..num_layers)
            .map(|l| {
                let o = 4 + 16 * l;
                LayerVars {
                    query: lin(o),
                    key: lin(o + 2),
                    value: lin(o + 4),
                    output: lin(o + 6),
                    attn_norm: norm(o + 8),
                    ff_in: lin(o + 10),
                    ff_out: lin(o + 12),
                    ff_norm: norm(o + 14),
                }
            })
            .collect();
        EncoderVars { token_emb: vars[0], pos_emb: vars[1], emb_norm: norm(2), layers }
    }

    pub fn flat(&self) -> Vec<Var> {
        let mut v = vec![self.token_emb, self.pos_emb];
        v.extend(self.emb_norm.flat());
        for l in &self.layers {
            v.extend(l.flat());
        }
        v
    }
}

/// Right-padded token ids ready for the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    /// Validate sequences against `config` and pad them with PAD to the longest one.
    pub fn new<S: AsRef<[u32]>>(seqs: &[S], config: &EncoderConfig) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let seq_len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            if s.first() != Some(&CLS) {
                return Err(Error::MissingCls);
            }
            if s.len() > config.max_seq_len {
                return Err(Error::SequenceTooLong { len: s.len(), max: config.max_seq_len });
            }
            if let Some(&bad) = s.iter().find(|&&id| id as usize >= config.vocab_size) {
                return Err(Error::UnknownToken { id: bad as usize, vocab_size: config.vocab_size });
            }
            ids.extend(s.iter().map(|&id| id as usize));
            ids.extend(std::iter::repeat_n(PAD as usize, seq_len - s.len()));
            lengths.push(s.len());
        }
        Ok(TokenBatch { ids, batch: seqs.len(), seq_len, lengths })
    }

    /// `[batch, seq]` additive mask with `-inf` on padding, or `None` if nothing is padded.
    pub fn padding_mask<T: Scalar>(&self) -> Option<Tensor<T>> {
        build_key_mask(&self.lengths, self.seq_len, 0, None)
    }
}

impl<T: Scalar> EncoderModel<T> {
    /// Random initialization: normal(0, init_std) weights, zero biases, unit norm gains.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let token_emb = Tensor::randn(&[config.vocab_size, config.d_model], config.init_std, &mut rng);
        let pos_emb = Tensor::randn(&[config.max_seq_len, config.d_model], config.init_std, &mut rng);
        let layers = (0..config.num_layers).map(|_| EncoderLayer::init(&config, &mut rng)).collect();
        let emb_norm = Norm::init(config.d_model);
        Ok(EncoderModel { config, token_emb, pos_emb, emb_norm, layers, frozen: true })
    }

    /// [`EncoderModel::init`], then every token of concept `k` gets the shared
    /// direction `scale·u_k` added to its embedding, with `u_k` normal(0, init_std).
    ///
    /// This stands in for a pre-trained encoder whose embeddings already
    /// separate semantic categories.
    pub fn init_with_concepts(config: EncoderConfig, seed: u64, concepts: &[Vec<u32>], scale: f64) -> Result<Self> {
        let mut model = Self::init(config, seed)?;
        let d = model.config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0c0_7e57);
        for group in concepts {
            let u: Tensor<T> = Tensor::randn(&[d], model.config.init_std * scale, &mut rng);
            for &tok in group {
                let tok = tok as usize;
                if tok >= model.config.vocab_size {
                    return Err(Error::UnknownToken { id: tok, vocab_size: model.config.vocab_size });
                }
                let row = &mut model.token_emb.data_mut()[tok * d..(tok + 1) * d];
                row.iter_mut().zip(u.data()).for_each(|(r, x)| *r = *r + *x);
            }
        }
        Ok(model)
    }

    /// Every parameter tensor with a stable name, in serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("token_emb".to_string(), &self.token_emb),
            ("pos_emb".to_string(), &self.pos_emb),
            ("emb_norm.gain".to_string(), &self.emb_norm.gain),
            ("emb_norm.bias".to_string(), &self.emb_norm.bias),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named(i));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.token_emb, &mut self.pos_emb];
        out.extend(self.emb_norm.tensors_mut());
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over all base parameters.
    pub fn checksum(&self) -> String {
        let named = self.named_tensors();
        checksum_tensors(named.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    /// Identity of the (config, parameters) pair that prefixes are trained against.
    pub fn fingerprint(&self) -> String {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        sha256_hex(format!("{config}\n{}", self.checksum()).as_bytes())
    }

    pub fn cast<U: Scalar>(&self) -> EncoderModel<U> {
        EncoderModel {
            config: self.config.clone(),
            token_emb: self.token_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            emb_norm: self.emb_norm.cast(),
            layers: self.layers.iter().map(EncoderLayer::cast).collect(),
            frozen: self.frozen,
        }
    }

    /// Add every parameter to `g`. Parameters require gradients only if `trainable`.
    pub fn register(&self, g: &mut Graph<T>, trainable: bool) -> EncoderVars {
        EncoderVars {
            token_emb: g.leaf(self.token_emb.clone(), trainable),
            pos_emb: g.leaf(self.pos_emb.clone(), trainable),
            emb_norm: self.emb_norm.register(g, trainable),
            layers: self.layers.iter().map(|l| l.register(g, trainable)).collect(),
        }
    }

    /// Record a forward pass and return the `[batch, seq, d_model]` output.
    ///
    /// `slots` is either empty or holds one entry per layer; every present
    /// entry must have the same slot count. `slot_keep`, when given, masks the
    /// slots whose flag is false in every layer. Dropout is active only when
    /// `rng` is provided.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &EncoderVars,
        batch: &TokenBatch,
        slots: &[Option<SlotVars>],
        slot_keep: Option<&[bool]>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let c = &self.config;
        if !slots.is_empty() && slots.len() != c.num_layers {
            return Err(Error::Precondition(format!(
                "{} slot entries for {} layers",
                slots.len(),
                c.num_layers
            )));
        }
        let mut slot_count = None;
        for s in slots.iter().flatten() {
            let n = g.shape(s.keys)[0];
            if *slot_count.get_or_insert(n) != n {
                return Err(Error::Precondition("slot count differs between layers".into()));
            }
        }
        let slot_count = slot_count.unwrap_or(0);
        if slots.iter().any(Option::is_none) && slot_count > 0 {
            return Err(Error::Precondition("some layers lack slots".into()));
        }
        if let Some(keep) = slot_keep {
            if keep.len() != slot_count {
                return Err(Error::Precondition(format!(
                    "slot mask of length {} for {slot_count} slots",
                    keep.len()
                )));
            }
        }
        let (b, n, d, h) = (batch.batch, batch.seq_len, c.d_model, c.num_heads);
        let dk = c.head_dim();
        let mask = build_key_mask::<T>(&batch.lengths, n, slot_count, slot_keep);

        let tok = g.embedding(vars.token_emb, &batch.ids, &[b, n])?;
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let pos = g.embedding(vars.pos_emb, &positions, &[b, n])?;
        let x = g.add(tok, pos)?;
        let x = vars.emb_norm.forward(g, x, c.layer_norm_eps)?;
        let mut x = dropout(g, x, c.dropout_rate, rng.as_deref_mut())?;

        for (i, lv) in vars.layers.iter().enumerate() {
            let split = |g: &mut Graph<T>, lin: &LinearVars, x: Var| -> Result<Var> {
                let y = lin.forward(g, x)?;
                let y = g.reshape(y, &[b, n, h, dk])?;
                Ok(g.permute(y, &[0, 2, 1, 3])?)
            };
            let q = split(g, &lv.query, x)?;
            let k = split(g, &lv.key, x)?;
            let v = split(g, &lv.value, x)?;
            let layer_slots = slots.get(i).copied().flatten();
            let a = attend_with_prefix(g, q, k, v, layer_slots, mask.as_ref())?;
            let a = g.permute(a, &[0, 2, 1, 3])?;
            let a = g.reshape(a, &[b, n, d])?;
            let a = lv.output.forward(g, a)?;
            let a = dropout(g, a, c.dropout_rate, rng.as_deref_mut())?;
            let x1 = g.add(x, a)?;
            let x1 = lv.attn_norm.forward(g, x1, c.layer_norm_eps)?;

            let f = lv.ff_in.forward(g, x1)?;
            let f = g.gelu(f);
            let f = lv.ff_out.forward(g, f)?;
            let f = dropout(g, f, c.dropout_rate, rng.as_deref_mut())?;
            let x2 = g.add(x1, f)?;
            x = lv.ff_norm.forward(g, x2, c.layer_norm_eps)?;
        }
        Ok(x)
    }

    /// Eval-mode encoding of a batch with composed slots (one entry per layer, or none).
    pub fn encode<S: AsRef<[u32]>>(&self, seqs: &[S], slots: &[LayerPrefixSlots<T>]) -> Result<Tensor<T>> {
        self.encode_inner(seqs, slots, None)
    }

    /// Like [`EncoderModel::encode`] but with the slots whose `keep` flag is
    /// false excluded through `-inf` attention logits.
    pub fn encode_with_slot_mask<S: AsRef<[u32]>>(
        &self,
        seqs: &[S],
        slots: &[LayerPrefixSlots<T>],
        keep: &[bool],
    ) -> Result<Tensor<T>> {
        self.encode_inner(seqs, slots, Some(keep))
    }

    fn encode_inner<S: AsRef<[u32]>>(
        &self,
        seqs: &[S],
        slots: &[LayerPrefixSlots<T>],
        keep: Option<&[bool]>,
    ) -> Result<Tensor<T>> {
        let batch = TokenBatch::new(seqs, &self.config)?;
        for s in slots {
            s.check_shape(self.config.num_heads, self.config.head_dim())?;
        }
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let slot_vars: Vec<Option<SlotVars>> = slots.iter().map(|s| s.register(&mut g, false)).collect();
        let slot_vars = if slot_vars.iter().all(Option::is_none) { Vec::new() } else { slot_vars };
        let out = self.forward(&mut g, &vars, &batch, &slot_vars, keep, None)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderModel<f64> {
        EncoderModel::init(EncoderConfig::tiny(20), 7).unwrap()
    }

    #[test]
    fn batch_validation() {
        let c = EncoderConfig::tiny(20);
        assert!(matches!(TokenBatch::new(&[vec![4u32, 2]], &c), Err(Error::MissingCls)));
        assert!(matches!(TokenBatch::new(&[vec![1u32, 25, 2]], &c), Err(Error::UnknownToken { id: 25, .. })));
        let long = vec![1u32; 13];
        assert!(matches!(TokenBatch::new(&[long], &c), Err(Error::SequenceTooLong { len: 13, max: 12 })));
        let b = TokenBatch::new(&[vec![1u32, 5, 2], vec![1, 2]], &c).unwrap();
        assert_eq!(b.ids, vec![1, 5, 2, 1, 2, 0]);
        assert_eq!(b.lengths, vec![3, 2]);
    }

    #[test]
    fn padding_does_not_change_real_positions() {
        let m = tiny();
        let alone = m.encode(&[vec![1u32, 5, 2]], &[]).unwrap();
        let padded = m.encode(&[vec![1u32, 5, 2], vec![1, 6, 7, 8, 9, 2]], &[]).unwrap();
        let first = padded.narrow(0, 0, 1).unwrap().narrow(1, 0, 3).unwrap();
        assert!(alone.max_abs_diff(&first).unwrap() < 1e-12);
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let m = tiny();
        let mut m2 = m.clone();
        assert_eq!(m.fingerprint(), m2.fingerprint());
        m2.layers[0].ff_in.bias.data_mut()[0] = 1e-3;
        assert_ne!(m.checksum(), m2.checksum());
        assert_ne!(m.fingerprint(), m2.fingerprint());
    }

    #[test]
    fn params_and_vars_align() {
        let mut m = tiny();
        let names: Vec<Vec<usize>> = m.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let mut g = Graph::new();
        let vars = m.register(&mut g, true);
        let var_shapes: Vec<Vec<usize>> = vars.flat().iter().map(|&v| g.shape(v).to_vec()).collect();
        let param_shapes: Vec<Vec<usize>> = m.params_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(names, var_shapes);
        assert_eq!(names, param_shapes);
    }
}
