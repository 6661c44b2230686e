//! Finite-difference checks, in f64, of every differentiable operation and of
//! the losses the trainers minimise.

use prefixrep_tensor::gradcheck::DEFAULT_STEP;
use prefixrep_tensor::{gradient_check, Graph, Result as TensorResult, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::{attend_with_prefix, EncoderConfig, EncoderModel, EncoderVars, SlotVars, TokenBatch};
use crate::error::{Error, Result};
use crate::head::{ClassifierHead, HeadVariant, HeadVars};
use crate::nn::dropout;

/// Largest accepted relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckCase {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

impl GradCheckCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRADCHECK_TOLERANCE
    }
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Contract an output with fixed random weights so every coordinate matters.
fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> TensorResult<Var> {
    let w = rand_t(g.shape(out), seed).data().to_vec();
    let y = g.mul_const(out, w)?;
    Ok(g.sum(y))
}

type CaseFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> TensorResult<Var>>;

fn op_cases() -> Vec<(&'static str, CaseFn, Vec<Tensor<f64>>)> {
    let mask = Tensor::from_f64(&[2, 5], &[0.0, f64::NEG_INFINITY, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0]).expect("mask");
    vec![
        ("matmul", Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 1)
        }), vec![rand_t(&[3, 4], 2), rand_t(&[4, 5], 3)]),
        ("matmul_batched", Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 4)
        }), vec![rand_t(&[2, 3, 4], 5), rand_t(&[2, 4, 2], 6)]),
        ("matmul_t", Box::new(|g, v| {
            let y = g.matmul_t(v[0], v[1])?;
            weighted_sum(g, y, 7)
        }), vec![rand_t(&[2, 3, 4], 8), rand_t(&[2, 5, 4], 9)]),
        ("add", Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, 10)
        }), vec![rand_t(&[2, 3], 11), rand_t(&[2, 3], 12)]),
        ("add_broadcast", Box::new(|g, v| {
            let y = g.add_broadcast(v[0], v[1])?;
            weighted_sum(g, y, 13)
        }), vec![rand_t(&[2, 3, 4], 14), rand_t(&[4], 15)]),
        ("mul", Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, 16)
        }), vec![rand_t(&[2, 3], 17), rand_t(&[2, 3], 18)]),
        ("scale", Box::new(|g, v| {
            let y = g.scale(v[0], 0.37);
            weighted_sum(g, y, 19)
        }), vec![rand_t(&[5], 20)]),
        ("mul_const", Box::new(|g, v| {
            let y = g.mul_const(v[0], vec![2.0, 0.0, -1.5, 1.0])?;
            weighted_sum(g, y, 21)
        }), vec![rand_t(&[4], 22)]),
        ("gelu", Box::new(|g, v| {
            let y = g.gelu(v[0]);
            weighted_sum(g, y, 23)
        }), vec![rand_t(&[3, 4], 24)]),
        ("tanh", Box::new(|g, v| {
            let y = g.tanh(v[0]);
            weighted_sum(g, y, 25)
        }), vec![rand_t(&[3, 4], 26)]),
        ("softmax", Box::new(|g, v| {
            let y = g.softmax(v[0])?;
            weighted_sum(g, y, 27)
        }), vec![rand_t(&[3, 5], 28)]),
        ("layer_norm", Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y, 29)
        }), vec![rand_t(&[3, 6], 30), rand_t(&[6], 31), rand_t(&[6], 32)]),
        ("cross_entropy", Box::new(|g, v| g.cross_entropy(v[0], &[0, 2, 1, 2])), vec![rand_t(&[4, 3], 33)]),
        ("embedding", Box::new(|g, v| {
            let y = g.embedding(v[0], &[2, 0, 2, 4, 1, 1], &[2, 3])?;
            weighted_sum(g, y, 34)
        }), vec![rand_t(&[5, 3], 35)]),
        ("permute_reshape_narrow", Box::new(|g, v| {
            let p = g.permute(v[0], &[2, 0, 1])?;
            let r = g.reshape(p, &[4, 6])?;
            let n = g.narrow(r, 1, 1, 3)?;
            weighted_sum(g, n, 36)
        }), vec![rand_t(&[2, 3, 4], 37)]),
        ("repeat_concat", Box::new(|g, v| {
            let r = g.repeat(v[1], 2);
            let c = g.concat(&[r, v[0]], 1)?;
            weighted_sum(g, c, 38)
        }), vec![rand_t(&[2, 3, 4], 39), rand_t(&[2, 4], 40)]),
        ("add_key_mask", Box::new(move |g, v| {
            let m = g.add_key_mask(v[0], &mask)?;
            let s = g.softmax(m)?;
            weighted_sum(g, s, 41)
        }), vec![rand_t(&[2, 3, 5], 42)]),
        ("sum_mean", Box::new(|g, v| {
            let s = g.sum(v[0]);
            let m = g.mean(v[0]);
            let t = g.tanh(m);
            g.add(s, t)
        }), vec![rand_t(&[3, 4], 43)]),
        ("dropout", Box::new(|g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(44);
            let y = dropout(g, v[0], 0.3, Some(&mut rng))?;
            weighted_sum(g, y, 45)
        }), vec![rand_t(&[4, 5], 46)]),
        ("attention_with_prefix", Box::new(|g, v| {
            // q, k, v: [b=2, h=2, n=3, dk=4]; slots: [s=2, h=2, dk=4]
            let mask = Tensor::from_f64(&[2, 5], &[0.0, 0.0, 0.0, 0.0, f64::NEG_INFINITY, 0.0, 0.0, 0.0, 0.0, 0.0]).expect("mask");
            let y = attend_with_prefix(g, v[0], v[1], v[2], Some(SlotVars { keys: v[3], values: v[4] }), Some(&mask)).map_err(tensor_err)?;
            weighted_sum(g, y, 47)
        }), vec![rand_t(&[2, 2, 3, 4], 48), rand_t(&[2, 2, 3, 4], 49), rand_t(&[2, 2, 3, 4], 50), rand_t(&[2, 2, 4], 51), rand_t(&[2, 2, 4], 52)]),
    ]
}

fn tensor_err(e: Error) -> prefixrep_tensor::TensorError {
    match e {
        Error::Tensor(t) => t,
        other => prefixrep_tensor::TensorError::NonFinite(other.to_string()),
    }
}

/// Small encoder, batch and slots shared by the model-level checks.
struct Fixture {
    model: EncoderModel<f64>,
    batch: TokenBatch,
    labels: Vec<usize>,
    slot_count: usize,
}

fn fixture() -> Result<Fixture> {
    let mut config = EncoderConfig::tiny(12);
    config.dropout_rate = 0.1;
    config.init_std = 0.3;
    let model = EncoderModel::init(config, 7)?;
    let seqs: Vec<Vec<u32>> = vec![vec![1, 5, 6, 2], vec![1, 7, 2], vec![1, 9, 10, 11, 2]];
    let batch = TokenBatch::new(&seqs, &model.config)?;
    Ok(Fixture { model, batch, labels: vec![0, 1, 1], slot_count: 3 })
}

fn model_cases(fx: &Fixture) -> Vec<(&'static str, CaseFn, Vec<Tensor<f64>>)> {
    let c = &fx.model.config;
    let (layers, h, dk) = (c.num_layers, c.num_heads, c.head_dim());
    let mut cases: Vec<(&'static str, CaseFn, Vec<Tensor<f64>>)> = Vec::new();

    // Prefix-training loss: frozen encoder, trainable slots in every layer and
    // an mlp_on_cls head, with padding and dropout.
    let head = ClassifierHead::<f64>::init(HeadVariant::MlpOnCls, c.d_model, 2, 3);
    let mut points: Vec<Tensor<f64>> = Vec::new();
    for l in 0..layers {
        points.push(rand_t(&[fx.slot_count, h, dk], 100 + 2 * l as u64));
        points.push(rand_t(&[fx.slot_count, h, dk], 101 + 2 * l as u64));
    }
    points.extend(head.named_tensors().into_iter().map(|(_, t)| t.clone()));
    {
        let model = fx.model.clone();
        let batch = fx.batch.clone();
        let labels = fx.labels.clone();
        let head = head.clone();
        cases.push((
            "prefix_training_step",
            Box::new(move |g, v| {
                let enc = model.register(g, false);
                let slots: Vec<Option<SlotVars>> = (0..layers).map(|l| Some(SlotVars { keys: v[2 * l], values: v[2 * l + 1] })).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                let reps = model.forward(g, &enc, &batch, &slots, None, Some(&mut rng)).map_err(tensor_err)?;
                let hv = HeadVars::from_flat(HeadVariant::MlpOnCls, &v[2 * layers..]);
                let logits = head.forward(g, &hv, reps, None).map_err(tensor_err)?;
                g.cross_entropy(logits, &labels)
            }),
            points,
        ));
    }

    // Full fine-tuning loss: every encoder parameter plus an attention_plus_mlp head.
    let head = ClassifierHead::<f64>::init(HeadVariant::AttentionPlusMlp, c.d_model, 2, 4);
    let mut points: Vec<Tensor<f64>> = fx.model.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let enc_count = points.len();
    points.extend(head.named_tensors().into_iter().map(|(_, t)| t.clone()));
    {
        let model = fx.model.clone();
        let batch = fx.batch.clone();
        let labels = fx.labels.clone();
        cases.push((
            "finetune_step",
            Box::new(move |g, v| {
                let enc = EncoderVars::from_flat(layers, &v[..enc_count]);
                let mut rng = ChaCha8Rng::seed_from_u64(10);
                let reps = model.forward(g, &enc, &batch, &[], None, Some(&mut rng)).map_err(tensor_err)?;
                let hv = HeadVars::from_flat(HeadVariant::AttentionPlusMlp, &v[enc_count..]);
                let mask = batch.padding_mask::<f64>();
                let logits = head.forward(g, &hv, reps, mask.as_ref()).map_err(tensor_err)?;
                g.cross_entropy(logits, &labels)
            }),
            points,
        ));
    }

    // Target-head loss on fixed, padded representations.
    let head = ClassifierHead::<f64>::init(HeadVariant::AttentionPlusMlp, c.d_model, 3, 5);
    let mut points = vec![rand_t(&[2, 4, c.d_model], 120)];
    points.extend(head.named_tensors().into_iter().map(|(_, t)| t.clone()));
    cases.push((
        "target_head_step",
        Box::new(move |g, v| {
            let mask = Tensor::from_f64(&[2, 4], &[0.0, 0.0, 0.0, f64::NEG_INFINITY, 0.0, 0.0, 0.0, 0.0]).expect("mask");
            let hv = HeadVars::from_flat(HeadVariant::AttentionPlusMlp, &v[1..]);
            let logits = head.forward(g, &hv, v[0], Some(&mask)).map_err(tensor_err)?;
            g.cross_entropy(logits, &[2, 0])
        }),
        points,
    ));
    cases
}

/// Run every check. The model-level cases perturb at most `max_coords`
/// coordinates per tensor; op cases check every coordinate.
pub fn run_gradient_suite(max_coords: Option<usize>) -> Result<Vec<GradCheckCase>> {
    let mut out = Vec::new();
    for (name, f, points) in op_cases() {
        let r = gradient_check(f, &points, DEFAULT_STEP, None)?;
        out.push(GradCheckCase { name: name.into(), max_rel_error: r.max_rel_error, coords_checked: r.coords_checked });
    }
    let fx = fixture()?;
    for (name, f, points) in model_cases(&fx) {
        let r = gradient_check(f, &points, DEFAULT_STEP, max_coords)?;
        out.push(GradCheckCase { name: name.into(), max_rel_error: r.max_rel_error, coords_checked: r.coords_checked });
    }
    Ok(out)
}
