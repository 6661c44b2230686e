use prefixrep::encoder::{EncoderConfig, EncoderModel, Vocab};
use prefixrep::head::HeadVariant;
use prefixrep::reps::FixedReps;
use prefixrep::taskgen::*;
use prefixrep::training::*;
use prefixrep::Error;
use prefixrep_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn presence_task(seed: u64, cues: Vec<u32>, n: usize) -> (Vocab, LabeledDataset) {
    let vocab = Vocab::synthetic(40);
    let spec = ConceptSpec { concept: 0, cues, rule: LabelRule::Presence, noise_rate: 0.0, relation: Relation::Aligned, segment_len: (4, 7) };
    let ds = generate_task("presence", &spec, n, seed, &vocab, Split::Train).unwrap();
    (vocab, ds)
}

fn base(vocab: &Vocab, cues: &[u32]) -> EncoderModel<f32> {
    let mut c = EncoderConfig::tiny(vocab.size());
    c.d_model = 16;
    c.d_ff = 32;
    c.init_std = 0.2;
    let mut m = EncoderModel::init_with_concepts(c, 21, &[cues.to_vec()], 3.0).unwrap();
    m.frozen = true;
    m
}

fn prefix_cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs: Some(epochs), learning_rate: 1e-2, eval_every: 1, ..TrainConfig::prefix_default() }
}

fn spec() -> PrefixSpec {
    PrefixSpec { length: 4, init_std: 0.1, init_seed: 3, head_seed: 4, head_learning_rate: None }
}

#[test]
fn zero_steps_leave_the_prefix_at_its_initialization() {
    let (vocab, ds) = presence_task(1, vec![10, 11], 40);
    let m = base(&vocab, &[10, 11]);
    let cfg = TrainConfig { epochs: None, max_steps: Some(0), ..prefix_cfg(1) };
    let out = train_prefix(&m, &ds, &cfg, &spec()).unwrap();
    assert_eq!(out.steps, 0);
    assert!(out.curve.is_empty());
    let s = spec();
    assert_eq!(out.prefix.layers, prefixrep::prefix::TaskPrefix::init("presence", &m, s.length, s.init_std, s.init_seed).layers);
}

#[test]
fn prefix_learns_a_separable_task_and_leaves_the_base_alone() {
    let cues = vec![10, 11];
    let (vocab, ds) = presence_task(2, cues.clone(), 256);
    let m = base(&vocab, &cues);
    let before = m.checksum();
    let out = train_prefix(&m, &ds, &prefix_cfg(40), &spec()).unwrap();
    assert_eq!(m.checksum(), before);
    assert_eq!(out.steps, 40 * 16);
    let acc = evaluate_model(&m, &out.head, &out.prefix.layers, &ds).unwrap();
    assert!(acc >= 0.95, "training accuracy {acc}");

    let mean = |r: &[LossRecord]| r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64;
    let k = out.curve.len() / 10;
    let (first, last) = (mean(&out.curve[..k]), mean(&out.curve[out.curve.len() - k..]));
    assert!(last < 0.5 * first, "loss {first} -> {last}");
    assert_eq!(out.prefix.meta.steps, out.steps);
    assert_eq!(out.prefix.fingerprint, m.fingerprint());
}

#[test]
fn unfrozen_base_is_refused() {
    let (vocab, ds) = presence_task(3, vec![10, 11], 40);
    let mut m = base(&vocab, &[10, 11]);
    m.frozen = false;
    assert!(matches!(train_prefix(&m, &ds, &prefix_cfg(1), &spec()), Err(Error::Precondition(_))));
}

#[test]
fn prefixes_do_not_depend_on_training_order() {
    let (vocab, a) = presence_task(4, vec![10, 11], 64);
    let (_, b) = presence_task(5, vec![20, 21], 64);
    let m = base(&vocab, &[10, 11]);
    let cfg = prefix_cfg(2);
    let a1 = train_prefix(&m, &a, &cfg, &spec()).unwrap().prefix;
    let b1 = train_prefix(&m, &b, &cfg, &spec()).unwrap().prefix;
    let b2 = train_prefix(&m, &b, &cfg, &spec()).unwrap().prefix;
    let a2 = train_prefix(&m, &a, &cfg, &spec()).unwrap().prefix;
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
}

#[test]
fn task_sampler_is_uniform() {
    let mut s = UniformTaskSampler::new(4, 17);
    let mut counts = [0usize; 4];
    let n = 10_000;
    for _ in 0..n {
        counts[s.next_task()] += 1;
    }
    let sigma = (n as f64 * 0.25 * 0.75).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 / 4.0).abs() <= 5.0 * sigma, "{counts:?}");
    }
}

#[test]
fn batcher_visits_every_example_once_per_epoch() {
    let mut b = Batcher::new(10, 4, 3);
    for _ in 0..3 {
        let mut seen: Vec<usize> = (0..3).flat_map(|_| b.next_batch()).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}

fn random_reps(n: usize, d: usize, labels: impl Fn(usize) -> usize, seed: u64) -> FixedReps<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequences = (0..n)
        .map(|_| {
            let len = rng.random_range(2..6);
            Tensor::new(vec![len, d], (0..len * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        })
        .collect();
    FixedReps { name: "r".into(), sequences, labels: (0..n).map(labels).collect(), class_count: 2, d_model: d }
}

#[test]
fn head_on_a_constant_label_predicts_it_everywhere() {
    let reps = random_reps(64, 8, |_| 1, 1);
    let cfg = TrainConfig { epochs: Some(30), learning_rate: 1e-2, ..TrainConfig::head_default() };
    for variant in [HeadVariant::MlpOnCls, HeadVariant::AttentionPlusMlp] {
        let (head, _) = train_target_head(&reps, &cfg, variant, 2).unwrap();
        assert_eq!(evaluate(&head, &random_reps(50, 8, |_| 1, 9)).unwrap(), 1.0);
    }
}

#[test]
fn head_on_noise_labels_stays_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let coin: Vec<usize> = (0..400).map(|_| rng.random_range(0..2)).collect();
    let train = random_reps(200, 8, |i| coin[i], 5);
    let test = random_reps(200, 8, |i| coin[200 + i], 6);
    let cfg = TrainConfig { epochs: Some(20), learning_rate: 1e-3, ..TrainConfig::head_default() };
    let (head, _) = train_target_head(&train, &cfg, HeadVariant::AttentionPlusMlp, 3).unwrap();
    let acc = evaluate(&head, &test).unwrap();
    assert!((acc - 0.5).abs() <= 0.1, "held-out accuracy {acc}");
}

#[test]
fn multitask_counts_steps_and_returns_a_frozen_copy() {
    let (vocab, a) = presence_task(6, vec![10, 11], 48);
    let (_, b) = presence_task(7, vec![20, 21], 48);
    let m = base(&vocab, &[10, 11]);
    let before = m.checksum();
    let cfg = TrainConfig { max_steps: Some(30), ..TrainConfig::multitask_default() };
    let out = train_multitask(&m, &[&a, &b], &cfg, HeadVariant::AttentionPlusMlp, 1).unwrap();
    assert_eq!(out.steps_per_task.iter().sum::<usize>(), 30);
    assert_eq!(out.heads.len(), 2);
    assert!(out.model.frozen);
    assert_eq!(m.checksum(), before);
    assert_ne!(out.model.checksum(), before);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = TrainConfig::prefix_default();
    c.max_steps = Some(5);
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let c = TrainConfig { batch_size: 0, ..TrainConfig::prefix_default() };
    assert!(c.validate().is_err());
    let c = TrainConfig { learning_rate: f64::NAN, ..TrainConfig::prefix_default() };
    assert!(c.validate().is_err());
}
