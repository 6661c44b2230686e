//! Transfer comparison, removal search over source prefixes, and sequential
//! source-task addition under a fixed step budget.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use prefixrep_tensor::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderModel, LayerPrefixSlots};
use crate::error::{Error, Result};
use crate::head::HeadVariant;
use crate::prefix::{PrefixBank, TaskPrefix};
use crate::reps::extract_reps;
use crate::taskgen::{make_suite_with, Suite, SuiteConfig, SuiteTask};
use crate::training::{
    evaluate, evaluate_model, finetune, train_multitask, train_prefix, train_target_head, PrefixSpec, TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SimpleFtFrozen,
    SimpleFtUnfrozen,
    MultitaskFrozen,
    PrefixFrozen,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::SimpleFtFrozen, Method::SimpleFtUnfrozen, Method::MultitaskFrozen, Method::PrefixFrozen];

    pub fn name(self) -> &'static str {
        match self {
            Method::SimpleFtFrozen => "simple_ft_frozen",
            Method::SimpleFtUnfrozen => "simple_ft_unfrozen",
            Method::MultitaskFrozen => "multitask_frozen",
            Method::PrefixFrozen => "prefix_frozen",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

/// Everything an experiment run depends on besides its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub suite: SuiteConfig,
    /// `vocab_size` is overwritten with the suite vocabulary size.
    pub encoder: EncoderConfig,
    /// Magnitude of the shared concept directions planted in the base embeddings.
    pub concept_scale: f64,
    pub prefix_length: usize,
    pub prefix_init_std: f64,
    /// Learning rate of the throwaway head trained with each prefix.
    pub prefix_head_lr: Option<f64>,
    pub prefix_train: TrainConfig,
    pub head_train: TrainConfig,
    pub multitask_train: TrainConfig,
    pub finetune_train: TrainConfig,
    pub seeds: Vec<u64>,
    pub removal_k_max: usize,
    pub seqadd_orders: usize,
    /// Optimizer steps per sequential-add round.
    pub seqadd_budget: usize,
    pub threads: usize,
}

impl ExperimentConfig {
    /// Laptop-scale configuration: 4 layers of width 128, the full default suite.
    ///
    /// Prefix hyperparameters are the reference ones. The target head, the
    /// unfrozen fine-tune and the multi-task run use rates tuned for this scale.
    pub fn desk() -> Self {
        let suite = SuiteConfig::default();
        let mut encoder = EncoderConfig::desk_default(suite.content_words + 4);
        encoder.init_std = 0.2;
        ExperimentConfig {
            encoder,
            concept_scale: 3.0,
            prefix_length: 5,
            prefix_init_std: 0.02,
            prefix_head_lr: None,
            prefix_train: TrainConfig::prefix_default(),
            head_train: TrainConfig { learning_rate: 1e-3, ..TrainConfig::head_default() },
            multitask_train: TrainConfig { max_steps: Some(20_000), learning_rate: 1e-4, ..TrainConfig::multitask_default() },
            finetune_train: TrainConfig { epochs: Some(20), learning_rate: 1e-3, ..TrainConfig::head_default() },
            seeds: vec![1, 2, 3, 4, 5],
            removal_k_max: 2,
            seqadd_orders: 8,
            seqadd_budget: 2000,
            threads: 1,
            suite,
        }
    }

    /// Reduced scale that runs every protocol over five seeds in minutes on one core.
    pub fn quick() -> Self {
        let suite = SuiteConfig {
            content_words: 196,
            source_train: 1000,
            target_train: 600,
            segment_len: (5, 9),
            ..SuiteConfig::default()
        };
        let encoder = EncoderConfig {
            vocab_size: suite.content_words + 4,
            d_model: 32,
            num_heads: 4,
            d_ff: 64,
            num_layers: 2,
            max_seq_len: suite.max_tokens(),
            dropout_rate: 0.0,
            init_std: 0.2,
            layer_norm_eps: 1e-5,
        };
        ExperimentConfig {
            suite,
            encoder,
            prefix_train: TrainConfig { epochs: Some(10), ..TrainConfig::prefix_default() },
            multitask_train: TrainConfig { max_steps: Some(3000), ..Self::desk().multitask_train },
            seqadd_budget: 800,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("prefix_train", &self.prefix_train),
            ("head_train", &self.head_train),
            ("multitask_train", &self.multitask_train),
            ("finetune_train", &self.finetune_train),
        ] {
            t.validate().map_err(|e| e.context(name))?;
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.prefix_length == 0 {
            return Err(Error::Config("prefix_length must be positive".into()));
        }
        if self.suite.max_tokens() > self.encoder.max_seq_len {
            return Err(Error::Config(format!(
                "suite examples reach {} tokens, encoder max_seq_len is {}",
                self.suite.max_tokens(),
                self.encoder.max_seq_len
            )));
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for a named random stream of a run.
pub fn derive_seed(seed: u64, stream: &str, index: u64) -> u64 {
    let tag = stream.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    splitmix(splitmix(seed ^ tag).wrapping_add(index))
}

/// Map over `items` with `threads` workers, preserving input order.
pub fn par_map<I, O, F>(threads: usize, items: Vec<I>, f: F) -> Result<Vec<O>>
where
    I: Send,
    O: Send,
    F: Fn(I) -> Result<O> + Sync + Send,
{
    if threads <= 1 {
        return items.into_iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| items.into_par_iter().map(f).collect())
}

/// Suite and frozen base for one seed.
#[derive(Debug, Clone)]
pub struct SeedContext<T> {
    pub seed: u64,
    pub suite: Suite,
    pub base: EncoderModel<T>,
}

impl<T: Scalar> SeedContext<T> {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let suite = make_suite_with(&cfg.suite, seed)?;
        Self::with_suite(cfg, seed, suite)
    }

    /// Use `suite` when given, otherwise generate the default suite for `seed`.
    pub fn for_seed(cfg: &ExperimentConfig, suite: Option<&Suite>, seed: u64) -> Result<Self> {
        match suite {
            Some(s) => Self::with_suite(cfg, seed, s.clone()),
            None => Self::new(cfg, seed),
        }
    }

    pub fn with_suite(cfg: &ExperimentConfig, seed: u64, suite: Suite) -> Result<Self> {
        let mut ec = cfg.encoder.clone();
        ec.vocab_size = suite.vocab.size();
        let base = EncoderModel::init_with_concepts(ec, derive_seed(seed, "base", 0), &suite.base_concepts(), cfg.concept_scale)?;
        Ok(SeedContext { seed, suite, base })
    }

    /// Seed of the throwaway head trained with each prefix. All source
    /// tasks of a run share it.
    pub fn prefix_head_seed(&self) -> u64 {
        derive_seed(self.seed, "prefix-head", 0)
    }

    pub fn target_head_seed(&self, target: usize) -> u64 {
        derive_seed(self.seed, "target-head", target as u64)
    }

    fn source_index(&self, name: &str) -> Result<usize> {
        self.suite.sources.iter().position(|s| s.name() == name).ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    /// Train the prefix of one source task. `max_steps` overrides the epoch count.
    pub fn train_source_prefix(&self, cfg: &ExperimentConfig, name: &str, max_steps: Option<usize>) -> Result<TaskPrefix<T>> {
        let i = self.source_index(name)?;
        let task = &self.suite.sources[i];
        let mut tc = cfg.prefix_train.clone();
        tc.seed = derive_seed(self.seed, "prefix-batches", i as u64);
        if let Some(s) = max_steps {
            tc.epochs = None;
            tc.max_steps = Some(s);
        }
        let spec = PrefixSpec {
            length: cfg.prefix_length,
            init_std: cfg.prefix_init_std,
            init_seed: derive_seed(self.seed, "prefix-init", i as u64),
            head_seed: self.prefix_head_seed(),
            head_learning_rate: cfg.prefix_head_lr,
        };
        let out = train_prefix(&self.base, &task.train, &tc, &spec).map_err(|e| e.context(format!("seed {} prefix '{name}'", self.seed)))?;
        Ok(out.prefix)
    }

    /// One prefix per source task, inserted in suite order.
    pub fn train_bank(&self, cfg: &ExperimentConfig) -> Result<PrefixBank<T>> {
        let names: Vec<String> = self.suite.sources.iter().map(|s| s.name().to_string()).collect();
        let prefixes = par_map(cfg.threads, names, |n| self.train_source_prefix(cfg, &n, None))?;
        let mut bank = PrefixBank::new(&self.base);
        for p in prefixes {
            bank.insert(p)?;
        }
        Ok(bank)
    }

    /// Multi-task fine-tuned copy of the base on the named sources (all if empty).
    pub fn train_multitask_base(&self, cfg: &ExperimentConfig, sources: &[&str], max_steps: Option<usize>) -> Result<(EncoderModel<T>, Vec<usize>)> {
        let tasks: Vec<&SuiteTask> = if sources.is_empty() {
            self.suite.sources.iter().collect()
        } else {
            sources.iter().map(|n| self.suite.source(n)).collect::<Result<_>>()?
        };
        let data: Vec<_> = tasks.iter().map(|t| &t.train).collect();
        let mut tc = cfg.multitask_train.clone();
        tc.seed = derive_seed(self.seed, "multitask", 0);
        if let Some(s) = max_steps {
            tc.epochs = None;
            tc.max_steps = Some(s);
        }
        let out = train_multitask(&self.base, &data, &tc, HeadVariant::MlpOnCls, self.prefix_head_seed())
            .map_err(|e| e.context(format!("seed {} multi-task training", self.seed)))?;
        Ok((out.model, out.steps_per_task))
    }
}

/// Accuracy of a fresh `attention_plus_mlp` head trained on fixed representations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadScore {
    pub dev: f64,
    pub test: f64,
}

pub fn score_fixed_reps<T: Scalar>(
    cfg: &ExperimentConfig,
    model: &EncoderModel<T>,
    slots: &[LayerPrefixSlots<T>],
    keep: Option<&[bool]>,
    target: &SuiteTask,
    head_seed: u64,
) -> Result<HeadScore> {
    let (dev, test) = eval_splits(target)?;
    let batch = 128;
    let train = extract_reps(model, slots, keep, &target.train, batch)?;
    let mut hc = cfg.head_train.clone();
    hc.seed = head_seed;
    let (head, _) = train_target_head(&train, &hc, HeadVariant::AttentionPlusMlp, head_seed)?;
    let dev = evaluate(&head, &extract_reps(model, slots, keep, dev, batch)?)?;
    let test = evaluate(&head, &extract_reps(model, slots, keep, test, batch)?)?;
    Ok(HeadScore { dev, test })
}

fn eval_splits(target: &SuiteTask) -> Result<(&crate::taskgen::LabeledDataset, &crate::taskgen::LabeledDataset)> {
    match (&target.dev, &target.test) {
        (Some(d), Some(t)) => Ok((d, t)),
        _ => Err(Error::Precondition(format!("target '{}' lacks dev/test splits", target.name()))),
    }
}

/// One accuracy measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub seed: u64,
    pub method: Method,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub removed: Option<Vec<String>>,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
    /// Optimizer steps spent producing the representation or model that was scored.
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub protocol: String,
    pub config: serde_json::Value,
    pub entries: Vec<ReportEntry>,
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl ExperimentReport {
    pub fn new(protocol: &str, config: serde_json::Value) -> Self {
        ExperimentReport { protocol: protocol.into(), config, entries: Vec::new(), notes: BTreeMap::new() }
    }

    pub fn methods(&self) -> Vec<Method> {
        self.entries.iter().map(|e| e.method).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.seed).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Targets in first-appearance order.
    pub fn targets(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.target) {
                out.push(e.target.clone());
            }
        }
        out
    }

    /// Mean test accuracy over every entry matching `filter`.
    pub fn average(&self, filter: impl Fn(&ReportEntry) -> bool) -> Option<f64> {
        mean(self.entries.iter().filter(|e| filter(e)).map(|e| e.test_accuracy))
    }

    pub fn method_average(&self, method: Method) -> Option<f64> {
        self.average(|e| e.method == method)
    }

    pub fn seed_average(&self, method: Method, seed: u64) -> Option<f64> {
        self.average(|e| e.method == method && e.seed == seed)
    }
}

/// Compare representation methods on every target, one seed at a time.
pub fn run_transfer<T: Scalar>(cfg: &ExperimentConfig, suite: Option<&Suite>, methods: &[Method]) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut report = ExperimentReport::new("transfer", serde_json::to_value(cfg).expect("config serializes"));
    let mut checksums = BTreeMap::new();
    for &seed in &cfg.seeds {
        let ctx = SeedContext::<T>::for_seed(cfg, suite, seed)?;
        let before = ctx.base.checksum();
        let bank = if methods.contains(&Method::PrefixFrozen) { Some(ctx.train_bank(cfg)?) } else { None };
        let entries = transfer_for_seed(cfg, &ctx, bank.as_ref(), methods)?;
        if ctx.base.checksum() != before {
            return Err(Error::FrozenBaseMutated(format!("transfer run, seed {seed}")));
        }
        checksums.insert(seed.to_string(), serde_json::Value::String(before));
        report.entries.extend(entries);
    }
    report.notes.insert("base_checksum".into(), serde_json::Value::Object(checksums.into_iter().collect()));
    Ok(report)
}

/// Transfer entries for one seed, reusing an already trained bank.
pub fn transfer_for_seed<T: Scalar>(
    cfg: &ExperimentConfig,
    ctx: &SeedContext<T>,
    bank: Option<&PrefixBank<T>>,
    methods: &[Method],
) -> Result<Vec<ReportEntry>> {
    let seed = ctx.seed;
    let mtl = if methods.contains(&Method::MultitaskFrozen) { Some(ctx.train_multitask_base(cfg, &[], None)?) } else { None };
    let slots = match bank {
        Some(b) => b.compose_for(&ctx.base)?,
        None if methods.contains(&Method::PrefixFrozen) => {
            return Err(Error::Precondition("prefix method requested without a bank".into()));
        }
        None => Vec::new(),
    };
    let prefix_steps = bank.map_or(0, |b| b.prefixes().iter().map(|p| p.meta.steps).sum());
    let mut jobs = Vec::new();
    for (ti, _) in ctx.suite.targets.iter().enumerate() {
        for &m in methods {
            jobs.push((ti, m));
        }
    }
    par_map(cfg.threads, jobs, |(ti, method)| {
        let target = &ctx.suite.targets[ti];
        let head_seed = ctx.target_head_seed(ti);
        let ctx_msg = || format!("seed {seed}, method {}, target {}", method.name(), target.name());
        let (score, steps) = match method {
            Method::SimpleFtFrozen => (score_fixed_reps(cfg, &ctx.base, &[], None, target, head_seed), 0),
            Method::PrefixFrozen => (score_fixed_reps(cfg, &ctx.base, &slots, None, target, head_seed), prefix_steps),
            Method::MultitaskFrozen => {
                let (m, steps) = mtl.as_ref().expect("trained above");
                (score_fixed_reps(cfg, m, &[], None, target, head_seed), steps.iter().sum())
            }
            Method::SimpleFtUnfrozen => {
                let mut tc = cfg.finetune_train.clone();
                tc.seed = head_seed;
                let steps = tc.total_steps(target.train.len());
                let r = finetune(&ctx.base, &target.train, &tc, head_seed).and_then(|(model, head, _)| {
                    let (dev, test) = eval_splits(target)?;
                    Ok(HeadScore { dev: evaluate_model(&model, &head, &[], dev)?, test: evaluate_model(&model, &head, &[], test)? })
                });
                (r, steps)
            }
        };
        let score = score.map_err(|e| e.context(ctx_msg()))?;
        Ok(ReportEntry {
            seed,
            method,
            target: target.name().to_string(),
            round: None,
            order: None,
            removed: None,
            dev_accuracy: score.dev,
            test_accuracy: score.test,
            steps,
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalResult {
    pub target: String,
    pub removed: Vec<String>,
    pub dev_accuracy: f64,
    pub test_accuracy: f64,
    /// 1-based position after sorting by dev accuracy.
    pub rank: usize,
}

/// All subsets of `0..n` with at most `k` elements: by size, then lexicographically.
pub fn subsets_up_to(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..k.min(n) {
        let mut next = Vec::new();
        for s in &frontier {
            let start = s.last().map_or(0, |&l| l + 1);
            for i in start..n {
                let mut t = s.clone();
                t.push(i);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Evaluate the target with every removal subset of at most `k_max` prefixes.
///
/// Removal is done through slot masks over the full bank; no prefix or base
/// parameter is trained. The head seed is shared by all subsets. Results are
/// sorted by dev accuracy, ties kept in enumeration order.
pub fn run_removal_search<T: Scalar>(
    cfg: &ExperimentConfig,
    base: &EncoderModel<T>,
    bank: &PrefixBank<T>,
    target: &SuiteTask,
    k_max: usize,
    head_seed: u64,
) -> Result<Vec<RemovalResult>> {
    if k_max > bank.len() {
        return Err(Error::Precondition(format!("k_max {k_max} exceeds bank size {}", bank.len())));
    }
    let before_base = base.checksum();
    let before_bank: Vec<Vec<u8>> = bank.prefixes().iter().map(|p| p.to_container().to_bytes()).collect();
    let names: Vec<String> = bank.tasks().iter().map(|s| s.to_string()).collect();
    let mut full = bank.clone();
    full.set_enabled(&names)?;
    let (slots, _) = full.compose_all_with_mask()?;
    let subsets = subsets_up_to(bank.len(), k_max);
    let scored = par_map(cfg.threads, subsets, |subset| {
        let mut b = full.clone();
        for &i in &subset {
            b.disable(&names[i])?;
        }
        let (_, keep) = b.compose_all_with_mask()?;
        let score = score_fixed_reps(cfg, base, &slots, Some(&keep), target, head_seed)?;
        Ok((subset.iter().map(|&i| names[i].clone()).collect::<Vec<_>>(), score))
    })?;
    if base.checksum() != before_base {
        return Err(Error::FrozenBaseMutated("removal search".into()));
    }
    let after_bank: Vec<Vec<u8>> = bank.prefixes().iter().map(|p| p.to_container().to_bytes()).collect();
    if after_bank != before_bank {
        return Err(Error::FrozenBaseMutated("removal search (prefix bank)".into()));
    }
    let mut results: Vec<RemovalResult> = scored
        .into_iter()
        .map(|(removed, s)| RemovalResult { target: target.name().to_string(), removed, dev_accuracy: s.dev, test_accuracy: s.test, rank: 0 })
        .collect();
    results.sort_by(|a, b| b.dev_accuracy.total_cmp(&a.dev_accuracy));
    for (i, r) in results.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(results)
}

/// Best result (by dev accuracy) among subsets removing at most `k` prefixes.
pub fn best_with_at_most(results: &[RemovalResult], k: usize) -> Option<&RemovalResult> {
    results.iter().filter(|r| r.removed.len() <= k).min_by_key(|r| r.rank)
}

/// Removal-search results as report entries of the prefix method.
pub fn removal_entries(seed: u64, results: &[RemovalResult]) -> Vec<ReportEntry> {
    results
        .iter()
        .map(|r| ReportEntry {
            seed,
            method: Method::PrefixFrozen,
            target: r.target.clone(),
            round: None,
            order: None,
            removed: Some(r.removed.clone()),
            dev_accuracy: r.dev_accuracy,
            test_accuracy: r.test_accuracy,
            steps: 0,
        })
        .collect()
}

/// Removal search for every target of every seed.
pub fn run_removal<T: Scalar>(cfg: &ExperimentConfig, suite: Option<&Suite>, k_max: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut report = ExperimentReport::new("removal", serde_json::to_value(cfg).expect("config serializes"));
    report.notes.insert("selection".into(), "dev".into());
    for &seed in &cfg.seeds {
        let ctx = SeedContext::<T>::for_seed(cfg, suite, seed)?;
        let bank = ctx.train_bank(cfg)?;
        for (ti, target) in ctx.suite.targets.iter().enumerate() {
            let results = run_removal_search(cfg, &ctx.base, &bank, target, k_max, ctx.target_head_seed(ti))?;
            report.entries.extend(removal_entries(seed, &results));
        }
    }
    Ok(report)
}

/// `n` distinct random permutations of `tasks` (fewer if `tasks` has fewer permutations).
pub fn default_orders(tasks: &[String], n: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "orders", 0));
    let max: usize = (1..=tasks.len()).product();
    let mut out: Vec<Vec<String>> = Vec::new();
    while out.len() < n.min(max) {
        let mut p = tasks.to_vec();
        p.shuffle(&mut rng);
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out
}

/// Every order must be a permutation of `tasks`.
pub fn validate_orders(orders: &[Vec<String>], tasks: &[String]) -> Result<()> {
    let want: BTreeSet<&String> = tasks.iter().collect();
    for (i, o) in orders.iter().enumerate() {
        let got: BTreeSet<&String> = o.iter().collect();
        if o.len() != tasks.len() || got != want {
            return Err(Error::Config(format!("order {i} is not a permutation of the source tasks: {o:?}")));
        }
    }
    if orders.is_empty() {
        return Err(Error::Config("no orders given".into()));
    }
    Ok(())
}

/// Per-target (prefix, multi-task) scores of one task set, plus realised multi-task steps per task.
type SetScores = (Vec<(String, HeadScore, HeadScore)>, Vec<usize>);

/// Rounds add one source task each. With `budget` steps per round, the prefix
/// method trains only the new task's prefix and composes all prefixes so far;
/// the multi-task method retrains from the base on every task so far.
///
/// Results depend on the set of tasks in a round, not on their arrival
/// order, so each distinct set is trained and scored once.
pub fn run_sequential_add<T: Scalar>(
    cfg: &ExperimentConfig,
    suite: Option<&Suite>,
    seed: u64,
    orders: &[Vec<String>],
    budget: usize,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let ctx = SeedContext::<T>::for_seed(cfg, suite, seed)?;
    let sources: Vec<String> = ctx.suite.sources.iter().map(|s| s.name().to_string()).collect();
    validate_orders(orders, &sources)?;
    if budget < sources.len() {
        return Err(Error::Config(format!("budget {budget} gives some round less than one step per task")));
    }
    let mut report = ExperimentReport::new("sequential_add", serde_json::to_value(cfg).expect("config serializes"));
    report.notes.insert("budget".into(), budget.into());
    report.notes.insert("orders".into(), serde_json::to_value(orders).expect("orders serialize"));
    report.notes.insert("seed".into(), seed.into());

    let prefixes = par_map(cfg.threads, sources.clone(), |n| ctx.train_source_prefix(cfg, &n, Some(budget)))?;
    let prefix_bytes: Vec<Vec<u8>> = prefixes.iter().map(|p| p.to_container().to_bytes()).collect();
    let by_name: HashMap<&str, &TaskPrefix<T>> = prefixes.iter().map(|p| (p.task_name.as_str(), p)).collect();

    let mut sets: BTreeSet<Vec<String>> = BTreeSet::new();
    for o in orders {
        for r in 1..=o.len() {
            let mut s = o[..r].to_vec();
            s.sort();
            sets.insert(s);
        }
    }
    let sets: Vec<Vec<String>> = sets.into_iter().collect();

    let scored = par_map(cfg.threads, sets.clone(), |set| {
        let mut bank = PrefixBank::new(&ctx.base);
        for n in &set {
            bank.insert(by_name[n.as_str()].clone())?;
        }
        let slots = bank.compose_for(&ctx.base)?;
        let names: Vec<&str> = set.iter().map(String::as_str).collect();
        let (mtl, shares) = ctx.train_multitask_base(cfg, &names, Some(budget))?;
        let mut out = Vec::new();
        for (ti, target) in ctx.suite.targets.iter().enumerate() {
            let hs = ctx.target_head_seed(ti);
            let p = score_fixed_reps(cfg, &ctx.base, &slots, None, target, hs)?;
            let m = score_fixed_reps(cfg, &mtl, &[], None, target, hs)?;
            out.push((target.name().to_string(), p, m));
        }
        Ok((out, shares))
    })?;
    let cache: HashMap<&Vec<String>, &SetScores> = sets.iter().zip(&scored).collect();

    let mut shares_note = BTreeMap::new();
    for (oi, order) in orders.iter().enumerate() {
        for r in 1..=order.len() {
            let mut key = order[..r].to_vec();
            key.sort();
            let (scores, shares) = cache[&key];
            shares_note.insert(key.join("+"), serde_json::to_value(shares).expect("shares serialize"));
            for (target, p, m) in scores {
                for (method, s, steps) in [(Method::PrefixFrozen, p, budget), (Method::MultitaskFrozen, m, budget)] {
                    report.entries.push(ReportEntry {
                        seed,
                        method,
                        target: target.clone(),
                        round: Some(r),
                        order: Some(oi),
                        removed: None,
                        dev_accuracy: s.dev,
                        test_accuracy: s.test,
                        steps,
                    });
                }
            }
        }
    }
    report.notes.insert("multitask_steps_per_task".into(), serde_json::Value::Object(shares_note.into_iter().collect()));
    let after: Vec<Vec<u8>> = prefixes.iter().map(|p| p.to_container().to_bytes()).collect();
    if after != prefix_bytes {
        return Err(Error::FrozenBaseMutated("sequential add (prefixes changed across rounds)".into()));
    }
    Ok(report)
}

/// Smallest candidate budget whose single-task multi-task run reaches
/// `fraction` of the accuracy reached with the largest candidate, measured on
/// the source task's own training data.
pub fn calibrate_budget<T: Scalar>(cfg: &ExperimentConfig, ctx: &SeedContext<T>, source: &str, candidates: &[usize], fraction: f64) -> Result<(usize, Vec<(usize, f64)>)> {
    let task = ctx.suite.source(source)?;
    let mut curve = Vec::new();
    for &b in candidates {
        let mut tc = cfg.multitask_train.clone();
        tc.seed = derive_seed(ctx.seed, "multitask", 0);
        tc.epochs = None;
        tc.max_steps = Some(b);
        let mut out = train_multitask(&ctx.base, &[&task.train], &tc, HeadVariant::MlpOnCls, ctx.prefix_head_seed())?;
        let acc = evaluate_model(&out.model, &out.heads.remove(0), &[], &task.train)?;
        curve.push((b, acc));
    }
    let converged = curve.last().map_or(0.0, |c| c.1);
    let chosen = curve.iter().find(|(_, a)| *a >= fraction * converged).map_or(0, |c| c.0);
    Ok((chosen, curve))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Table,
    Csv,
    JsonLines,
}

const CSV_HEADER: &str = "seed,method,target,round,order,removed,dev_accuracy,test_accuracy,steps";

/// Render a report. CSV and JSON lines hold every entry losslessly; the table
/// averages test accuracy over seeds and orders.
pub fn render_report(report: &ExperimentReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::JsonLines => {
            let mut s = String::new();
            for e in &report.entries {
                s.push_str(&serde_json::to_string(e).expect("entry serializes"));
                s.push('\n');
            }
            s
        }
        ReportFormat::Csv => {
            let mut s = format!("{CSV_HEADER}\n");
            for e in &report.entries {
                let opt = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
                let removed = e.removed.as_ref().map_or(String::new(), |r| if r.is_empty() { "-".into() } else { r.join("+") });
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{}",
                    e.seed,
                    e.method.name(),
                    e.target,
                    opt(e.round),
                    opt(e.order),
                    removed,
                    e.dev_accuracy,
                    e.test_accuracy,
                    e.steps
                );
            }
            s
        }
        ReportFormat::Table => render_table(report),
    }
}

/// Inverse of the CSV rendering.
pub fn parse_csv(text: &str) -> Result<Vec<ReportEntry>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Format("unexpected CSV header".into()));
    }
    let bad = |n: usize, m: &str| Error::Parse { path: "<csv>".into(), line: n + 2, msg: m.to_string() };
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(bad(n, "expected 9 fields"));
        }
        let opt = |s: &str| -> Result<Option<usize>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(n, "bad integer"))
            }
        };
        let removed = match f[5] {
            "" => None,
            "-" => Some(Vec::new()),
            r => Some(r.split('+').map(str::to_string).collect()),
        };
        out.push(ReportEntry {
            seed: f[0].parse().map_err(|_| bad(n, "bad seed"))?,
            method: Method::parse(f[1]).map_err(|_| bad(n, "bad method"))?,
            target: f[2].to_string(),
            round: opt(f[3])?,
            order: opt(f[4])?,
            removed,
            dev_accuracy: f[6].parse().map_err(|_| bad(n, "bad dev accuracy"))?,
            test_accuracy: f[7].parse().map_err(|_| bad(n, "bad test accuracy"))?,
            steps: f[8].parse().map_err(|_| bad(n, "bad steps"))?,
        });
    }
    Ok(out)
}

type RowFilter<'a> = Box<dyn Fn(&ReportEntry) -> bool + 'a>;

fn render_table(report: &ExperimentReport) -> String {
    let targets = report.targets();
    let mut rows: Vec<(String, RowFilter<'_>)> = Vec::new();
    let mut keys: Vec<(Option<usize>, Method, Option<usize>)> = report
        .entries
        .iter()
        .map(|e| (e.round, e.method, e.removed.as_ref().map(Vec::len)))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    keys.sort();
    for (round, method, removed) in keys {
        let mut label = method.name().to_string();
        if let Some(r) = round {
            label = format!("round {r} {label}");
        }
        if let Some(k) = removed {
            label = format!("{label} remove {k}");
        }
        rows.push((label, Box::new(move |e: &ReportEntry| e.round == round && e.method == method && e.removed.as_ref().map(Vec::len) == removed)));
    }
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:width$}", "method");
    for t in &targets {
        let _ = write!(s, " {t:>16}");
    }
    s.push_str(&format!(" {:>8}\n", "avg"));
    for (label, filter) in &rows {
        let _ = write!(s, "{label:width$}");
        let mut per_target = Vec::new();
        for t in &targets {
            let v = if report.removed_rows() {
                best_removed_mean(report, filter, t)
            } else {
                report.average(|e| filter(e) && &e.target == t)
            };
            match v {
                Some(v) => {
                    per_target.push(v);
                    let _ = write!(s, " {:>16.2}", 100.0 * v);
                }
                None => {
                    let _ = write!(s, " {:>16}", "-");
                }
            }
        }
        match mean(per_target) {
            Some(a) => {
                let _ = writeln!(s, " {:>8.2}", 100.0 * a);
            }
            None => {
                let _ = writeln!(s, " {:>8}", "-");
            }
        }
    }
    s
}

impl ExperimentReport {
    fn removed_rows(&self) -> bool {
        self.entries.iter().any(|e| e.removed.is_some())
    }
}

/// For removal reports: per seed, test accuracy of the dev-best subset among
/// the rows matched by `filter`, averaged over seeds.
fn best_removed_mean(report: &ExperimentReport, filter: &dyn Fn(&ReportEntry) -> bool, target: &str) -> Option<f64> {
    let mut best: BTreeMap<u64, &ReportEntry> = BTreeMap::new();
    for e in report.entries.iter().filter(|e| filter(e) && e.target == target) {
        match best.get(&e.seed) {
            Some(b) if b.dev_accuracy >= e.dev_accuracy => {}
            _ => {
                best.insert(e.seed, e);
            }
        }
    }
    mean(best.values().map(|e| e.test_accuracy))
}
