//! Synthetic classification tasks with planted cue tokens, suites of related
//! source and target tasks, and JSON-lines dataset files.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::vocab::{Vocab, CLS, NUM_SPECIAL, SEP};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Token-id sequences (already wrapped in CLS/SEP) with integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub name: String,
    pub examples: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, examples: Vec<Vec<u32>>, labels: Vec<usize>, class_count: usize, split: Split) -> Result<Self> {
        let name = name.into();
        if examples.is_empty() {
            return Err(Error::Precondition(format!("dataset '{name}' is empty")));
        }
        if examples.len() != labels.len() {
            return Err(Error::Precondition(format!("dataset '{name}': {} examples, {} labels", examples.len(), labels.len())));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::Precondition(format!("dataset '{name}': label {l} at index {i} outside [0, {class_count})")));
        }
        Ok(LabeledDataset { name, examples, labels, class_count, split })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.examples.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_count];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> LabeledDataset {
        LabeledDataset {
            name: self.name.clone(),
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            split,
        }
    }
}

/// How cue tokens determine the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Label 1 iff any cue token occurs.
    Presence,
    /// Label 1 iff tokens from the first half of the cue set outnumber tokens from the second half.
    Majority,
    /// Sentence pair, one cue per segment; label 1 iff both segments carry the same cue.
    PairAgreement,
}

/// Relation of a task to the target it was designed around.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Aligned,
    Unrelated,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub concept: usize,
    pub cues: Vec<u32>,
    pub rule: LabelRule,
    pub noise_rate: f64,
    pub relation: Relation,
    /// Inclusive token-count range of each text segment, excluding specials.
    pub segment_len: (usize, usize),
}

impl ConceptSpec {
    fn validate(&self, vocab: &Vocab) -> Result<()> {
        if !(0.0..0.5).contains(&self.noise_rate) {
            return Err(Error::Precondition(format!("noise_rate {} outside [0, 0.5)", self.noise_rate)));
        }
        let range = vocab.content_ids();
        if let Some(c) = self.cues.iter().find(|c| !range.contains(c)) {
            return Err(Error::Precondition(format!("cue id {c} is not a content word")));
        }
        let min_cues = match self.rule {
            LabelRule::Presence => 1,
            LabelRule::Majority | LabelRule::PairAgreement => 2,
        };
        if self.cues.len() < min_cues {
            return Err(Error::Precondition(format!("{:?} needs at least {min_cues} cue tokens", self.rule)));
        }
        if self.segment_len.0 < 4 || self.segment_len.0 > self.segment_len.1 {
            return Err(Error::Precondition(format!("segment length range {:?} must start at 4 or more", self.segment_len)));
        }
        if range.len() <= self.cues.len() {
            return Err(Error::Precondition("vocabulary has no filler words left".into()));
        }
        Ok(())
    }

    fn halves(&self) -> (&[u32], &[u32]) {
        self.cues.split_at(self.cues.len() / 2)
    }

    /// Noise-free label of a tokenized example, recomputed from the rule.
    pub fn replay(&self, ids: &[u32]) -> usize {
        let segments = split_segments(ids);
        let count = |seg: &[u32], set: &[u32]| seg.iter().filter(|t| set.contains(t)).count();
        let label = match self.rule {
            LabelRule::Presence => usize::from(segments.iter().any(|s| count(s, &self.cues) > 0)),
            LabelRule::Majority => {
                let (a, b) = self.halves();
                let ca: usize = segments.iter().map(|s| count(s, a)).sum();
                let cb: usize = segments.iter().map(|s| count(s, b)).sum();
                usize::from(ca > cb)
            }
            LabelRule::PairAgreement => {
                let first = |s: &[u32]| s.iter().copied().find(|t| self.cues.contains(t));
                let same = segments.len() == 2 && first(segments[0]).is_some() && first(segments[0]) == first(segments[1]);
                usize::from(same)
            }
        };
        if self.relation == Relation::Adversarial {
            1 - label
        } else {
            label
        }
    }
}

fn split_segments(ids: &[u32]) -> Vec<&[u32]> {
    let body = ids.strip_prefix(&[CLS]).unwrap_or(ids);
    body.split(|&t| t == SEP).filter(|s| !s.is_empty()).collect()
}

/// Sample a segment of filler words with the given cue tokens planted at distinct random positions.
fn segment(rng: &mut ChaCha8Rng, filler: &[u32], len_range: (usize, usize), planted: &[u32]) -> Vec<u32> {
    let len = rng.random_range(len_range.0..=len_range.1).max(planted.len());
    let mut s: Vec<u32> = (0..len).map(|_| filler[rng.random_range(0..filler.len())]).collect();
    let mut positions: Vec<usize> = (0..len).collect();
    positions.shuffle(rng);
    for (&p, &c) in positions.iter().zip(planted) {
        s[p] = c;
    }
    s
}

fn pick(rng: &mut ChaCha8Rng, set: &[u32], n: usize) -> Vec<u32> {
    (0..n).map(|_| set[rng.random_range(0..set.len())]).collect()
}

/// Generate `size` examples with exactly balanced classes, then flip
/// `⌊noise_rate·size/2⌋` labels in each class. Adversarial specs flip every label.
pub fn generate_task(name: &str, spec: &ConceptSpec, size: usize, seed: u64, vocab: &Vocab, split: Split) -> Result<LabeledDataset> {
    spec.validate(vocab)?;
    if size < 4 {
        return Err(Error::Precondition(format!("size {size} is below 2 examples per class")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filler: Vec<u32> = vocab.content_ids().filter(|t| !spec.cues.contains(t)).collect();
    let mut labels: Vec<usize> = (0..size).map(|i| i % 2).collect();
    labels.shuffle(&mut rng);
    let mut examples = Vec::with_capacity(size);
    for &y in &labels {
        let ids = match spec.rule {
            LabelRule::Presence => {
                let planted = if y == 1 {
                    let k = rng.random_range(1..=2);
                    pick(&mut rng, &spec.cues, k)
                } else {
                    Vec::new()
                };
                let mut ids = vec![CLS];
                ids.extend(segment(&mut rng, &filler, spec.segment_len, &planted));
                ids.push(SEP);
                ids
            }
            LabelRule::Majority => {
                let (a, b) = spec.halves();
                let hi = rng.random_range(1..=3);
                let lo = rng.random_range(0..hi);
                let (ka, kb) = if y == 1 { (hi, lo) } else { (lo, hi) };
                let mut planted = pick(&mut rng, a, ka);
                planted.extend(pick(&mut rng, b, kb));
                let mut ids = vec![CLS];
                ids.extend(segment(&mut rng, &filler, spec.segment_len, &planted));
                ids.push(SEP);
                ids
            }
            LabelRule::PairAgreement => {
                let n = spec.cues.len();
                let i = rng.random_range(0..n);
                let j = if y == 1 { i } else { (i + rng.random_range(1..n)) % n };
                let mut ids = vec![CLS];
                ids.extend(segment(&mut rng, &filler, spec.segment_len, &[spec.cues[i]]));
                ids.push(SEP);
                ids.extend(segment(&mut rng, &filler, spec.segment_len, &[spec.cues[j]]));
                ids.push(SEP);
                ids
            }
        };
        examples.push(ids);
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let flips = (spec.noise_rate * size as f64 / 2.0).floor() as usize;
    for class in &mut by_class {
        class.shuffle(&mut rng);
        for &i in class.iter().take(flips) {
            labels[i] = 1 - labels[i];
        }
    }
    if spec.relation == Relation::Adversarial {
        labels.iter_mut().for_each(|l| *l = 1 - *l);
    }
    LabeledDataset::new(name, examples, labels, 2, split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDef {
    pub name: String,
    pub role: Role,
    pub spec: ConceptSpec,
    /// Target the relation refers to, if any.
    pub related_target: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteTask {
    pub def: TaskDef,
    pub train: LabeledDataset,
    pub dev: Option<LabeledDataset>,
    pub test: Option<LabeledDataset>,
}

impl SuiteTask {
    pub fn name(&self) -> &str {
        &self.def.name
    }
}

/// Sizes and shape of a generated suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub content_words: usize,
    pub cues_per_concept: usize,
    pub source_train: usize,
    pub target_train: usize,
    pub target_test: usize,
    pub noise_rate: f64,
    pub segment_len: (usize, usize),
    /// Concept clusters beyond the five the default tasks use.
    pub spare_concepts: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            content_words: 1996,
            cues_per_concept: 8,
            source_train: 2000,
            target_train: 200,
            target_test: 500,
            noise_rate: 0.1,
            segment_len: (6, 12),
            spare_concepts: 3,
        }
    }
}

impl SuiteConfig {
    /// Longest tokenized example the suite can produce.
    pub fn max_tokens(&self) -> usize {
        2 * self.segment_len.1 + 3
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub seed: u64,
    pub config: SuiteConfig,
    pub vocab: Vocab,
    /// Disjoint word clusters that share a latent concept direction.
    pub concepts: Vec<Vec<u32>>,
    pub sources: Vec<SuiteTask>,
    pub targets: Vec<SuiteTask>,
}

/// Index of the concept that only a target uses. The base encoder carries no
/// planted direction for it.
pub const NOVEL_CONCEPT: usize = 4;

/// Name of the target the default suite plants an adversarial source against.
pub const ADVERSARIAL_TARGET: &str = "tgt_alpha";
pub const ADVERSARIAL_SOURCE: &str = "src_alpha_adv";

/// Disjoint clusters of `cues_per_concept` content words, drawn at random.
pub fn suite_concepts(cfg: &SuiteConfig, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    let mut pool: Vec<u32> = (NUM_SPECIAL..NUM_SPECIAL + cfg.content_words as u32).collect();
    pool.shuffle(&mut rng);
    pool.chunks_exact(cfg.cues_per_concept).take(5 + cfg.spare_concepts).map(<[u32]>::to_vec).collect()
}

/// Task definitions of the default suite: five sources (three from the alpha
/// concept family, one unrelated, one adversarial to `tgt_alpha`) and four targets.
pub fn default_task_defs(cfg: &SuiteConfig, concepts: &[Vec<u32>]) -> Vec<TaskDef> {
    let k = cfg.cues_per_concept;
    let [alpha, beta, gamma, delta, novel] = [0, 1, 2, 3, NOVEL_CONCEPT].map(|i| concepts[i].clone());
    let half = k / 2;
    let spec = |concept: usize, cues: Vec<u32>, rule: LabelRule, relation: Relation| ConceptSpec {
        concept,
        cues,
        rule,
        noise_rate: cfg.noise_rate,
        relation,
        segment_len: cfg.segment_len,
    };
    let def = |name: &str, role: Role, spec: ConceptSpec, rel: Option<&str>| TaskDef {
        name: name.into(),
        role,
        spec,
        related_target: rel.map(str::to_string),
    };
    let alpha_beta: Vec<u32> = alpha[..half].iter().chain(&beta[..half]).copied().collect();
    vec![
        def("src_alpha_lo", Role::Source, spec(0, alpha[..half + 1].to_vec(), LabelRule::Presence, Relation::Aligned), Some(ADVERSARIAL_TARGET)),
        def("src_alpha_hi", Role::Source, spec(0, alpha[half - 1..].to_vec(), LabelRule::Presence, Relation::Aligned), Some(ADVERSARIAL_TARGET)),
        def("src_alpha_beta", Role::Source, spec(0, alpha_beta.clone(), LabelRule::Majority, Relation::Aligned), Some("tgt_alpha_beta")),
        def("src_delta", Role::Source, spec(3, delta.clone(), LabelRule::Presence, Relation::Unrelated), None),
        def(ADVERSARIAL_SOURCE, Role::Source, spec(0, alpha.clone(), LabelRule::Presence, Relation::Adversarial), Some(ADVERSARIAL_TARGET)),
        def(ADVERSARIAL_TARGET, Role::Target, spec(0, alpha.clone(), LabelRule::Presence, Relation::Aligned), None),
        def("tgt_alpha_beta", Role::Target, spec(0, alpha_beta, LabelRule::Majority, Relation::Aligned), None),
        def("tgt_gamma_pair", Role::Target, spec(2, gamma, LabelRule::PairAgreement, Relation::Unrelated), None),
        def("tgt_novel", Role::Target, spec(NOVEL_CONCEPT, novel, LabelRule::Presence, Relation::Unrelated), None),
    ]
}

fn task_seed(seed: u64, index: usize, part: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((index as u64) << 8) ^ part
}

/// Generate every dataset for a list of task definitions.
///
/// Sources get a training split only. Targets get a training split plus an
/// evaluation pool of `target_test·3/2` examples divided 1/3 dev, 2/3 test.
pub fn build_suite(cfg: &SuiteConfig, seed: u64, concepts: Vec<Vec<u32>>, defs: Vec<TaskDef>) -> Result<Suite> {
    let vocab = Vocab::synthetic(cfg.content_words);
    let mut sources = Vec::new();
    let mut targets = Vec::new();
    for (i, def) in defs.into_iter().enumerate() {
        match def.role {
            Role::Source => {
                let train = generate_task(&def.name, &def.spec, cfg.source_train, task_seed(seed, i, 1), &vocab, Split::Train)?;
                sources.push(SuiteTask { def, train, dev: None, test: None });
            }
            Role::Target => {
                let train = generate_task(&def.name, &def.spec, cfg.target_train, task_seed(seed, i, 1), &vocab, Split::Train)?;
                let pool_size = cfg.target_test * 3 / 2;
                let pool = generate_task(&def.name, &def.spec, pool_size, task_seed(seed, i, 2), &vocab, Split::Test)?;
                let (dev, test) = split_dev_test(&pool, task_seed(seed, i, 3));
                targets.push(SuiteTask { def, train, dev: Some(dev), test: Some(test) });
            }
        }
    }
    Ok(Suite { seed, config: cfg.clone(), vocab, concepts, sources, targets })
}

pub fn make_suite(seed: u64) -> Result<Suite> {
    make_suite_with(&SuiteConfig::default(), seed)
}

pub fn make_suite_with(cfg: &SuiteConfig, seed: u64) -> Result<Suite> {
    if cfg.cues_per_concept < 4 || cfg.content_words < (6 + cfg.spare_concepts) * cfg.cues_per_concept {
        return Err(Error::Config(format!(
            "{} content words cannot hold {} concepts of {} cues plus filler",
            cfg.content_words,
            5 + cfg.spare_concepts,
            cfg.cues_per_concept
        )));
    }
    let concepts = suite_concepts(cfg, seed);
    let defs = default_task_defs(cfg, &concepts);
    build_suite(cfg, seed, concepts, defs)
}

/// Deterministic shuffle, then the first `⌊n/3⌋` examples become dev and the rest test.
pub fn split_dev_test(pool: &LabeledDataset, seed: u64) -> (LabeledDataset, LabeledDataset) {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_dev = pool.len() / 3;
    (pool.subset(&idx[..n_dev], Split::Dev), pool.subset(&idx[n_dev..], Split::Test))
}

impl Suite {
    /// Concept clusters the base encoder knows: every cluster except the novel one.
    pub fn base_concepts(&self) -> Vec<Vec<u32>> {
        self.concepts.iter().enumerate().filter(|&(i, _)| i != NOVEL_CONCEPT).map(|(_, c)| c.clone()).collect()
    }

    pub fn source(&self, name: &str) -> Result<&SuiteTask> {
        self.sources.iter().find(|t| t.name() == name).ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    pub fn target(&self, name: &str) -> Result<&SuiteTask> {
        self.targets.iter().find(|t| t.name() == name).ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    pub fn max_tokens(&self) -> usize {
        self.sources
            .iter()
            .chain(&self.targets)
            .flat_map(|t| [Some(&t.train), t.dev.as_ref(), t.test.as_ref()])
            .flatten()
            .map(LabeledDataset::max_len)
            .max()
            .unwrap_or(0)
    }

    /// Write the vocabulary, every dataset as JSON lines, and `suite.json`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let vocab_path = dir.join("vocab.json");
        write_json(&vocab_path, &self.vocab)?;
        let mut entries = Vec::new();
        for t in self.sources.iter().chain(&self.targets) {
            let mut files = ManifestFiles { train: format!("{}.train.jsonl", t.name()), dev: None, test: None };
            write_dataset(&dir.join(&files.train), &t.train, &self.vocab)?;
            if let Some(dev) = &t.dev {
                let f = format!("{}.dev.jsonl", t.name());
                write_dataset(&dir.join(&f), dev, &self.vocab)?;
                files.dev = Some(f);
            }
            if let Some(test) = &t.test {
                let f = format!("{}.test.jsonl", t.name());
                write_dataset(&dir.join(&f), test, &self.vocab)?;
                files.test = Some(f);
            }
            entries.push(ManifestEntry { def: t.def.clone(), files });
        }
        let manifest = SuiteManifest {
            seed: self.seed,
            config: self.config.clone(),
            vocab: "vocab.json".into(),
            concepts: self.concepts.clone(),
            tasks: entries,
        };
        let path = dir.join("suite.json");
        write_json(&path, &manifest)?;
        Ok(path)
    }

    /// Load a suite from its manifest. Targets without a dev file have their
    /// test file split 1/3 dev, 2/3 test.
    pub fn load(manifest_path: &Path) -> Result<Suite> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let m: SuiteManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: manifest_path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let vocab_path = dir.join(&m.vocab);
        let vocab_text = fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let vocab: Vocab = serde_json::from_str(&vocab_text).map_err(|e| Error::Parse {
            path: vocab_path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let mut sources = Vec::new();
        let mut targets = Vec::new();
        for (i, e) in m.tasks.into_iter().enumerate() {
            let train = load_dataset(&dir.join(&e.files.train), &vocab, &e.def.name, Split::Train)?;
            let (dev, test) = match (&e.files.dev, &e.files.test) {
                (Some(d), Some(t)) => (
                    Some(load_dataset(&dir.join(d), &vocab, &e.def.name, Split::Dev)?),
                    Some(load_dataset(&dir.join(t), &vocab, &e.def.name, Split::Test)?),
                ),
                (None, Some(t)) => {
                    let pool = load_dataset(&dir.join(t), &vocab, &e.def.name, Split::Test)?;
                    let (d, t) = split_dev_test(&pool, task_seed(m.seed, i, 3));
                    (Some(d), Some(t))
                }
                _ => (None, None),
            };
            let task = SuiteTask { def: e.def, train, dev, test };
            match task.def.role {
                Role::Source => sources.push(task),
                Role::Target => targets.push(task),
            }
        }
        Ok(Suite { seed: m.seed, config: m.config, vocab, concepts: m.concepts, sources, targets })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub train: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub def: TaskDef,
    pub files: ManifestFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub seed: u64,
    pub config: SuiteConfig,
    pub vocab: String,
    #[serde(default)]
    pub concepts: Vec<Vec<u32>>,
    pub tasks: Vec<ManifestEntry>,
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text2: Option<String>,
    label: usize,
}

/// One `{"text", "text2"?, "label"}` object per line.
pub fn write_dataset(path: &Path, ds: &LabeledDataset, vocab: &Vocab) -> Result<()> {
    let mut out = Vec::new();
    for (ids, &label) in ds.examples.iter().zip(&ds.labels) {
        let mut segs = vocab.detokenize(ids).into_iter();
        let text = segs.next().unwrap_or_default();
        let text2 = segs.next();
        serde_json::to_writer(&mut out, &Record { text, text2, label }).expect("record serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Read a JSON-lines dataset. Blank lines are skipped; the class count is
/// one more than the largest label.
pub fn load_dataset(path: &Path, vocab: &Vocab, name: &str, split: Split) -> Result<LabeledDataset> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        examples.push(match &r.text2 {
            Some(t2) => vocab.tokenize_pair(&r.text, t2),
            None => vocab.tokenize(&r.text),
        });
        labels.push(r.label);
    }
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    LabeledDataset::new(name, examples, labels, class_count, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(rule: LabelRule, relation: Relation, noise: f64) -> ConceptSpec {
        ConceptSpec { concept: 0, cues: vec![10, 11, 12, 13], rule, noise_rate: noise, relation, segment_len: (6, 10) }
    }

    #[test]
    fn noise_bounds_are_enforced() {
        let v = Vocab::synthetic(50);
        let s = spec(LabelRule::Presence, Relation::Aligned, 0.5);
        assert!(matches!(generate_task("t", &s, 100, 1, &v, Split::Train), Err(Error::Precondition(_))));
        let s = spec(LabelRule::Presence, Relation::Aligned, 0.0);
        assert!(generate_task("t", &s, 3, 1, &v, Split::Train).is_err());
    }

    #[test]
    fn classes_stay_balanced_under_noise() {
        let v = Vocab::synthetic(50);
        for rule in [LabelRule::Presence, LabelRule::Majority, LabelRule::PairAgreement] {
            let ds = generate_task("t", &spec(rule, Relation::Aligned, 0.1), 400, 3, &v, Split::Train).unwrap();
            assert_eq!(ds.class_counts(), vec![200, 200]);
            let s = spec(rule, Relation::Aligned, 0.1);
            let disagree = ds.examples.iter().zip(&ds.labels).filter(|(x, &y)| s.replay(x) != y).count();
            assert_eq!(disagree, 40, "{rule:?}");
        }
    }

    #[test]
    fn dev_test_split_counts() {
        let v = Vocab::synthetic(50);
        let ds = generate_task("t", &spec(LabelRule::Presence, Relation::Aligned, 0.0), 99, 3, &v, Split::Test).unwrap();
        let (dev, test) = split_dev_test(&ds, 5);
        assert_eq!((dev.len(), test.len()), (33, 66));
        assert_eq!(split_dev_test(&ds, 5).0, dev);
    }
}
