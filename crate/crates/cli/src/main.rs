use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use prefixrep::encoder::EncoderModel;
use prefixrep::experiments::{
    calibrate_budget, default_orders, render_report, run_removal, run_sequential_add, run_transfer, ExperimentConfig,
    ExperimentReport, Method, ReportFormat, SeedContext,
};
use prefixrep::gradcheck::{run_gradient_suite, GRADCHECK_TOLERANCE};
use prefixrep::head::{ClassifierHead, HeadVariant};
use prefixrep::prefix::{prefix_path, BankDescriptor, PrefixBank};
use prefixrep::reps::{extract_reps, FixedReps};
use prefixrep::taskgen::{load_dataset, make_suite_with, Split, Suite};
use prefixrep::training::{evaluate, train_target_head};
use prefixrep::Error as CoreError;
use prefixrep_tensor::Scalar;
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "prefixrep", version, about = "Train per-task prefixes on a frozen encoder and compose them")]
struct Cli {
    #[command(flatten)]
    run: RunArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// JSON file overriding fields of the preset configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Quick)]
    preset: Preset,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Worker threads for experiment loops.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Quick,
    Desk,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
    JsonLines,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Table => ReportFormat::Table,
            Format::Csv => ReportFormat::Csv,
            Format::JsonLines => ReportFormat::JsonLines,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic task suite.
    GenSuite {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the frozen base encoder for a suite.
    InitBase {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one source task's prefix against a frozen base.
    TrainPrefix {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Output directory; the prefix is written as `<task>.prefix`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-task fine-tune the base on several source tasks.
    TrainMtl {
        #[arg(long)]
        suite: PathBuf,
        /// Comma-separated source tasks; all sources when omitted.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select prefixes from a bank directory and write the composed-bank descriptor.
    Compose {
        #[command(flatten)]
        bank: BankArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode a dataset with the frozen base and an optional composed bank.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        bank: BankArgs,
        /// Composed-bank descriptor written by `compose`.
        #[arg(long)]
        descriptor: Option<PathBuf>,
        /// Suite manifest providing the vocabulary.
        #[arg(long)]
        suite: PathBuf,
        /// JSON-lines dataset.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a target head on a representations file.
    TrainHead {
        #[arg(long)]
        reps: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = HeadKind::AttentionPlusMlp)]
        variant: HeadKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a trained head on a representations file.
    Eval {
        #[arg(long)]
        reps: PathBuf,
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare representation methods on every target.
    ExpTransfer {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
    },
    /// Evaluate every removal of at most `kmax` source prefixes.
    ExpRemove {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        kmax: Option<usize>,
    },
    /// Add source tasks one per round under a fixed step budget.
    ExpSeqadd {
        #[command(flatten)]
        exp: ExpArgs,
        /// JSON array of task-name arrays; random orders when omitted.
        #[arg(long)]
        orders_file: Option<PathBuf>,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Pick the per-round budget reaching 90% of converged single-task accuracy.
    CalibrateBudget {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        task: String,
        #[arg(long, value_delimiter = ',', default_values_t = [100usize, 200, 400, 800, 1600, 3200])]
        candidates: Vec<usize>,
        #[arg(long)]
        suite: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Coordinates perturbed per tensor in the model-level checks (all when omitted).
        #[arg(long)]
        max_coords: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum HeadKind {
    MlpOnCls,
    AttentionPlusMlp,
}

#[derive(Args, Debug, Clone)]
struct BankArgs {
    #[arg(long)]
    bank_dir: Option<PathBuf>,
    #[arg(long)]
    enable: Vec<String>,
    #[arg(long)]
    disable: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct ExpArgs {
    /// Comma-separated seeds (overrides the configuration).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Suite manifest; the default suite is generated per seed when omitted.
    #[arg(long)]
    suite: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Rendering printed on stdout. Every format is written to `out`.
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

/// Error that exits with status 2: a violated internal contract.
#[derive(Debug)]
struct InternalFailure(String);

impl std::fmt::Display for InternalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InternalFailure {}

fn is_internal(e: &CoreError) -> bool {
    match e {
        CoreError::Tensor(_) | CoreError::NonFiniteLoss { .. } | CoreError::FrozenBaseMutated(_) => true,
        CoreError::Context { source, .. } => is_internal(source),
        _ => false,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<InternalFailure>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return if is_internal(e) { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Preset, then the config file, then command-line flags.
fn effective_config(run: &RunArgs) -> Result<ExperimentConfig> {
    let preset = match run.preset {
        Preset::Quick => ExperimentConfig::quick(),
        Preset::Desk => ExperimentConfig::desk(),
    };
    let mut value = serde_json::to_value(&preset)?;
    if let Some(path) = &run.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let over: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        merge(&mut value, over);
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(value).context("invalid configuration")?;
    cfg.threads = run.threads.max(1);
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

/// Configuration snapshot written next to an output file.
fn dump_config(output: &Path, cfg: &ExperimentConfig, extra: Value) -> Result<()> {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.json");
    write_json(&output.with_file_name(name), &json!({ "config": cfg, "run": extra }))
}

fn load_suite(path: &Path) -> Result<Suite> {
    Ok(Suite::load(path)?)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli.run)?;
    match cli.run.precision {
        Precision::F32 => dispatch::<f32>(cli, cfg),
        Precision::F64 => dispatch::<f64>(cli, cfg),
    }
}

fn dispatch<T: Scalar>(cli: Cli, mut cfg: ExperimentConfig) -> Result<()> {
    let precision = format!("{:?}", cli.run.precision).to_lowercase();
    match cli.command {
        Command::GenSuite { seed, out } => {
            let suite = make_suite_with(&cfg.suite, seed)?;
            let manifest = suite.write(&out)?;
            dump_config(&out.join("suite"), &cfg, json!({ "command": "gen-suite", "seed": seed }))?;
            println!("{}", manifest.display());
        }
        Command::InitBase { suite, seed, out } => {
            let suite = load_suite(&suite)?;
            let ctx = SeedContext::<T>::with_suite(&cfg, seed, suite)?;
            ctx.base.save(&out, json!({ "seed": seed, "config": cfg }))?;
            dump_config(&out, &cfg, json!({ "command": "init-base", "seed": seed }))?;
            println!("{}", ctx.base.fingerprint());
        }
        Command::TrainPrefix { suite, task, model, seed, out } => {
            let ctx = SeedContext { seed, suite: load_suite(&suite)?, base: EncoderModel::<T>::load(&model)? };
            let started = Instant::now();
            let prefix = ctx.train_source_prefix(&cfg, &task, None)?;
            eprintln!("trained prefix '{task}' in {:.1}s", started.elapsed().as_secs_f64());
            let path = prefix_path(&out, &task);
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            prefix.save(&path)?;
            dump_config(&path, &cfg, json!({ "command": "train-prefix", "seed": seed, "task": task }))?;
            println!("{}", path.display());
        }
        Command::TrainMtl { suite, tasks, model, seed, out } => {
            let ctx = SeedContext { seed, suite: load_suite(&suite)?, base: EncoderModel::<T>::load(&model)? };
            let names: Vec<&str> = tasks.iter().map(String::as_str).collect();
            let (tuned, shares) = ctx.train_multitask_base(&cfg, &names, None)?;
            tuned.save(&out, json!({ "seed": seed, "tasks": tasks, "steps_per_task": shares, "config": cfg }))?;
            dump_config(&out, &cfg, json!({ "command": "train-mtl", "seed": seed, "tasks": tasks }))?;
            println!("{}", out.display());
        }
        Command::Compose { bank, model, out } => {
            let model = EncoderModel::<T>::load(&model)?;
            let bank = open_bank(&bank, &model)?;
            let d = bank.descriptor();
            write_json(&out, &serde_json::to_value(&d)?)?;
            println!("{} slots per layer from {:?}", d.slots_per_layer, bank.enabled_tasks());
        }
        Command::Extract { model, bank, descriptor, suite, data, out } => {
            let model = EncoderModel::<T>::load(&model)?;
            let suite = load_suite(&suite)?;
            let name = data.file_stem().and_then(|s| s.to_str()).unwrap_or("data").to_string();
            let ds = load_dataset(&data, &suite.vocab, &name, Split::Test)?;
            let mut bank = if bank.bank_dir.is_some() { Some(open_bank(&bank, &model)?) } else { None };
            if let Some(path) = &descriptor {
                let b = bank.as_mut().ok_or_else(|| anyhow!("--descriptor needs --bank-dir"))?;
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let d: BankDescriptor = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                if d.fingerprint != model.fingerprint() {
                    return Err(CoreError::FingerprintMismatch { task: "descriptor".into(), expected: model.fingerprint(), found: d.fingerprint }.into());
                }
                b.set_enabled(&d.enabled)?;
            }
            let slots = match &bank {
                Some(b) => b.compose_for(&model)?,
                None => Vec::new(),
            };
            let reps = extract_reps(&model, &slots, None, &ds, 128)?;
            let snapshot = json!({
                "model_fingerprint": model.fingerprint(),
                "bank": bank.as_ref().map(|b| b.descriptor()),
                "data": data.display().to_string(),
            });
            reps.save(&out, snapshot.clone())?;
            dump_config(&out, &cfg, json!({ "command": "extract", "inputs": snapshot }))?;
            println!("{} examples", reps.len());
        }
        Command::TrainHead { reps, seed, variant, out } => {
            let reps = FixedReps::<T>::load(&reps)?;
            let variant = match variant {
                HeadKind::MlpOnCls => HeadVariant::MlpOnCls,
                HeadKind::AttentionPlusMlp => HeadVariant::AttentionPlusMlp,
            };
            let mut hc = cfg.head_train.clone();
            hc.seed = seed;
            let (head, _) = train_target_head(&reps, &hc, variant, seed)?;
            head.save(&out, json!({ "seed": seed, "reps": reps.name, "reps_checksum": reps.checksum(), "config": hc }))?;
            dump_config(&out, &cfg, json!({ "command": "train-head", "seed": seed }))?;
            println!("{}", out.display());
        }
        Command::Eval { reps, head, out } => {
            let reps = FixedReps::<T>::load(&reps)?;
            let head = ClassifierHead::<T>::load(&head)?;
            let acc = evaluate(&head, &reps)?;
            let v = json!({ "name": reps.name, "examples": reps.len(), "accuracy": acc });
            if let Some(out) = out {
                write_json(&out, &v)?;
            }
            println!("{}", serde_json::to_string(&v)?);
        }
        Command::ExpTransfer { exp, methods } => {
            apply_seeds(&mut cfg, &exp);
            let methods = if methods.is_empty() { Method::ALL.to_vec() } else { methods.iter().map(|m| Method::parse(m)).collect::<Result<_, _>>()? };
            let suite = exp.suite.as_deref().map(load_suite).transpose()?;
            let started = Instant::now();
            let report = run_transfer::<T>(&cfg, suite.as_ref(), &methods)?;
            eprintln!("transfer finished in {:.1}s", started.elapsed().as_secs_f64());
            emit_report(&exp, "transfer", &report, &cfg, &precision)?;
        }
        Command::ExpRemove { exp, kmax } => {
            apply_seeds(&mut cfg, &exp);
            let k = kmax.unwrap_or(cfg.removal_k_max);
            cfg.removal_k_max = k;
            let suite = exp.suite.as_deref().map(load_suite).transpose()?;
            let started = Instant::now();
            let report = run_removal::<T>(&cfg, suite.as_ref(), k)?;
            eprintln!("removal search finished in {:.1}s", started.elapsed().as_secs_f64());
            emit_report(&exp, "removal", &report, &cfg, &precision)?;
        }
        Command::ExpSeqadd { exp, orders_file, budget } => {
            apply_seeds(&mut cfg, &exp);
            if let Some(b) = budget {
                cfg.seqadd_budget = b;
            }
            let suite = exp.suite.as_deref().map(load_suite).transpose()?;
            let mut report: Option<ExperimentReport> = None;
            let started = Instant::now();
            for &seed in &cfg.seeds {
                let names: Vec<String> = match &suite {
                    Some(s) => s.sources.iter().map(|t| t.name().to_string()).collect(),
                    None => make_suite_with(&cfg.suite, seed)?.sources.iter().map(|t| t.name().to_string()).collect(),
                };
                let orders = match &orders_file {
                    Some(p) => {
                        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                        serde_json::from_str::<Vec<Vec<String>>>(&text).with_context(|| format!("parsing orders {}", p.display()))?
                    }
                    None => default_orders(&names, cfg.seqadd_orders, seed),
                };
                let r = run_sequential_add::<T>(&cfg, suite.as_ref(), seed, &orders, cfg.seqadd_budget)?;
                match &mut report {
                    None => report = Some(r),
                    Some(acc) => {
                        acc.entries.extend(r.entries);
                        acc.notes.insert(format!("seed_{seed}"), serde_json::to_value(&r.notes)?);
                    }
                }
            }
            eprintln!("sequential add finished in {:.1}s", started.elapsed().as_secs_f64());
            let report = report.ok_or_else(|| anyhow!("no seeds given"))?;
            emit_report(&exp, "sequential_add", &report, &cfg, &precision)?;
        }
        Command::CalibrateBudget { seed, task, candidates, suite } => {
            let suite = suite.as_deref().map(load_suite).transpose()?;
            let ctx = SeedContext::<T>::for_seed(&cfg, suite.as_ref(), seed)?;
            let (budget, curve) = calibrate_budget(&cfg, &ctx, &task, &candidates, 0.9)?;
            println!("{}", serde_json::to_string(&json!({ "task": task, "seed": seed, "budget": budget, "curve": curve }))?);
        }
        Command::Gradcheck { max_coords } => {
            let started = Instant::now();
            let cases = run_gradient_suite(max_coords)?;
            let mut failed = Vec::new();
            for c in &cases {
                let status = if c.passed() { "ok" } else { "FAIL" };
                println!("{:<24} {:>10.3e} {:>6} {status}", c.name, c.max_rel_error, c.coords_checked);
                if !c.passed() {
                    failed.push(c.name.clone());
                }
            }
            eprintln!("gradient checks finished in {:.1}s", started.elapsed().as_secs_f64());
            if !failed.is_empty() {
                return Err(InternalFailure(format!("gradient check above {GRADCHECK_TOLERANCE:e}: {}", failed.join(", "))).into());
            }
        }
    }
    Ok(())
}

fn open_bank<T: Scalar>(args: &BankArgs, model: &EncoderModel<T>) -> Result<PrefixBank<T>> {
    let dir = args.bank_dir.as_ref().ok_or_else(|| anyhow!("--bank-dir is required"))?;
    let mut bank = PrefixBank::load_dir(dir, model)?;
    if !args.enable.is_empty() {
        bank.set_enabled(&args.enable)?;
    }
    for t in &args.disable {
        bank.disable(t)?;
    }
    Ok(bank)
}

fn apply_seeds(cfg: &mut ExperimentConfig, exp: &ExpArgs) {
    if !exp.seeds.is_empty() {
        cfg.seeds = exp.seeds.clone();
    }
}

fn emit_report(exp: &ExpArgs, stem: &str, report: &ExperimentReport, cfg: &ExperimentConfig, precision: &str) -> Result<()> {
    if report.entries.iter().any(|e| !(0.0..=1.0).contains(&e.test_accuracy) || !(0.0..=1.0).contains(&e.dev_accuracy)) {
        bail!(InternalFailure("accuracy outside [0, 1]".into()));
    }
    fs::create_dir_all(&exp.out).with_context(|| format!("creating {}", exp.out.display()))?;
    write_json(&exp.out.join(format!("{stem}.report.json")), &serde_json::to_value(report)?)?;
    write_text(&exp.out.join(format!("{stem}.csv")), &render_report(report, ReportFormat::Csv))?;
    write_text(&exp.out.join(format!("{stem}.jsonl")), &render_report(report, ReportFormat::JsonLines))?;
    write_text(&exp.out.join(format!("{stem}.txt")), &render_report(report, ReportFormat::Table))?;
    dump_config(&exp.out.join(stem), cfg, json!({ "command": stem, "precision": precision }))?;
    print!("{}", render_report(report, exp.format.into()));
    Ok(())
}
