//! The `semae` command line: synthetic data, training, generation and
//! evaluation.
//!
//! Every command writes its resolved configuration next to its outputs, so
//! a run can be repeated from that file alone (`--config`). Flags override
//! values from the config file. Exit status is 0 on success, 1 when the
//! work itself fails and 2 for usage errors.
//!
//! Seeds: model `role` is initialized from `example_seed(seed, role_index)`
//! and trained with batches and dropout keyed by `seed`; sample `i` of test
//! example `j` reads stream `i` of `example_seed(seed, j)`.

use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{run_methods, FinetuneConfig, GenerationConfig, Method, TraceRecord};
use crate::corpus::{generate_synthetic, load_native, save_native, split, Dataset, SyntheticGrammar};
use crate::decoding::example_seed;
use crate::metrics::{build_report, render_table, ReportFile};
use crate::seq2seq::{
    load_checkpoint, save_checkpoint, tokenize, train_supervised, Architecture, Role, Seq2SeqModel, TokenSequence,
    TrainConfig, Vocab,
};
use crate::triples::linearize;

/// Failure of a command, split by exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

#[derive(Debug, Parser)]
#[command(name = "semae", version, about = "Semantic auto-encoder for triple-to-text generation")]
pub struct Cli {
    /// JSON file with default values for any flag, keyed by flag name.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and write train/dev/test splits.
    SynthData(SynthArgs),
    /// Train a semantic LM or semantic parser.
    Train(TrainArgs),
    /// Verbalize a dataset with one or more methods and write traces.
    Generate(GenerateArgs),
    /// Score traces and write a report.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train/dev/test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub fractions: Option<Vec<f64>>,
    /// JSON grammar; the built-in grammar by default.
    #[arg(long)]
    pub grammar: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub role: Option<Role>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub dropout: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Methods to run, comma separated, or `all`.
    #[arg(long, value_delimiter = ',')]
    pub method: Option<Vec<String>>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub lm: Option<PathBuf>,
    #[arg(long)]
    pub parser: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f32>,
    #[arg(long)]
    pub top_p: Option<f32>,
    #[arg(long)]
    pub finetune_iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Keep LM updates across finetuning batches instead of restoring θ.
    #[arg(long)]
    pub keep_theta: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Trace files written by `generate`.
    pub traces: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Values a `--config` file may supply. Keys are flag names.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct FileConfig {
    pub n: Option<usize>,
    pub fractions: Option<Vec<f64>>,
    pub grammar: Option<PathBuf>,
    pub role: Option<Role>,
    pub data: Option<PathBuf>,
    pub steps: Option<usize>,
    pub dropout: Option<f32>,
    pub method: Option<Vec<String>>,
    pub lm: Option<PathBuf>,
    pub parser: Option<PathBuf>,
    pub samples: Option<usize>,
    pub temperature: Option<f32>,
    pub top_p: Option<f32>,
    pub finetune_iters: Option<usize>,
    pub lr: Option<f32>,
    pub batch: Option<usize>,
    pub keep_theta: Option<bool>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub traces: Option<Vec<PathBuf>>,
    pub out: Option<PathBuf>,
}

pub const DEFAULT_SYNTH_N: usize = 700;
pub const DEFAULT_FRACTIONS: [f64; 3] = [5.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRunConfig {
    pub n: usize,
    pub seed: u64,
    pub fractions: [f64; 3],
    pub grammar: SyntheticGrammar,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub role: Role,
    pub data: PathBuf,
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRunConfig {
    pub methods: Vec<Method>,
    pub data: PathBuf,
    pub lm: PathBuf,
    pub parser: PathBuf,
    pub generation: GenerationConfig,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateRunConfig {
    pub traces: Vec<PathBuf>,
    pub out: PathBuf,
}

/// The resolved configuration of one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    SynthData(SynthRunConfig),
    Train(TrainRunConfig),
    Generate(GenerateRunConfig),
    Evaluate(EvaluateRunConfig),
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn require<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn existing_file(path: PathBuf, flag: &str) -> CliResult<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        usage(format!("--{flag} {} is not a readable file", path.display()))
    }
}

fn output_dir(path: PathBuf) -> CliResult<PathBuf> {
    if path.exists() && !path.is_dir() {
        return usage(format!("--out {} exists and is not a directory", path.display()));
    }
    fs::create_dir_all(&path)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(CliError::Runtime)?;
    Ok(path)
}

fn positive(value: usize, flag: &str) -> CliResult<usize> {
    if value == 0 {
        usage(format!("--{flag} must be at least 1"))
    } else {
        Ok(value)
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

/// Resolves flags against the config file and runs the command.
pub fn execute(cli: Cli) -> CliResult<RunConfig> {
    let file = match &cli.config {
        Some(path) => read_json::<FileConfig>(path).map_err(|e| CliError::Usage(format!("{e:#}")))?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::SynthData(a) => {
            let config = resolve_synth(a, file)?;
            cmd_synth_data(&config)?;
            Ok(RunConfig::SynthData(config))
        }
        Command::Train(a) => {
            let config = resolve_train(a, file)?;
            cmd_train(&config)?;
            Ok(RunConfig::Train(config))
        }
        Command::Generate(a) => {
            let config = resolve_generate(a, file)?;
            cmd_generate(&config)?;
            Ok(RunConfig::Generate(config))
        }
        Command::Evaluate(a) => {
            let config = resolve_evaluate(a, file)?;
            cmd_evaluate(&config)?;
            Ok(RunConfig::Evaluate(config))
        }
    }
}

fn resolve_synth(a: SynthArgs, f: FileConfig) -> CliResult<SynthRunConfig> {
    let n = positive(a.n.or(f.n).unwrap_or(DEFAULT_SYNTH_N), "n")?;
    let seed = require(a.seed.or(f.seed), "seed")?;
    let fractions = match a.fractions.or(f.fractions) {
        None => DEFAULT_FRACTIONS,
        Some(v) => match <[f64; 3]>::try_from(v) {
            Ok(arr) => arr,
            Err(v) => return usage(format!("--fractions needs three values, got {}", v.len())),
        },
    };
    let grammar = match a.grammar.or(f.grammar) {
        Some(p) => {
            let p = existing_file(p, "grammar")?;
            read_json(&p).map_err(|e| CliError::Usage(format!("{e:#}")))?
        }
        None => SyntheticGrammar::default(),
    };
    let out = output_dir(require(a.out.or(f.out), "out")?)?;
    Ok(SynthRunConfig { n, seed, fractions, grammar, out })
}

/// Writes `train.jsonl`, `dev.jsonl` and `test.jsonl` under `config.out`.
pub fn cmd_synth_data(config: &SynthRunConfig) -> CliResult<()> {
    config.grammar.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let data = generate_synthetic(&config.grammar, config.n, config.seed).map_err(|e| anyhow!(e))?;
    let (train, dev, test) = split(&data, config.fractions, config.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    for (name, d) in [("train", &train), ("dev", &dev), ("test", &test)] {
        save_native(d, config.out.join(format!("{name}.jsonl"))).map_err(|e| anyhow!(e))?;
    }
    write_json(
        &config.out.join("run_config.synth-data.json"),
        &RunConfig::SynthData(config.clone()),
    )?;
    log::info!("wrote {}/{}/{} examples to {}", train.len(), dev.len(), test.len(), config.out.display());
    Ok(())
}

fn resolve_train(a: TrainArgs, f: FileConfig) -> CliResult<TrainRunConfig> {
    let role = require(a.role.or(f.role), "role")?;
    let data = existing_file(require(a.data.or(f.data), "data")?, "data")?;
    let defaults = TrainConfig::default();
    let train = TrainConfig {
        batch_size: positive(a.batch.or(f.batch).unwrap_or(defaults.batch_size), "batch")?,
        steps: positive(a.steps.or(f.steps).unwrap_or(defaults.steps), "steps")?,
        lr: a.lr.or(f.lr).unwrap_or(defaults.lr),
        seed: require(a.seed.or(f.seed), "seed")?,
        dropout: a.dropout.or(f.dropout).unwrap_or(defaults.dropout),
    };
    if !(train.lr > 0.0 && train.lr.is_finite()) {
        return usage(format!("--lr must be positive, got {}", train.lr));
    }
    if !(0.0..1.0).contains(&train.dropout) {
        return usage(format!("--dropout must be in [0, 1), got {}", train.dropout));
    }
    let out = output_dir(require(a.out.or(f.out), "out")?)?;
    Ok(TrainRunConfig { role, data, architecture: Architecture::default(), train, out })
}

/// Vocabulary over the linearized triples and references of `data`.
pub fn build_vocab(data: &Dataset) -> Vocab {
    let texts: Vec<String> = data
        .iter()
        .flat_map(|e| std::iter::once(linearize(&e.triples)).chain(e.references.iter().cloned()))
        .collect();
    Vocab::build(texts.iter().map(String::as_str))
}

/// One (source, target) pair per reference: triples to text for the LM,
/// text to triples for the parser.
pub fn training_pairs(
    data: &Dataset,
    role: Role,
    vocab: &Vocab,
    arch: &Architecture,
) -> Vec<(TokenSequence, TokenSequence)> {
    let mut pairs = Vec::new();
    for e in data.iter() {
        let triples = linearize(&e.triples);
        for r in &e.references {
            pairs.push(match role {
                Role::SemanticLm => (
                    tokenize(&triples, vocab, arch.max_source_len),
                    tokenize(r, vocab, arch.max_target_len),
                ),
                Role::SemanticParser => (
                    tokenize(r, vocab, arch.max_source_len),
                    tokenize(&triples, vocab, arch.max_target_len),
                ),
            });
        }
    }
    pairs
}

fn role_index(role: Role) -> u64 {
    match role {
        Role::SemanticLm => 0,
        Role::SemanticParser => 1,
    }
}

/// Trains one model; writes `<role>.ckpt` and `<role>.losses.json`.
pub fn cmd_train(config: &TrainRunConfig) -> CliResult<Seq2SeqModel> {
    let data = load_native(&config.data).map_err(|e| anyhow!(e).context(format!("loading {}", config.data.display())))?;
    if data.is_empty() {
        return usage(format!("{} has no examples", config.data.display()));
    }
    let vocab = build_vocab(&data);
    let pairs = training_pairs(&data, config.role, &vocab, &config.architecture);
    let init_seed = example_seed(config.train.seed, role_index(config.role));
    let mut model =
        Seq2SeqModel::new(config.role, config.architecture.clone(), vocab, init_seed).map_err(|e| anyhow!(e))?;
    let log = train_supervised(&mut model, &pairs, &config.train).map_err(|e| anyhow!(e))?;
    model.trainable = false;
    save_checkpoint(&model, config.out.join(format!("{}.ckpt", config.role))).map_err(|e| anyhow!(e))?;
    write_json(&config.out.join(format!("{}.losses.json", config.role)), &log)?;
    write_json(
        &config.out.join(format!("run_config.train.{}.json", config.role)),
        &RunConfig::Train(config.clone()),
    )?;
    Ok(model)
}

fn parse_methods(names: Vec<String>) -> CliResult<Vec<Method>> {
    let mut methods = Vec::new();
    for name in names {
        let name = name.trim();
        if name == "all" {
            methods.extend(Method::ALL);
        } else {
            methods.push(name.parse().map_err(CliError::Usage)?);
        }
    }
    methods.sort();
    methods.dedup();
    if methods.is_empty() {
        return usage("--method needs at least one method");
    }
    Ok(methods)
}

fn resolve_generate(a: GenerateArgs, f: FileConfig) -> CliResult<GenerateRunConfig> {
    let methods = parse_methods(require(a.method.or(f.method), "method")?)?;
    let data = existing_file(require(a.data.or(f.data), "data")?, "data")?;
    let lm = existing_file(require(a.lm.or(f.lm), "lm")?, "lm")?;
    let parser = existing_file(require(a.parser.or(f.parser), "parser")?, "parser")?;
    let defaults = GenerationConfig::default();
    let stochastic = methods.iter().any(|m| matches!(m, Method::Sampling | Method::GreedySampling | Method::FinetuneSampling));
    let seed = match a.seed.or(f.seed) {
        Some(s) => s,
        None if stochastic => return usage("--seed is required for sampling methods"),
        None => defaults.seed,
    };
    let generation = GenerationConfig {
        samples: positive(a.samples.or(f.samples).unwrap_or(defaults.samples), "samples")?,
        temperature: a.temperature.or(f.temperature).unwrap_or(defaults.temperature),
        top_p: a.top_p.or(f.top_p).unwrap_or(defaults.top_p),
        finetune: FinetuneConfig {
            iterations: positive(
                a.finetune_iters.or(f.finetune_iters).unwrap_or(defaults.finetune.iterations),
                "finetune-iters",
            )?,
            lr: a.lr.or(f.lr).unwrap_or(defaults.finetune.lr),
            batch_size: positive(a.batch.or(f.batch).unwrap_or(defaults.finetune.batch_size), "batch")?,
            restore_theta_after: !(a.keep_theta || f.keep_theta.unwrap_or(false)),
        },
        seed,
        workers: positive(a.workers.or(f.workers).unwrap_or(defaults.workers), "workers")?,
    };
    crate::decoding::DecodeConfig::sampling(generation.temperature, generation.top_p, seed, 0)
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if !(generation.finetune.lr > 0.0 && generation.finetune.lr.is_finite()) {
        return usage(format!("--lr must be positive, got {}", generation.finetune.lr));
    }
    let out = output_dir(require(a.out.or(f.out), "out")?)?;
    Ok(GenerateRunConfig { methods, data, lm, parser, generation, out })
}

pub fn trace_file_name(method: Method) -> String {
    format!("trace.{method}.jsonl")
}

pub fn write_traces(path: &Path, records: &[TraceRecord]) -> anyhow::Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_traces(path: &Path) -> anyhow::Result<Vec<TraceRecord>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

/// Runs the configured methods; writes one `trace.<method>.jsonl` each.
pub fn cmd_generate(config: &GenerateRunConfig) -> CliResult<Vec<(Method, Vec<TraceRecord>)>> {
    let data = load_native(&config.data).map_err(|e| anyhow!(e).context(format!("loading {}", config.data.display())))?;
    let lm = load_checkpoint(&config.lm).map_err(|e| anyhow!(e).context(format!("loading {}", config.lm.display())))?;
    let mut parser =
        load_checkpoint(&config.parser).map_err(|e| anyhow!(e).context(format!("loading {}", config.parser.display())))?;
    parser.trainable = false;
    let traces = run_methods(&lm, &parser, &data.examples, &config.methods, &config.generation).map_err(|e| anyhow!(e))?;
    for (method, records) in &traces {
        write_traces(&config.out.join(trace_file_name(*method)), records)?;
    }
    write_json(&config.out.join("run_config.generate.json"), &RunConfig::Generate(config.clone()))?;
    Ok(traces)
}

fn resolve_evaluate(a: EvaluateArgs, f: FileConfig) -> CliResult<EvaluateRunConfig> {
    let traces = if a.traces.is_empty() { f.traces.unwrap_or_default() } else { a.traces };
    if traces.is_empty() {
        return usage("evaluate needs at least one trace file");
    }
    let traces = traces
        .into_iter()
        .map(|t| existing_file(t, "traces"))
        .collect::<CliResult<Vec<_>>>()?;
    let out = output_dir(require(a.out.or(f.out), "out")?)?;
    Ok(EvaluateRunConfig { traces, out })
}

/// Writes `report.json` and the aligned `report.txt`.
pub fn cmd_evaluate(config: &EvaluateRunConfig) -> CliResult<ReportFile> {
    let mut traces = Vec::new();
    for path in &config.traces {
        let records = read_traces(path)?;
        let Some(first) = records.first() else {
            return Err(anyhow!("{} has no records", path.display()).into());
        };
        let method = first.method;
        if records.iter().any(|r| r.method != method) {
            return Err(anyhow!("{} mixes methods", path.display()).into());
        }
        traces.push((method, records));
    }
    traces.sort_by_key(|(m, _)| *m);
    let reports = build_report(&traces).map_err(|e| anyhow!(e))?;
    let file = ReportFile::new(reports);
    write_json(&config.out.join("report.json"), &file)?;
    write_file(&config.out.join("report.txt"), render_table(&file.methods).as_bytes())?;
    write_json(&config.out.join("run_config.evaluate.json"), &RunConfig::Evaluate(config.clone()))?;
    Ok(file)
}
