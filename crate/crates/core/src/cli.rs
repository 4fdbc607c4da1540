//! The `gedi` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error.
//! `GEDI_SEED` sets the default seed; `--seed` overrides it.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{load_checkpoint, save_checkpoint_with_meta};
use crate::decode::{direct_generate, gedi_generate, DecodeMode, GenerationConfig, Preset, PriorBias};
use crate::error::GediError;
use crate::eval::{
    accuracy_with, audit_cost, classification_accuracy, conditional_perplexity, label_fidelity, lambda_sweep,
    write_report, write_sweep_table, Classifier, CostReport, MetricBlock, SweepConfig,
};
use crate::model::{InitScheme, TabularCCLM};
use crate::requests::{
    read_generations, read_requests, write_generations, GenerationRecord, GenerationRequest, GenerationsHeader,
    GENERATIONS_FORMAT, GENERATIONS_VERSION,
};
use crate::synth::{assign_splits, load_corpus, sample_corpus, save_corpus, LabeledCorpus, SourceSpec, Split};
use crate::train::{train, Optimizer, TrainConfig};
use crate::vocab::{ControlCodeSet, TokenId};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "gedi", version, about = "Tabular class-conditional LMs and guided decoding")]
struct Cli {
    /// Master seed.
    #[arg(long, env = "GEDI_SEED", default_value_t = 0, global = true)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a labeled corpus from a synthetic source.
    Synth(SynthArgs),
    /// Train a CC-LM (or an unconditional base LM).
    Train(TrainArgs),
    /// Guided or direct generation.
    Generate(GenerateArgs),
    /// Classify sequences with a CC-LM or the source oracle.
    Classify(ClassifyArgs),
    /// Score generations and models; writes a report file.
    Evaluate(EvaluateArgs),
    /// Train one model per λ and tabulate the results.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// `s1`, `s2` (parameters drawn from the seed) or a source file.
    #[arg(long, default_value = "s1")]
    source: String,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write the source parameters here.
    #[arg(long)]
    source_out: Option<PathBuf>,
    /// Leave records untagged instead of assigning A/B/val splits.
    #[arg(long)]
    no_split: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Standard,
    Binarized,
    Unconditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    A,
    B,
    Val,
    All,
}

impl SplitArg {
    fn select(self, corpus: &LabeledCorpus) -> LabeledCorpus {
        match self {
            SplitArg::A => corpus.split(Split::A),
            SplitArg::B => corpus.split(Split::B),
            SplitArg::Val => corpus.split(Split::Validation),
            SplitArg::All => corpus.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long, default_value_t = 0.6)]
    lambda: f64,
    #[arg(long = "lr", default_value_t = 0.05)]
    learning_rate: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: OptimizerArg,
    #[arg(long)]
    learn_bias: bool,
    #[arg(long, default_value_t = 1.0)]
    alpha_init: f64,
    /// Standard deviation of the initial logit noise (0 = all zeros).
    #[arg(long, default_value_t = 0.0)]
    init_noise: f64,
    #[arg(long, default_value_t = 1)]
    order: usize,
}

impl TrainFlags {
    fn config(&self, seed: u64, binarized: bool) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            optimizer: match self.optimizer {
                OptimizerArg::Adam => Optimizer::adam(),
                OptimizerArg::Sgd => Optimizer::Sgd,
            },
            learn_bias: self.learn_bias,
            binarized,
        }
    }

    fn init(&self) -> Result<InitScheme, CliError> {
        if self.init_noise == 0.0 {
            Ok(InitScheme::Zeros)
        } else if self.init_noise > 0.0 && self.init_noise.is_finite() {
            Ok(InitScheme::Noise { sigma: self.init_noise })
        } else {
            Err(CliError::Usage(format!(
                "--init-noise must be >= 0, got {}",
                self.init_noise
            )))
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "standard")]
    mode: ModelKind,
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
    /// Measure accuracy and perplexity on this split after every epoch.
    #[arg(long, value_enum)]
    heldout_split: Option<SplitArg>,
    /// Line-delimited JSON training history.
    #[arg(long)]
    history: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, Args)]
struct GenFlags {
    #[arg(long, default_value = "paper-default")]
    preset: Preset,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    rep_penalty: Option<f64>,
    /// Prior bias on the desired class.
    #[arg(long)]
    bias: Option<f64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Skip the candidate filter.
    #[arg(long)]
    no_filter: bool,
}

impl GenFlags {
    fn config(&self, mode: DecodeMode) -> Result<GenerationConfig, CliError> {
        let mut cfg = self.preset.config();
        cfg.mode = mode;
        if let Some(x) = self.omega {
            cfg.omega = x;
        }
        if let Some(x) = self.rho {
            cfg.rho = x;
        }
        if let Some(x) = self.tau {
            cfg.tau = x;
        }
        if let Some(x) = self.rep_penalty {
            cfg.repetition_penalty = x;
        }
        if let Some(x) = self.bias {
            cfg.prior_bias = PriorBias::Target(x);
        }
        if let Some(x) = self.max_new_tokens {
            cfg.max_new_tokens = x;
        }
        if self.no_filter {
            cfg.filter = false;
        }
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Guided,
    Direct,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value = "guided")]
    mode: ModeArg,
    /// Unconditional base LM (guided mode).
    #[arg(long)]
    base: Option<PathBuf>,
    /// Guide CC-LM (guided mode).
    #[arg(long)]
    guide: Option<PathBuf>,
    /// CC-LM to sample from (direct mode).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Target class; without it `--prompts-from` generates for every class.
    #[arg(long)]
    class: Option<String>,
    /// Whitespace-separated prompt tokens.
    #[arg(long, default_value = "")]
    prompt: String,
    /// JSON Lines request file.
    #[arg(long, conflicts_with_all = ["class", "prompts_from"])]
    requests: Option<PathBuf>,
    /// Take prompts from the leading tokens of corpus records.
    #[arg(long)]
    prompts_from: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    prompts_split: SplitArg,
    #[arg(long, default_value_t = 2)]
    prompt_len: usize,
    /// Prompts per class taken from `--prompts-from`.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    gen: GenFlags,
}

#[derive(Debug, Args)]
struct ClassifyArgs {
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    model: Option<PathBuf>,
    /// `s1`, `s2` or a source file.
    #[arg(long)]
    oracle: Option<String>,
    #[arg(long, required_unless_present = "tokens", conflicts_with = "tokens")]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    split: SplitArg,
    /// Whitespace-separated tokens of a single sequence.
    #[arg(long)]
    tokens: Option<String>,
    /// Tab-separated predictions, one line per record.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Generation file to score for label fidelity and cost.
    #[arg(long)]
    generations: Option<PathBuf>,
    /// Classifier checkpoint for label fidelity.
    #[arg(long, conflicts_with = "oracle")]
    classifier: Option<PathBuf>,
    /// Source oracle for label fidelity (`s1`, `s2` or a source file).
    #[arg(long)]
    oracle: Option<String>,
    /// Checkpoint to score on `--corpus`.
    #[arg(long, requires = "corpus")]
    model: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.25,0.5,0.75,1.0")]
    lambdas: Vec<f64>,
    #[arg(long)]
    binarized: bool,
    #[arg(long, default_value_t = 0.5)]
    classifier_lambda: f64,
    #[arg(long, default_value_t = 20)]
    generations_per_class: usize,
    #[arg(long, default_value_t = 2)]
    prompt_len: usize,
    /// Tab-separated table, one row per λ.
    #[arg(long)]
    out: PathBuf,
    /// Metric-block report with the sweep settings.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
    #[command(flatten)]
    gen: GenFlags,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Gedi(GediError),
}

impl From<GediError> for CliError {
    fn from(e: GediError) -> Self {
        CliError::Gedi(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Gedi(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Gedi(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Gedi(GediError::InvalidConfig(_)) => EXIT_USAGE,
            CliError::Gedi(_) => EXIT_DATA,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Gedi(e) => e.fmt(f),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let seed = cli.seed;
    let result = match cli.command {
        Command::Synth(a) => synth(a, seed),
        Command::Train(a) => train_cmd(a, seed),
        Command::Generate(a) => generate(a, seed),
        Command::Classify(a) => classify_cmd(a, seed),
        Command::Evaluate(a) => evaluate(a, seed),
        Command::Sweep(a) => sweep(a, seed),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("gedi: error: {e}");
            e.exit_code()
        }
    }
}

fn load_source(name: &str, seed: u64) -> CliResult<SourceSpec> {
    Ok(match name {
        "s1" => SourceSpec::s1(),
        "s2" => SourceSpec::s2(seed),
        path => SourceSpec::load(path)?,
    })
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| {
        CliError::Gedi(GediError::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        )))
    })
}

fn open_checkpoint(path: &Path) -> CliResult<TabularCCLM> {
    load_checkpoint(path).map_err(|e| {
        match e {
            GediError::Io(io) => GediError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
            other => other,
        }
        .into()
    })
}

fn open_corpus(path: &Path) -> CliResult<LabeledCorpus> {
    load_corpus(path).map_err(|e| {
        match e {
            GediError::Io(io) => GediError::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
            other => other,
        }
        .into()
    })
}

fn synth(a: SynthArgs, seed: u64) -> CliResult<()> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let spec = load_source(&a.source, seed)?;
    let mut corpus = sample_corpus(&spec, a.n, seed)?;
    if !a.no_split {
        corpus = assign_splits(&corpus, seed)?;
    }
    save_corpus(&corpus, &a.out)?;
    if let Some(p) = &a.source_out {
        spec.save(p)?;
    }
    eprintln!("wrote {} records to {}", corpus.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs, seed: u64) -> CliResult<()> {
    let full = open_corpus(&a.corpus)?;
    let mut data = a.split.select(&full);
    let mut heldout = a.heldout_split.map(|s| s.select(&full));
    if data.is_empty() {
        return Err(GediError::EmptyInput("selected training split is empty").into());
    }
    let codes = match a.mode {
        ModelKind::Standard => ControlCodeSet::new(&full.classes)?,
        ModelKind::Binarized => ControlCodeSet::binarized(&full.classes)?,
        ModelKind::Unconditional => {
            data = data.unlabeled();
            heldout = heldout.map(|h| h.unlabeled());
            ControlCodeSet::unconditional()
        }
    };
    let cfg = a.flags.config(seed, a.mode == ModelKind::Binarized);
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut model = TabularCCLM::new(full.vocab.clone(), codes, a.flags.order, a.flags.init()?, seed)?;
    model
        .set_alpha(a.flags.alpha_init)
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let started = Instant::now();
    let (model, history) = train(&model, &data, heldout.as_ref().filter(|h| !h.is_empty()), &cfg)?;
    eprintln!("trained {} epochs in {:.2?}", history.len(), started.elapsed());

    let config_json = serde_json::to_string(&cfg).expect("config serializes");
    let meta = vec![
        ("seed".to_string(), seed.to_string()),
        ("mode".to_string(), format!("{:?}", a.mode).to_lowercase()),
        ("corpus".to_string(), a.corpus.display().to_string()),
        ("split".to_string(), format!("{:?}", a.split).to_lowercase()),
        ("train-config".to_string(), config_json.clone()),
    ];
    save_checkpoint_with_meta(&model, &meta, &a.out)?;

    if let Some(path) = &a.history {
        let mut out = create(path)?;
        let header = serde_json::json!({
            "kind": "header",
            "format": "gedi-history",
            "version": 1,
            "seed": seed,
            "order": a.flags.order,
            "alpha_init": a.flags.alpha_init,
            "config": cfg,
        });
        writeln!(out, "{header}")?;
        for m in &history {
            let mut line = serde_json::to_value(m).expect("metrics serialize");
            line["kind"] = "epoch".into();
            writeln!(out, "{line}")?;
        }
        out.flush()?;
    }
    Ok(())
}

struct Job {
    id: Option<String>,
    class: usize,
    prompt: Vec<TokenId>,
    max_new_tokens: Option<usize>,
}

fn generate(a: GenerateArgs, seed: u64) -> CliResult<()> {
    let mode = match a.mode {
        ModeArg::Guided => DecodeMode::Guided,
        ModeArg::Direct => DecodeMode::Direct,
    };
    let cfg = a.gen.config(mode)?;
    let mut models = BTreeMap::new();
    let (base, conditional) = match mode {
        DecodeMode::Guided => {
            let (Some(base), Some(guide)) = (&a.base, &a.guide) else {
                return Err(CliError::Usage("guided mode needs --base and --guide".into()));
            };
            models.insert("base".to_string(), base.display().to_string());
            models.insert("guide".to_string(), guide.display().to_string());
            (Some(open_checkpoint(base)?), open_checkpoint(guide)?)
        }
        DecodeMode::Direct => {
            let Some(model) = a.model.as_ref().or(a.guide.as_ref()) else {
                return Err(CliError::Usage("direct mode needs --model".into()));
            };
            models.insert("model".to_string(), model.display().to_string());
            (None, open_checkpoint(model)?)
        }
    };
    let codes = conditional.codes();
    if codes.len() == 1 {
        return Err(GediError::InvalidConfig("the conditioning model is unconditional".into()).into());
    }
    let vocab = conditional.vocab();

    let mut jobs = Vec::new();
    if let Some(path) = &a.requests {
        for GenerationRequest {
            id,
            class,
            prompt,
            max_new_tokens,
        } in read_requests(BufReader::new(File::open(path)?))?
        {
            jobs.push(Job {
                id,
                class: codes.class_id(&class)?,
                prompt: vocab.encode(&prompt)?,
                max_new_tokens,
            });
        }
    } else if let Some(path) = &a.prompts_from {
        let corpus = a.prompts_split.select(&open_corpus(path)?);
        if &corpus.vocab != vocab {
            return Err(GediError::VocabMismatch("prompt corpus vocabulary differs from the model's".into()).into());
        }
        let classes: Vec<usize> = match &a.class {
            Some(name) => vec![codes.class_id(name)?],
            None => (0..codes.class_count()).collect(),
        };
        let prompts: Vec<&[TokenId]> = corpus
            .records
            .iter()
            .take(a.count)
            .map(|r| &r.tokens[..a.prompt_len.min(r.tokens.len())])
            .collect();
        if prompts.is_empty() {
            return Err(GediError::EmptyInput("no prompts in the selected split").into());
        }
        for class in classes {
            for (i, p) in prompts.iter().enumerate() {
                jobs.push(Job {
                    id: Some(format!("{}-{i}", codes.class_label(class))),
                    class,
                    prompt: p.to_vec(),
                    max_new_tokens: None,
                });
            }
        }
    } else {
        let Some(name) = &a.class else {
            return Err(CliError::Usage("give --class, --requests or --prompts-from".into()));
        };
        for _ in 0..a.count {
            jobs.push(Job {
                id: None,
                class: codes.class_id(name)?,
                prompt: vocab.encode(&a.prompt)?,
                max_new_tokens: None,
            });
        }
    }

    let started = Instant::now();
    let mut total = CostReport {
        tokens: 0,
        base_passes: 0,
        guide_passes: 0,
        contrast_size: 0,
        prompt_base_passes: 0,
        prompt_guide_passes: 0,
        wall_time_per_token: None,
    };
    let mut records = Vec::with_capacity(jobs.len());
    for job in jobs {
        let mut job_cfg = cfg.clone();
        if let Some(n) = job.max_new_tokens {
            job_cfg.max_new_tokens = n;
        }
        job_cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        let (tokens, stopped_at_eos, cost) = match &base {
            Some(base) => {
                let out = gedi_generate(base, &conditional, job.class, &job.prompt, &job_cfg)?;
                let mut cost = audit_cost(&out.trace)?;
                cost.prompt_base_passes = out.prompt_base_passes;
                cost.prompt_guide_passes = out.prompt_guide_passes;
                total.merge(&cost)?;
                (out.tokens, out.stopped_at_eos, Some(cost))
            }
            None => {
                let tokens = direct_generate(&conditional, job.class, &job.prompt, &job_cfg)?;
                let eos = vocab.eos().is_some() && tokens.last().copied() == vocab.eos();
                (tokens, eos, None)
            }
        };
        records.push(GenerationRecord {
            id: job.id,
            class: codes.class_label(job.class).to_string(),
            prompt: vocab.decode(&job.prompt),
            tokens: vocab.decode(&tokens),
            stopped_at_eos,
            cost,
        });
    }
    let elapsed = started.elapsed();
    if total.tokens > 0 {
        let timed = total.with_wall_time(elapsed);
        eprintln!(
            "{} tokens, {:.2} guide passes/token, {:?}/token",
            timed.tokens,
            timed.guide_passes_per_token(),
            timed.wall_time_per_token.unwrap_or_default()
        );
    }
    let header = GenerationsHeader {
        format: GENERATIONS_FORMAT.into(),
        version: GENERATIONS_VERSION,
        seed,
        preset: Some(a.gen.preset.name().to_string()),
        config: cfg,
        models,
    };
    write_generations(&header, &records, create(&a.out)?)?;
    Ok(())
}

enum ClassifierSource {
    Model(TabularCCLM),
    Oracle(SourceSpec),
}

impl ClassifierSource {
    fn load(model: Option<&Path>, oracle: Option<&str>, seed: u64) -> CliResult<Self> {
        match (model, oracle) {
            (Some(m), None) => Ok(ClassifierSource::Model(open_checkpoint(m)?)),
            (None, Some(o)) => Ok(ClassifierSource::Oracle(load_source(o, seed)?)),
            _ => Err(CliError::Usage(
                "give exactly one of a classifier checkpoint or --oracle".into(),
            )),
        }
    }

    fn classifier(&self) -> Classifier<'_> {
        match self {
            ClassifierSource::Model(m) => Classifier::Model(m),
            ClassifierSource::Oracle(s) => Classifier::Oracle(s),
        }
    }

    fn class_names(&self) -> Vec<String> {
        match self {
            ClassifierSource::Model(m) => (0..m.codes().class_count())
                .map(|c| m.codes().class_label(c).to_string())
                .collect(),
            ClassifierSource::Oracle(s) => s.classes.clone(),
        }
    }

    fn vocab(&self) -> CliResult<crate::vocab::Vocab> {
        Ok(match self {
            ClassifierSource::Model(m) => m.vocab().clone(),
            ClassifierSource::Oracle(s) => s.vocab()?,
        })
    }
}

fn classify_cmd(a: ClassifyArgs, seed: u64) -> CliResult<()> {
    let source = ClassifierSource::load(a.model.as_deref(), a.oracle.as_deref(), seed)?;
    let classifier = source.classifier();
    let names = source.class_names();
    let vocab = source.vocab()?;
    let stdout = std::io::stdout();

    if let Some(text) = &a.tokens {
        let tokens = vocab.encode(text)?;
        let c = classifier.classify(&tokens)?;
        let posterior: Vec<String> = c.posterior.iter().map(f64::to_string).collect();
        writeln!(stdout.lock(), "{}\t{}", names[c.class], posterior.join(" "))?;
        return Ok(());
    }
    let corpus = a
        .split
        .select(&open_corpus(a.corpus.as_deref().expect("clap requires --corpus"))?);
    if corpus.vocab != vocab {
        return Err(GediError::VocabMismatch("corpus vocabulary differs from the classifier's".into()).into());
    }
    if corpus.classes != names {
        return Err(GediError::VocabMismatch(format!(
            "corpus classes {:?} differ from classifier classes {names:?}",
            corpus.classes
        ))
        .into());
    }
    if let Some(path) = &a.out {
        let mut out = create(path)?;
        writeln!(out, "label\tpredicted\tposterior")?;
        for r in &corpus.records {
            let c = classifier.classify(&r.tokens)?;
            let posterior: Vec<String> = c.posterior.iter().map(f64::to_string).collect();
            writeln!(out, "{}\t{}\t{}", names[r.class], names[c.class], posterior.join(" "))?;
        }
        out.flush()?;
    }
    let acc = accuracy_with(classifier, &corpus)?;
    writeln!(stdout.lock(), "accuracy {acc} over {} records", corpus.len())?;
    Ok(())
}

fn evaluate(a: EvaluateArgs, seed: u64) -> CliResult<()> {
    if a.generations.is_none() && a.model.is_none() {
        return Err(CliError::Usage(
            "nothing to evaluate: give --generations and/or --model".into(),
        ));
    }
    let mut run = MetricBlock::new("run").field("seed", seed);
    let mut blocks = Vec::new();

    if let Some(path) = &a.generations {
        let (header, records) = read_generations(BufReader::new(File::open(path)?))?;
        let source = ClassifierSource::load(a.classifier.as_deref(), a.oracle.as_deref(), seed)?;
        let names = source.class_names();
        let vocab = source.vocab()?;
        run = run
            .field("generations", path.display())
            .field("generation-seed", header.seed)
            .field(
                "generation-config",
                serde_json::to_string(&header.config).expect("config serializes"),
            )
            .field("classifier", source.classifier().identity());
        if records.is_empty() {
            return Err(GediError::EmptyInput("generation file has no records").into());
        }
        let mut generations = Vec::with_capacity(records.len());
        let mut cost: Option<CostReport> = None;
        for r in &records {
            let class = names
                .iter()
                .position(|n| n == &r.class)
                .ok_or_else(|| GediError::UnknownClass(r.class.clone()))?;
            generations.push((class, vocab.encode_names(&r.tokens)?));
            if let Some(c) = &r.cost {
                match &mut cost {
                    Some(total) => total.merge(c)?,
                    None => cost = Some(c.clone()),
                }
            }
        }
        let report = label_fidelity(&generations, source.classifier())?;
        blocks.push(MetricBlock::fidelity(&report, &names));
        if let Some(c) = cost {
            blocks.push(MetricBlock::cost(&c));
        }
    }

    if let (Some(model_path), Some(corpus_path)) = (&a.model, &a.corpus) {
        let model = open_checkpoint(model_path)?;
        let corpus = a.split.select(&open_corpus(corpus_path)?);
        run = run
            .field("model", model_path.display())
            .field("corpus", corpus_path.display())
            .field("split", format!("{:?}", a.split).to_lowercase());
        let mut block = MetricBlock::new("model").field("records", corpus.len());
        let eval_corpus = if model.codes().len() == 1 {
            corpus.unlabeled()
        } else {
            corpus
        };
        if model.codes().len() > 1 {
            block = block.field("accuracy", classification_accuracy(&model, &eval_corpus)?);
        }
        block = block.field("perplexity", conditional_perplexity(&model, &eval_corpus)?);
        blocks.push(block);
    }

    blocks.insert(0, run);
    write_report(&blocks, create(&a.out)?)?;
    Ok(())
}

fn sweep(a: SweepArgs, seed: u64) -> CliResult<()> {
    for &l in &a.lambdas {
        if !(0.0..=1.0).contains(&l) {
            return Err(CliError::Usage(format!("lambda must lie in [0, 1], got {l}")));
        }
    }
    let corpus = open_corpus(&a.corpus)?;
    let train_cfg = a.flags.config(seed, a.binarized);
    train_cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = SweepConfig {
        train: train_cfg,
        order: a.flags.order,
        init: a.flags.init()?,
        classifier_lambda: a.classifier_lambda,
        generation: a.gen.config(DecodeMode::Direct)?,
        generations_per_class: a.generations_per_class,
        prompt_len: a.prompt_len,
        split_seed: seed,
    };
    let started = Instant::now();
    let rows = lambda_sweep(&corpus, &a.lambdas, &cfg)?;
    eprintln!("swept {} lambda values in {:.2?}", rows.len(), started.elapsed());
    write_sweep_table(&rows, create(&a.out)?)?;
    if let Some(path) = &a.report {
        let mut blocks = vec![MetricBlock::new("run")
            .field("seed", seed)
            .field("corpus", a.corpus.display())
            .field("sweep-config", serde_json::to_string(&cfg).expect("config serializes"))];
        for r in &rows {
            blocks.push(
                MetricBlock::new(format!("lambda {}", r.lambda))
                    .field("accuracy", r.accuracy)
                    .field("fidelity", r.fidelity)
                    .field("perplexity", r.perplexity),
            );
        }
        write_report(&blocks, create(path)?)?;
    }
    Ok(())
}
