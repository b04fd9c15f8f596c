//! Command-line interface: data generation, training, evaluation, offline
//! scoring and dataset statistics.
//!
//! Settings come from, in decreasing precedence: command-line flags, the
//! `--config` file (`key = value` lines named after the long flags), the
//! `SOUNDMIND_SEED` environment variable (seed only) and built-in defaults.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datapipe::{
    generate_corpus, parse_user_content, read_manifest, write_manifest, CommandReasoner,
    CommandTts, CorpusConfig, MockTts, OracleReasoner, PromptTemplates, ReasoningGenerator,
    SampleRecord, SpeechSynthesizer, Split, SplitFractions,
};
use crate::env::{
    scripted_oracle, Env, EnvConfig, Formula, LogicTask, ModalityMix, TaskConfig, TaskInstance,
};
use crate::error::{Error, Result};
use crate::metrics::{dataset_stats, text_word_error_rate, EvalReport};
use crate::optimizer::{stream_seed, train, GreedyEval, TrainConfig, UpdateConfig};
use crate::policy::{read_checkpoint, write_checkpoint, Checkpoint, VocabSpec, Vocabulary};
use crate::reward::{
    AnswerLabel, BimodalResponse, LengthAnnotation, OutputModality, RewardBreakdown,
    RewardWeights,
};

/// Environment variable supplying the default seed.
pub const SEED_ENV: &str = "SOUNDMIND_SEED";

#[derive(Debug, Parser)]
#[command(name = "soundmind", version, about = "Rewards, training and evaluation for bimodal logical reasoning")]
pub struct Cli {
    /// Key-value settings file; keys are long flag names (`seed = 7`).
    /// Explicit flags take precedence over the file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus through the mock (or external) pipeline.
    #[command(args_override_self = true)]
    GenData(GenDataArgs),
    /// Train a policy and write a checkpoint plus a JSONL step log.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Greedy-decode every manifest sample and report accuracy (and WER for audio output).
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Score recorded responses against a manifest.
    #[command(args_override_self = true)]
    Score(ScoreArgs),
    /// Per-split statistics of a manifest.
    #[command(args_override_self = true)]
    Stats(StatsArgs),
    /// Write a uniform or scripted-oracle checkpoint.
    #[command(args_override_self = true)]
    InitPolicy(InitPolicyArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TaskArgs {
    /// Atoms per task (1–4).
    #[arg(long, default_value_t = 2)]
    pub n_atoms: usize,
    /// Probability that a generated task is entailed.
    #[arg(long, default_value_t = 0.449)]
    pub entailed_fraction: f64,
    /// Requested output: text_out, audio_out, both or mixed.
    #[arg(long, default_value = "text_out")]
    pub modality: ModalityMix,
}

impl TaskArgs {
    fn to_config(&self) -> Result<TaskConfig> {
        let cfg = TaskConfig {
            n_atoms: self.n_atoms,
            entailed_fraction: self.entailed_fraction,
            modality: self.modality,
            ..TaskConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct WeightArgs {
    /// Text format weight.
    #[arg(long, default_value_t = 1.0)]
    pub lambda1: f64,
    /// Audio format weight.
    #[arg(long, default_value_t = 0.5)]
    pub lambda2: f64,
    /// Answer correctness weight.
    #[arg(long, default_value_t = 2.0)]
    pub lambda3: f64,
    /// Text length weight.
    #[arg(long, default_value_t = 1.0)]
    pub lambda4: f64,
    /// Audio length weight.
    #[arg(long, default_value_t = 0.75)]
    pub lambda5: f64,
    /// Characters at the end of a stream in which the answer marker must start.
    #[arg(long, default_value_t = 30)]
    pub answer_window: usize,
}

impl WeightArgs {
    fn to_weights(&self) -> Result<RewardWeights> {
        let w = RewardWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            lambda4: self.lambda4,
            lambda5: self.lambda5,
            answer_window: self.answer_window,
            ..RewardWeights::default()
        };
        w.validate()?;
        Ok(w)
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    /// Number of samples.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 7)]
    pub seed: u64,
    /// Output manifest (JSONL).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value_t = 0.804)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0.102)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0.094)]
    pub validation_fraction: f64,
    /// Prompt template file with [system], [before_major] and [behind_conclusion] sections.
    #[arg(long, value_name = "FILE")]
    pub templates: Option<PathBuf>,
    /// Reasoning provider: `mock` or `command`.
    #[arg(long, default_value = "mock")]
    pub reasoner: String,
    /// Program (and arguments) for `--reasoner command`.
    #[arg(long)]
    pub reasoner_cmd: Option<String>,
    /// Speech provider: `mock` or `command`.
    #[arg(long, default_value = "mock")]
    pub tts: String,
    /// Program (and arguments) for `--tts command`.
    #[arg(long)]
    pub tts_cmd: Option<String>,
    /// Speaking rate of the mock synthesizer.
    #[arg(long, default_value_t = 0.4)]
    pub seconds_per_word: f64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, env = SEED_ENV, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 3.0)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    /// KL penalty coefficient.
    #[arg(long, default_value_t = 0.01)]
    pub beta: f64,
    /// Clip radius (values ≥ 1 effectively disable clipping on the upper side).
    #[arg(long, default_value_t = 0.2)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub sigma_floor: f64,
    #[command(flatten)]
    pub weights: WeightArgs,
    #[command(flatten)]
    pub task: TaskArgs,
    /// Maximum generated tokens per episode.
    #[arg(long, default_value_t = 12)]
    pub max_len: usize,
    /// Reasoning tokens in the reference response.
    #[arg(long, default_value_t = 2)]
    pub reference_words: u64,
    /// End episodes once the answer label is emitted in the final stream.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub stop_after_answer: bool,
    /// Response vocabulary, e.g. `words=so,therefore;answer=1;audio=1`.
    #[arg(long)]
    pub vocab: Option<String>,
    #[arg(long, default_value_t = 1024)]
    pub eval_rollouts: usize,
    #[arg(long, default_value_t = 512)]
    pub heldout: usize,
    /// Where to write the final checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Where to write the JSONL step log.
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Record wall-clock time in the log (logs are then not reproducible).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Only evaluate this split.
    #[arg(long)]
    pub split: Option<Split>,
    /// text_out, audio_out or both.
    #[arg(long, default_value = "text_out")]
    pub modality: OutputModality,
    #[arg(long, env = SEED_ENV, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 12)]
    pub max_len: usize,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub stop_after_answer: bool,
    #[arg(long, value_name = "FILE")]
    pub templates: Option<PathBuf>,
    /// Write one JSON line per sample with the decoded output.
    #[arg(long, value_name = "FILE")]
    pub details: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ScoreArgs {
    /// JSONL responses: `{"id": …, "text": …, "audio": …, "modality"?: …}`.
    #[arg(long, value_name = "FILE")]
    pub responses: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Default modality for responses that do not name one.
    #[arg(long, default_value = "text_out")]
    pub modality: OutputModality,
    #[command(flatten)]
    pub weights: WeightArgs,
    /// Also write the per-sample breakdowns as JSONL.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct InitPolicyArgs {
    /// `uniform` or `oracle`.
    #[arg(long, default_value = "uniform")]
    pub kind: String,
    #[arg(long)]
    pub vocab: Option<String>,
    #[arg(long, default_value_t = crate::policy::DEFAULT_PREFIX_K)]
    pub prefix_k: usize,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

/// Parses the process arguments, runs the command and returns the exit code.
/// Diagnostics go to stderr, data to stdout.
pub fn run() -> i32 {
    let args: Vec<String> = std::env::args().collect();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run_from(&args, &mut out) {
        Ok(()) => 0,
        Err(CliError::Clap(e)) => {
            let code = e.exit_code();
            let _ = e.print();
            code
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Clap(clap::Error),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Clap(e) => write!(f, "{e}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

/// Runs with explicit arguments (including the program name), writing data to `out`.
pub fn run_from(args: &[String], out: &mut dyn Write) -> std::result::Result<(), CliError> {
    let args = apply_config_file(args)?;
    let cli = Cli::try_parse_from(&args).map_err(CliError::Clap)?;
    execute(cli.command, out).map_err(CliError::Run)
}

/// Locates `--config FILE` and splices the file's settings in right after the
/// subcommand name, so explicit flags (which come later) override them.
fn apply_config_file(args: &[String]) -> Result<Vec<String>> {
    let mut config: Option<(usize, usize, String)> = None; // (start, len, path)
    let mut i = 1;
    while i < args.len() {
        let a = &args[i];
        if a == "--config" {
            let path = args
                .get(i + 1)
                .ok_or_else(|| Error::config("--config needs a file"))?;
            config = Some((i, 2, path.clone()));
            i += 2;
            continue;
        }
        if let Some(p) = a.strip_prefix("--config=") {
            config = Some((i, 1, p.to_string()));
        }
        i += 1;
    }
    let Some((start, len, path)) = config else {
        return Ok(args.to_vec());
    };
    let mut rest: Vec<String> = args.to_vec();
    rest.drain(start..start + len);
    let sub_pos = rest
        .iter()
        .enumerate()
        .skip(1)
        .find(|(_, a)| !a.starts_with('-'))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::config("--config given without a subcommand"))?;
    let cmd = Cli::command();
    let sub = cmd
        .find_subcommand(&rest[sub_pos])
        .ok_or_else(|| Error::config(format!("unknown subcommand {:?}", rest[sub_pos])))?;
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut injected = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("{path}:{}: expected `key = value`", lineno + 1))
        })?;
        let key = key.trim().replace('_', "-");
        let value = value.trim().trim_matches('"').to_string();
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| {
                Error::config(format!(
                    "{path}:{}: `{key}` is not an option of `{}`",
                    lineno + 1,
                    sub.get_name()
                ))
            })?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.to_ascii_lowercase().as_str() {
                "true" | "1" | "yes" => injected.push(format!("--{key}")),
                "false" | "0" | "no" => {}
                _ => {
                    return Err(Error::config(format!(
                        "{path}:{}: `{key}` expects true or false",
                        lineno + 1
                    )))
                }
            }
        } else {
            injected.push(format!("--{key}={value}"));
        }
    }
    rest.splice(sub_pos + 1..sub_pos + 1, injected);
    Ok(rest)
}

fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenData(a) => cmd_gen_data(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Score(a) => cmd_score(&a, out),
        Command::Stats(a) => cmd_stats(&a, out),
        Command::InitPolicy(a) => cmd_init_policy(&a, out),
    }
}

fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

fn load_templates(path: Option<&Path>) -> Result<PromptTemplates> {
    match path {
        Some(p) => PromptTemplates::load(p),
        None => Ok(PromptTemplates::default()),
    }
}

fn vocab_from_arg(spec: Option<&str>) -> Result<Vocabulary> {
    Ok(match spec {
        Some(s) => Vocabulary::from_spec(VocabSpec::decode(s)?),
        None => Vocabulary::default(),
    })
}

pub fn cmd_gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    if a.n == 0 {
        return Err(Error::config("--n must be at least 1"));
    }
    let templates = load_templates(a.templates.as_deref())?;
    let generator: Box<dyn ReasoningGenerator> = match a.reasoner.as_str() {
        "mock" => Box::new(OracleReasoner::new(templates.clone())),
        "command" => {
            let cmd = a
                .reasoner_cmd
                .as_deref()
                .ok_or_else(|| Error::config("--reasoner command needs --reasoner-cmd"))?;
            Box::new(CommandReasoner::new(cmd).map_err(Error::Config)?)
        }
        other => return Err(Error::config(format!("unknown reasoner {other:?} (mock | command)"))),
    };
    let tts: Box<dyn SpeechSynthesizer> = match a.tts.as_str() {
        "mock" => {
            if !(a.seconds_per_word > 0.0 && a.seconds_per_word.is_finite()) {
                return Err(Error::config("--seconds-per-word must be positive"));
            }
            Box::new(MockTts {
                seconds_per_word: a.seconds_per_word,
            })
        }
        "command" => {
            let cmd = a
                .tts_cmd
                .as_deref()
                .ok_or_else(|| Error::config("--tts command needs --tts-cmd"))?;
            Box::new(CommandTts::new(cmd).map_err(Error::Config)?)
        }
        other => return Err(Error::config(format!("unknown tts {other:?} (mock | command)"))),
    };
    let cfg = CorpusConfig {
        n: a.n,
        seed: a.seed,
        task: a.task.to_config()?,
        fractions: SplitFractions {
            train: a.train_fraction,
            test: a.test_fraction,
            validation: a.validation_fraction,
        },
    };
    let records = generate_corpus(&cfg, generator.as_ref(), tts.as_ref(), &templates)?;
    write_manifest(&a.out, &records)?;
    let stats = dataset_stats(&records)?;
    let entailed = records
        .iter()
        .filter(|r| r.answer == AnswerLabel::Entailed)
        .count();
    #[derive(Serialize)]
    struct Summary<'a> {
        manifest: String,
        n: usize,
        entailed_fraction: f64,
        stats: &'a crate::metrics::DatasetStats,
    }
    print_json(
        out,
        &Summary {
            manifest: a.out.display().to_string(),
            n: records.len(),
            entailed_fraction: entailed as f64 / records.len() as f64,
            stats: &stats,
        },
    )
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    steps: usize,
    seed: u64,
    initial_reward: f64,
    final_reward: f64,
    reward_ratio: f64,
    first_reward_ma: Option<f64>,
    final_reward_ma: Option<f64>,
    initial_heldout: GreedyEval,
    heldout: GreedyEval,
    checkpoint: String,
    log: Option<String>,
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut weights = a.weights.to_weights()?;
    weights.beta = a.beta;
    let update = UpdateConfig {
        learning_rate: a.learning_rate,
        beta: a.beta,
        epsilon: a.epsilon,
        batch_size: a.batch_size,
        epochs: a.epochs,
        sigma_floor: a.sigma_floor,
    };
    update.validate()?;
    weights.validate()?;
    let vocab = vocab_from_arg(a.vocab.as_deref())?;
    if a.max_len == 0 {
        return Err(Error::config("--max-len must be at least 1"));
    }
    if a.eval_rollouts == 0 || a.heldout == 0 {
        return Err(Error::config("--eval-rollouts and --heldout must be at least 1"));
    }
    let mut task = a.task.to_config()?;
    task.reference_words = a.reference_words;
    let cfg = TrainConfig {
        task,
        env: EnvConfig {
            vocab: vocab.spec().clone(),
            max_len: a.max_len,
            weights,
            stop_after_answer: a.stop_after_answer,
            ..EnvConfig::default()
        },
        update,
        steps: a.steps,
        seed: a.seed,
        eval_rollouts: a.eval_rollouts,
        heldout: a.heldout,
        record_wall_time: a.timing,
    };
    // Validate the environment before creating any output file.
    Env::new(cfg.env.clone())?;

    let mut log = match &a.log {
        Some(p) => Some((
            BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?),
            p.clone(),
        )),
        None => None,
    };
    let outcome = train(&cfg, |step| {
        if let Some((w, p)) = log.as_mut() {
            serde_json::to_writer(&mut *w, step).expect("serializable");
            w.write_all(b"\n").map_err(|e| Error::io(p.as_path(), e))?;
        }
        Ok(())
    })?;
    if let Some((mut w, p)) = log {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    write_checkpoint(&a.checkpoint, &Checkpoint::new(vocab, outcome.params.clone())?)?;
    print_json(
        out,
        &TrainSummary {
            steps: a.steps,
            seed: a.seed,
            initial_reward: outcome.initial_reward,
            final_reward: outcome.final_reward,
            reward_ratio: outcome.final_reward / outcome.initial_reward,
            first_reward_ma: outcome.logs.first().map(|l| l.reward_ma),
            final_reward_ma: outcome.logs.last().map(|l| l.reward_ma),
            initial_heldout: outcome.initial_heldout,
            heldout: outcome.heldout,
            checkpoint: a.checkpoint.display().to_string(),
            log: a.log.as_ref().map(|p| p.display().to_string()),
        },
    )
}

/// Rebuilds the logic task a manifest record was generated from.
pub fn task_from_record(record: &SampleRecord, templates: &PromptTemplates) -> Result<LogicTask> {
    let triplet = parse_user_content(&record.user_content_text, templates)?;
    LogicTask::new(
        Formula::parse(&triplet.major)?,
        Formula::parse(&triplet.minor)?,
        Formula::parse(&triplet.conclusion)?,
    )
}

#[derive(Debug, Serialize)]
struct EvalDetail {
    id: String,
    truth: AnswerLabel,
    prediction: Option<AnswerLabel>,
    forced: AnswerLabel,
    text: String,
    audio: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    wer: Option<f64>,
}

const EVAL_DECODE: u64 = 21;

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let templates = load_templates(a.templates.as_deref())?;
    let records = read_manifest(&a.manifest)?;
    let env = Env::new(EnvConfig {
        vocab: ckpt.vocab.spec().clone(),
        prefix_k: ckpt.params.prefix_k(),
        max_len: a.max_len,
        stop_after_answer: a.stop_after_answer,
        ..EnvConfig::default()
    })?;
    let lengths = TaskConfig::default().reference_lengths();
    let selected: Vec<&SampleRecord> = records
        .iter()
        .filter(|r| a.split.map_or(true, |s| r.split == s))
        .collect();

    let results: Vec<std::result::Result<EvalDetail, String>> = selected
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            if let Some(m) = r.output_modality {
                if m != a.modality {
                    return Err(format!(
                        "{}: sample prepared for {m} but evaluation requests {}",
                        r.id, a.modality
                    ));
                }
            }
            let task = task_from_record(r, &templates).map_err(|e| format!("{}: {e}", r.id))?;
            if task.label != r.answer {
                return Err(format!(
                    "{}: manifest answer {} disagrees with the premises ({})",
                    r.id, r.answer, task.label
                ));
            }
            let inst = TaskInstance::new(r.id.clone(), task, lengths, a.modality)
                .map_err(|e| format!("{}: {e}", r.id))?;
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(a.seed, EVAL_DECODE, i as u64));
            let g = env
                .decode_greedy(&ckpt.params, &inst, &mut rng)
                .map_err(|e| format!("{}: {e}", r.id))?;
            let wer = if a.modality.uses_audio() {
                Some(
                    text_word_error_rate(
                        g.response.audio_transcript(),
                        &env.reference_transcript(r.answer),
                    )
                    .map_err(|e| format!("{}: {e}", r.id))?,
                )
            } else {
                None
            };
            Ok(EvalDetail {
                id: r.id.clone(),
                truth: r.answer,
                prediction: g.prediction,
                forced: g.forced,
                text: g.response.text_rendering().to_string(),
                audio: g.response.audio_transcript().to_string(),
                wer,
            })
        })
        .collect();

    let mut details = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(d) => details.push(d),
            Err(e) => errors.push(e),
        }
    }
    for e in &errors {
        eprintln!("warning: {e}");
    }
    if details.is_empty() {
        return Err(Error::Empty("no manifest sample could be evaluated"));
    }
    if let Some(p) = &a.details {
        let mut w = BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?);
        for d in &details {
            serde_json::to_writer(&mut w, d).expect("serializable");
            w.write_all(b"\n").map_err(|e| Error::io(p, e))?;
        }
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    let forced: Vec<_> = details.iter().map(|d| Some(d.forced)).collect();
    let strict: Vec<_> = details.iter().map(|d| d.prediction).collect();
    let truths: Vec<_> = details.iter().map(|d| d.truth).collect();
    let wers: Vec<f64> = details.iter().filter_map(|d| d.wer).collect();
    let report = EvalReport::from_outcomes(a.modality, &forced, &strict, &truths, &wers, errors)?;
    print_json(out, &report)
}

/// One line of a response file for `score`.
#[derive(Debug, Clone, Deserialize)]
pub struct ResponseRecord {
    pub id: String,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub audio: String,
    #[serde(default)]
    pub modality: Option<OutputModality>,
}

#[derive(Debug, Serialize)]
struct ScoredSample {
    id: String,
    modality: OutputModality,
    #[serde(flatten)]
    breakdown: RewardBreakdown,
}

#[derive(Debug, Serialize)]
struct ScoreReport {
    scored: Vec<ScoredSample>,
    unmatched: Vec<String>,
    mean_total: Option<f64>,
}

fn read_responses(path: &Path) -> Result<Vec<ResponseRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let err = |message: String| Error::Manifest {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}

/// Text and audio reference lengths for a manifest record: its output word count.
pub fn annotation_for(record: &SampleRecord) -> Result<LengthAnnotation> {
    LengthAnnotation::new(record.output_tokens, record.output_tokens).map_err(|e| match e {
        Error::InvalidAnnotation(m) => Error::InvalidAnnotation(format!("{}: {m}", record.id)),
        other => other,
    })
}

pub fn cmd_score(a: &ScoreArgs, out: &mut dyn Write) -> Result<()> {
    let weights = a.weights.to_weights()?;
    let responses = read_responses(&a.responses)?;
    let manifest = read_manifest(&a.manifest)?;
    let by_id: HashMap<&str, &SampleRecord> =
        manifest.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut scored = Vec::new();
    let mut unmatched = Vec::new();
    for resp in &responses {
        let Some(record) = by_id.get(resp.id.as_str()) else {
            unmatched.push(resp.id.clone());
            continue;
        };
        let modality = resp.modality.unwrap_or(a.modality);
        let bimodal = BimodalResponse::from_renderings(&resp.text, &resp.audio, weights.answer_window);
        let breakdown = RewardBreakdown::compute(
            &bimodal,
            record.answer,
            &annotation_for(record)?,
            &weights,
            modality,
        )?;
        scored.push(ScoredSample {
            id: resp.id.clone(),
            modality,
            breakdown,
        });
    }
    for id in &unmatched {
        eprintln!("warning: response id {id:?} is not in the manifest");
    }
    if let Some(p) = &a.out {
        let mut w = BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?);
        for s in &scored {
            serde_json::to_writer(&mut w, s).expect("serializable");
            w.write_all(b"\n").map_err(|e| Error::io(p, e))?;
        }
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    let mean_total = (!scored.is_empty())
        .then(|| scored.iter().map(|s| s.breakdown.total).sum::<f64>() / scored.len() as f64);
    print_json(
        out,
        &ScoreReport {
            scored,
            unmatched,
            mean_total,
        },
    )
}

pub fn cmd_stats(a: &StatsArgs, out: &mut dyn Write) -> Result<()> {
    let records = read_manifest(&a.manifest)?;
    let stats = dataset_stats(&records)?;
    let by_name: BTreeMap<String, _> = stats
        .splits
        .iter()
        .map(|(s, v)| (s.to_string(), *v))
        .collect();
    #[derive(Serialize)]
    struct Out<T> {
        total: usize,
        splits: T,
    }
    print_json(
        out,
        &Out {
            total: stats.total,
            splits: by_name,
        },
    )
}

pub fn cmd_init_policy(a: &InitPolicyArgs, out: &mut dyn Write) -> Result<()> {
    let vocab = vocab_from_arg(a.vocab.as_deref())?;
    if a.prefix_k == 0 {
        return Err(Error::config("--prefix-k must be at least 1"));
    }
    let params = match a.kind.as_str() {
        "uniform" => crate::policy::PolicyParams::zeros(
            vocab.len(),
            crate::env::TASK_FEATURE_DIM,
            a.prefix_k,
        ),
        "oracle" => scripted_oracle(&vocab, a.prefix_k)?,
        other => return Err(Error::config(format!("unknown policy kind {other:?} (uniform | oracle)"))),
    };
    write_checkpoint(&a.out, &Checkpoint::new(vocab, params)?)?;
    writeln!(out, "{}", a.out.display()).map_err(|e| Error::io("<stdout>", e))
}
