//! Command implementations behind the `wean` binary. Each command writes
//! its report to the given writer and maps failures to an exit status.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use wean_core::checkpoint;
use wean_core::data::{
    detokenize, make_synthetic, tokenize, SyntheticTask, Tokenization, MAX_SOURCE_LEN,
};
use wean_core::decode::{beam_decode, default_max_len, greedy_decode};
use wean_core::experiment::{compare, load_data, run_training, ExperimentConfig};
use wean_core::metrics::{bleu, rouge, RougeVariant, ScoreReport};
use wean_core::model::{count_output_params, GeneratorKind};
use wean_core::{Error, ScoreKind};

#[derive(Parser)]
#[command(
    name = "wean",
    version,
    about = "Sequence-to-sequence models with a word embedding attention output layer"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a JSON config.
    Train(TrainArgs),
    /// Decode source sentences with a trained checkpoint.
    Generate(GenerateArgs),
    /// Score candidate sentences against references.
    Evaluate(EvaluateArgs),
    /// Print output-layer parameter counts for both heads.
    Params(ParamsArgs),
    /// Write a synthetic parallel corpus.
    Synth(SynthArgs),
    /// Train both heads on the same data and report convergence.
    Compare(TrainArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON experiment config; omitted fields take preset values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    generator: Option<GeneratorKind>,
    #[arg(long)]
    score_kind: Option<ScoreKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hidden_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Write 0 in the seconds column so repeated runs give identical logs.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One source sentence per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Beam width; greedy decoding when omitted.
    #[arg(long)]
    beam: Option<usize>,
    /// Upper bound on output tokens; defaults to twice the source length plus 5.
    #[arg(long)]
    max_len: Option<usize>,
    /// Expected tokenisation; must match the checkpoint's.
    #[arg(long)]
    tokenization: Option<Tokenization>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    Bleu,
    Rouge1,
    Rouge2,
    RougeL,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    candidates: PathBuf,
    /// One or more reference files, line-aligned with the candidates.
    #[arg(long, num_args = 1.., required = true)]
    references: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "bleu")]
    metrics: Vec<Metric>,
    #[arg(long, default_value = "word")]
    tokenization: Tokenization,
    /// Also write per-sentence scores as `<dir>/<metric>.tsv`.
    #[arg(long)]
    per_sentence: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Vocabulary size V.
    #[arg(long)]
    vocab_size: Option<u64>,
    /// Hidden size k.
    #[arg(long)]
    hidden_size: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    task: SyntheticTask,
    #[arg(long)]
    size: usize,
    #[arg(long, default_value_t = 50)]
    vocab_size: usize,
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// A failure with its process exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } => 2,
            Error::Io { .. } | Error::Parse { .. } => 3,
            Error::Checkpoint(_) => 4,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

pub type CmdResult = Result<(), Failure>;

/// Parses `args` (program name first) and runs the command.
pub fn run_args<I, T>(args: I, out: &mut dyn Write) -> CmdResult
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| fail(2, e.to_string()))?;
    run(cli, out)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CmdResult {
    match cli.command {
        Command::Train(args) => cmd_train(&args, out),
        Command::Generate(args) => cmd_generate(&args),
        Command::Evaluate(args) => cmd_evaluate(&args, out),
        Command::Params(args) => cmd_params(&args, out),
        Command::Synth(args) => cmd_synth(&args),
        Command::Compare(args) => cmd_compare(&args, out),
    }
}

fn report_failed(e: std::io::Error) -> Failure {
    fail(3, format!("writing report: {e}"))
}

fn experiment_config(args: &TrainArgs) -> Result<ExperimentConfig, Failure> {
    let mut config = match &args.config {
        // an unreadable config file is a configuration problem, not data I/O
        Some(path) => ExperimentConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => fail(2, e.to_string()),
            other => other.into(),
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = &args.train {
        config.train_path = Some(p.clone());
    }
    if let Some(p) = &args.valid {
        config.valid_path = Some(p.clone());
    }
    if let Some(d) = &args.output_dir {
        config.output_dir = d.clone();
    }
    if let Some(g) = args.generator {
        config.generator = g;
    }
    if let Some(s) = args.score_kind {
        config.score_kind = s;
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(h) = args.hidden_size {
        config.hidden_size = h;
        config.embedding_size = h;
    }
    if let Some(b) = args.batch_size {
        config.batch_size = b;
    }
    if args.no_timing {
        config.record_timing = false;
    }
    config.validate()?;
    config.data_paths()?;
    Ok(config)
}

fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> CmdResult {
    let config = experiment_config(args)?;
    let data = load_data(&config)?;
    create_dir(&config.output_dir)?;
    fs::write(config.output_dir.join("config.json"), config.to_json())
        .map_err(|e| fail(3, format!("writing config copy: {e}")))?;
    let (_, log) = run_training(&config, &data, Some(&config.output_dir))?;
    let last = log.records.last().expect("log has the initial row");
    writeln!(
        out,
        "trained {} epochs: valid_loss {:.4} valid_acc {:.4}; log at {}",
        last.epoch,
        last.valid_loss,
        last.valid_acc,
        config.output_dir.join("train_log.csv").display()
    )
    .map_err(report_failed)?;
    Ok(())
}

fn cmd_compare(args: &TrainArgs, out: &mut dyn Write) -> CmdResult {
    let config = experiment_config(args)?;
    let data = load_data(&config)?;
    create_dir(&config.output_dir)?;
    let runs = compare(&config, &data, Some(&config.output_dir))?;
    for run in &runs {
        let reached = run
            .epochs_to_threshold
            .map_or_else(|| "not reached".to_string(), |e| e.to_string());
        writeln!(
            out,
            "{} epochs_to_threshold({:.2})={} log={}",
            run.generator.name(),
            config.threshold,
            reached,
            config
                .output_dir
                .join(run.generator.name())
                .join("train_log.csv")
                .display()
        )
        .map_err(report_failed)?;
    }
    Ok(())
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| fail(3, format!("creating {}: {e}", dir.display())))
}

fn read_lines(path: &Path) -> Result<Vec<String>, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| fail(3, format!("reading {}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_owned).collect())
}

fn cmd_generate(args: &GenerateArgs) -> CmdResult {
    let model = checkpoint::load(&args.checkpoint)?;
    let mode = model.config.tokenization;
    if let Some(requested) = args.tokenization {
        if requested != mode {
            return Err(fail(
                4,
                format!("checkpoint vocabulary is {mode:?}-tokenised but {requested:?} input handling was requested"),
            ));
        }
    }
    if args.beam == Some(0) {
        return Err(fail(2, "invalid value for `beam`: must be at least 1"));
    }
    let lines = read_lines(&args.input)?;
    let file = fs::File::create(&args.output)
        .map_err(|e| fail(3, format!("creating {}: {e}", args.output.display())))?;
    let mut out = BufWriter::new(file);
    for line in &lines {
        let mut source = model.vocab.encode(&tokenize(line, mode));
        source.truncate(MAX_SOURCE_LEN);
        let words = if source.is_empty() {
            Vec::new()
        } else {
            let max_len = args
                .max_len
                .unwrap_or_else(|| default_max_len(source.len()));
            match args.beam {
                Some(beam) => beam_decode(&model, &source, beam, max_len)?,
                None => greedy_decode(&model, &source, max_len)?,
            }
        };
        writeln!(out, "{}", detokenize(&model.vocab.decode(&words), mode))
            .map_err(|e| fail(3, format!("writing {}: {e}", args.output.display())))?;
    }
    out.flush()
        .map_err(|e| fail(3, format!("writing {}: {e}", args.output.display())))?;
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs, out: &mut dyn Write) -> CmdResult {
    let candidates = read_lines(&args.candidates)?;
    let mut reference_sets: Vec<Vec<String>> = Vec::with_capacity(args.references.len());
    for path in &args.references {
        let refs = read_lines(path)?;
        if refs.len() != candidates.len() {
            return Err(fail(
                5,
                format!(
                    "{} has {} lines but {} has {}",
                    args.candidates.display(),
                    candidates.len(),
                    path.display(),
                    refs.len()
                ),
            ));
        }
        reference_sets.push(refs);
    }
    if candidates.is_empty() {
        return Err(fail(5, "candidate file is empty"));
    }
    let mode = args.tokenization;
    let cand_toks: Vec<Vec<String>> = candidates.iter().map(|l| tokenize(l, mode)).collect();
    let refs_per_sentence: Vec<Vec<Vec<String>>> = (0..candidates.len())
        .map(|i| {
            reference_sets
                .iter()
                .map(|set| tokenize(&set[i], mode))
                .collect()
        })
        .collect();
    let first_refs: Vec<Vec<String>> = refs_per_sentence.iter().map(|r| r[0].clone()).collect();
    for metric in &args.metrics {
        let report = match metric {
            Metric::Bleu => bleu(&cand_toks, &refs_per_sentence, 4)?,
            Metric::Rouge1 => rouge(&cand_toks, &first_refs, RougeVariant::R1)?,
            Metric::Rouge2 => rouge(&cand_toks, &first_refs, RougeVariant::R2)?,
            Metric::RougeL => rouge(&cand_toks, &first_refs, RougeVariant::RL)?,
        };
        writeln!(out, "{report}").map_err(report_failed)?;
        if let Some(dir) = &args.per_sentence {
            write_per_sentence(dir, &report)?;
        }
    }
    Ok(())
}

fn write_per_sentence(dir: &Path, report: &ScoreReport) -> CmdResult {
    create_dir(dir)?;
    let path = dir.join(format!("{}.tsv", report.metric.to_lowercase()));
    fs::write(&path, report.sentence_tsv())
        .map_err(|e| fail(3, format!("writing {}: {e}", path.display())))
}

fn cmd_params(args: &ParamsArgs, out: &mut dyn Write) -> CmdResult {
    let (mut v, mut k) = match &args.config {
        Some(path) => {
            let c = ExperimentConfig::load(path)?;
            (c.vocab_size as u64, c.hidden_size as u64)
        }
        None => {
            let c = ExperimentConfig::default();
            (c.vocab_size as u64, c.hidden_size as u64)
        }
    };
    if let Some(x) = args.vocab_size {
        v = x;
    }
    if let Some(x) = args.hidden_size {
        k = x;
    }
    if v == 0 || k == 0 {
        return Err(fail(
            2,
            "invalid value: vocab_size and hidden_size must be at least 1",
        ));
    }
    let baseline = count_output_params(GeneratorKind::SoftmaxLinear, ScoreKind::General, v, k);
    writeln!(out, "V={v} k={k}").map_err(report_failed)?;
    writeln!(out, "softmax_linear {}", group(baseline)).map_err(report_failed)?;
    for kind in ScoreKind::ALL {
        let n = count_output_params(GeneratorKind::Wean, kind, v, k);
        let ratio = if n == 0 {
            "n/a".to_string()
        } else {
            format!("{:.2}x", baseline as f64 / n as f64)
        };
        writeln!(out, "wean({}) {} ratio={}", kind.name(), group(n), ratio)
            .map_err(report_failed)?;
    }
    Ok(())
}

/// `12800000` as `12,800,000`.
fn group(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn cmd_synth(args: &SynthArgs) -> CmdResult {
    let corpus = make_synthetic(
        args.task,
        args.size,
        args.vocab_size,
        args.max_len,
        args.seed,
    )
    .map_err(|e| fail(2, e.to_string()))?;
    corpus.write_tsv(&args.out, Tokenization::Word)?;
    Ok(())
}
