use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rdg::bench::{run_suite, write_bench_csv, BenchConfig, Suite};
use rdg::data::{load_corpus, synthetic_corpus, write_corpus, DataError, TreeInstance, TreeShape, Vocab};
use rdg::executor::{write_trace_csv, Executor, RunOptions};
use rdg::models::{build, BuiltModel, Checkpoint, Mode, ModelConfig, ModelKind, ModelParams};
use rdg::trainer::{predict, train, write_metrics_csv, TrainConfig};

#[derive(Parser)]
#[command(name = "rdg", version, about = "Recursive dataflow graphs: train, infer and benchmark tree models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Predict root classes with a trained checkpoint.
    Infer(InferArgs),
    /// Run a throughput benchmark suite.
    Bench(BenchArgs),
    /// Write a synthetic corpus.
    GenData(GenArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    /// Cross-entropy at the root only.
    Root,
    /// Cross-entropy summed over every node.
    All,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long, default_value = "treernn", value_parser = parse_kind)]
    model: ModelKind,
    #[arg(long, default_value = "recursive", value_parser = parse_mode)]
    mode: Mode,
    /// Training corpus (one labeled tree per line).
    #[arg(long)]
    data: PathBuf,
    /// Optional validation corpus used for accuracy.
    #[arg(long)]
    valid: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 25, value_parser = clap::value_parser!(u64).range(1..))]
    batch: u64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    l2: f64,
    #[arg(long, value_enum, default_value = "all")]
    loss: LossArg,
    /// Number of classes (default: largest label in the data plus one, at least 2).
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value = "model.ckpt.json")]
    out: PathBuf,
    #[arg(long, default_value = "metrics.csv")]
    metrics: PathBuf,
}

#[derive(clap::Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,
    #[arg(long, default_value = "recursive", value_parser = parse_mode)]
    mode: Mode,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long, value_parser = parse_suite)]
    suite: Suite,
    /// Comma-separated list of modes.
    #[arg(long = "modes", alias = "mode", value_delimiter = ',', default_value = "recursive", value_parser = parse_mode)]
    modes: Vec<Mode>,
    #[arg(long, default_value = "treernn", value_parser = parse_kind)]
    model: ModelKind,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    /// Workers for the balancedness and scaling suites.
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    runs: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sleep injected into every numeric kernel, in microseconds.
    #[arg(long)]
    kernel_delay_us: Option<u64>,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct GenArgs {
    #[arg(long, value_parser = parse_shape)]
    shape: TreeShape,
    #[arg(long)]
    leaves: usize,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 10)]
    vocab: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse()
}

fn parse_shape(s: &str) -> Result<TreeShape, String> {
    s.parse()
}

/// Exit 2 for invalid arguments, 1 for everything else.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Bench(a) => cmd_bench(a),
        Command::GenData(a) => cmd_gendata(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `rdg --help` for usage.");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn tracing_enabled() -> bool {
    std::env::var("RDG_TRACE").is_ok_and(|v| v == "1")
}

/// With RDG_TRACE=1, run one traced forward pass and write its events to
/// RDG_TRACE_FILE (default `rdg-trace.csv`).
fn maybe_trace(model: &BuiltModel, params: &ModelParams, tree: &TreeInstance, executor: &Executor) -> anyhow::Result<()> {
    if !tracing_enabled() {
        return Ok(());
    }
    let path = std::env::var("RDG_TRACE_FILE").unwrap_or_else(|_| "rdg-trace.csv".into());
    let feeds = model.feeds(tree, &params.shared())?;
    let opts = RunOptions {
        trace: true,
        ..Default::default()
    };
    let out = executor.run(&model.forward, &feeds, &[model.logits], &opts)?;
    let file = fs::File::create(&path).with_context(|| format!("creating {path}"))?;
    write_trace_csv(&out.trace, file)?;
    log::info!("wrote {} trace events to {path}", out.trace.len());
    Ok(())
}

fn capacity_for(trees: &[TreeInstance]) -> usize {
    trees.iter().map(|t| t.len()).max().unwrap_or(1)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    if a.hidden == 0 {
        return Err(Failure::Usage("--hidden must be at least 1".into()));
    }
    let mut vocab = Vocab::new();
    let corpus = load_corpus(&a.data, &mut vocab, true).map_err(|e| anyhow!(e))?;
    if corpus.is_empty() {
        return Err(Failure::Runtime(anyhow!("{} contains no trees", a.data.display())));
    }
    let valid = match &a.valid {
        Some(p) => Some(load_corpus(p, &mut vocab, true).map_err(|e| anyhow!(e))?),
        None => None,
    };
    let max_label = corpus
        .iter()
        .chain(valid.iter().flatten())
        .flat_map(|t| t.nodes.iter().map(|n| n.label))
        .max()
        .unwrap_or(0);
    let classes = a.classes.unwrap_or((max_label + 1).max(2));
    let mut cfg = ModelConfig::new(a.model, a.hidden, vocab.len(), classes);
    cfg.per_node_loss = matches!(a.loss, LossArg::All);
    let capacity = capacity_for(&corpus).max(valid.as_deref().map_or(1, capacity_for));
    let model = build(&cfg, a.mode, capacity).map_err(|e| anyhow!(e))?;
    let mut params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(a.seed));
    let executor = Executor::new(a.threads as usize);
    maybe_trace(&model, &params, &corpus[0], &executor)?;
    let tc = TrainConfig {
        batch_size: a.batch as usize,
        epochs: a.epochs,
        lr: a.lr,
        l2: a.l2,
        threads: a.threads as usize,
        seed: a.seed,
        ..Default::default()
    };
    log::info!(
        "training {} ({}) d={} V={} C={} on {} trees, batch {}, {} threads",
        a.model,
        a.mode,
        a.hidden,
        vocab.len(),
        classes,
        corpus.len(),
        tc.batch_size,
        tc.threads
    );
    let history = train(&model, &mut params, &corpus, valid.as_deref(), &tc, &executor).map_err(|e| anyhow!(e))?;
    write_metrics_csv(&a.metrics, &history).map_err(|e| anyhow!(e))?;
    let ck = params.to_checkpoint(Some(vocab.tokens()));
    fs::write(&a.out, ck.to_json()).with_context(|| format!("writing {}", a.out.display()))?;
    log::info!("wrote {} and {}", a.out.display(), a.metrics.display());
    Ok(())
}

fn read_checkpoint(path: &Path) -> anyhow::Result<(ModelParams, Vocab)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ck = Checkpoint::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    let params = ModelParams::from_checkpoint(&ck)?;
    let vocab = match ck.vocab {
        Some(tokens) => Vocab::from_tokens(tokens),
        None => Vocab::synthetic(ck.vocab_size),
    };
    if vocab.len() != params.vocab {
        return Err(anyhow!(
            "checkpoint vocabulary lists {} tokens but E has {} rows",
            vocab.len(),
            params.vocab
        ));
    }
    Ok((params, vocab))
}

fn cmd_infer(a: InferArgs) -> CmdResult {
    let (params, mut vocab) = read_checkpoint(&a.ckpt)?;
    let corpus = load_corpus(&a.data, &mut vocab, false).map_err(|e| anyhow!(e))?;
    let cfg = ModelConfig::new(params.kind, params.d, params.vocab, params.classes);
    let model = build(&cfg, a.mode, capacity_for(&corpus)).map_err(|e| anyhow!(e))?;
    let executor = Executor::new(a.threads as usize);
    if let Some(first) = corpus.first() {
        maybe_trace(&model, &params, first, &executor)?;
    }
    let start = Instant::now();
    let (preds, _) = predict(&model, &params, &corpus, &executor).map_err(|e| anyhow!(e))?;
    let secs = start.elapsed().as_secs_f64();
    let mut correct = 0;
    for (i, (p, t)) in preds.iter().zip(&corpus).enumerate() {
        println!("{i}\t{p}\t{}", t.root_label());
        correct += usize::from(*p == t.root_label());
    }
    let n = corpus.len();
    println!(
        "accuracy {:.6} ({correct}/{n}) throughput {:.1} instances/s",
        correct as f64 / n.max(1) as f64,
        n as f64 / secs.max(1e-12)
    );
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    if a.hidden == 0 {
        return Err(Failure::Usage("--hidden must be at least 1".into()));
    }
    let cfg = BenchConfig {
        model: a.model,
        d: a.hidden,
        modes: a.modes,
        warmup: a.warmup,
        runs: a.runs as usize,
        threads: a.threads as usize,
        seed: a.seed,
        kernel_delay: a.kernel_delay_us.map(Duration::from_micros),
        ..Default::default()
    };
    let rows = run_suite(a.suite, &cfg).map_err(|e| anyhow!(e))?;
    write_bench_csv(&a.out, &rows).map_err(|e| anyhow!(e))?;
    for r in &rows {
        println!(
            "{:<9} {:<8} {:<14} batch {:>2} threads {:>2}: {:>10.1} inst/s  mean {:.3} ms  p95 {:.3} ms",
            r.model, r.mode, r.shape, r.batch, r.threads, r.instances_per_s, r.mean_ms, r.p95_ms
        );
    }
    log::info!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_gendata(a: GenArgs) -> CmdResult {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let trees = match synthetic_corpus(a.shape, a.leaves, a.count, a.vocab, a.classes, &mut rng) {
        Ok(t) => t,
        Err(DataError::Argument(msg)) => return Err(Failure::Usage(msg)),
        Err(e) => return Err(Failure::Runtime(anyhow!(e))),
    };
    let vocab = Vocab::synthetic(a.vocab);
    write_corpus(&a.out, &trees, &vocab).map_err(|e| anyhow!(e))?;
    log::info!("wrote {} trees to {}", trees.len(), a.out.display());
    Ok(())
}
