//! `mf`: train, analyze, average and verify Multiformer models.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use multiformer::analysis::analyze;
use multiformer::checkpoint::{self, Checkpoint};
use multiformer::config::{resolve_architecture, TaskFile, TOY_TASK};
use multiformer::cost::head_cost;
use multiformer::mhma::HeadSpec;
use multiformer::model::{Multiformer, NUM_SPECIAL};
use multiformer::par::Execution;
use multiformer::training::{train, SyntheticTaskSpec};
use multiformer::verify::{self, VerifyOptions};

#[derive(Parser)]
#[command(name = "mf", version, about = "Multi-head multi-attention speech-translation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on the synthetic task.
    Train {
        /// Architecture file or preset name.
        #[arg(long)]
        arch: String,
        /// Task file (`[task]` plus optional `[train]` overrides).
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Number of optimizer updates.
        #[arg(long)]
        steps: u64,
        /// Output directory for checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to warm-start from (parameters matched by name and shape).
        #[arg(long)]
        init_from: Option<PathBuf>,
        #[arg(long)]
        log_every: Option<u64>,
    },
    /// Median head-contribution report of a trained model.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        arch: String,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        svg: PathBuf,
    },
    /// Average the checkpoints around the lowest-loss one.
    AvgCkpt {
        /// CSV with `step` and `valid_loss` (or `loss`) columns.
        #[arg(long)]
        metrics: PathBuf,
        /// Directory holding `ckpt_<step>.mfc` files.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle, recomposition, gradient and count-law checks.
    Verify {
        /// Smaller, quicker version of every suite.
        #[arg(long)]
        fast: bool,
    },
    /// Score-product counts and wall time per mechanism as CSV.
    Bench {
        #[arg(long)]
        arch: String,
        /// Comma-separated sequence lengths.
        #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024")]
        lens: Vec<usize>,
    },
}

/// Failure that should exit with a specific code.
#[derive(Debug)]
struct ExitWith(u8, String);

impl std::fmt::Display for ExitWith {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for ExitWith {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<ExitWith>() {
            return e.0;
        }
        if let Some(e) = cause.downcast_ref::<multiformer::Error>() {
            return e.exit_code();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn cmd_train(
    arch: &str,
    task: &Path,
    seed: u64,
    steps: u64,
    out: &Path,
    init_from: Option<&Path>,
    log_every: Option<u64>,
) -> Result<()> {
    let arch = resolve_architecture(arch)?;
    let tf = TaskFile::load(task)?;
    let mut cfg = tf.train;
    cfg.seed = seed;
    cfg.max_updates = steps;
    if let Some(l) = log_every {
        cfg.log_every = l;
    }
    cfg.validate()?;
    let mut model = Multiformer::<f32>::new(arch.to_model_config()?, seed)?;
    if let Some(path) = init_from {
        let n = Checkpoint::load(path)?
            .apply_matching(&mut model)
            .with_context(|| format!("initializing from {}", path.display()))?;
        eprintln!("initialized {n} of {} parameters from {}", model.params().len(), path.display());
    }
    let outcome = train(model, cfg, tf.task, out, Execution::Parallel)?;
    if let Some(last) = outcome.last {
        println!(
            "step {} loss {:.4} token_acc {:.4} | held-out loss {:.4} token_acc {:.4}",
            last.step,
            last.loss,
            last.token_acc,
            outcome.last_valid.loss,
            outcome.last_valid.accuracy()
        );
    }
    println!("{} checkpoints in {}", outcome.checkpoints.len(), out.display());
    Ok(())
}

/// Task used to draw analysis samples: the one recorded in the checkpoint,
/// else the toy task resized to the architecture.
fn analysis_task(ckpt: &Checkpoint, feature_dim: usize, vocab: usize) -> Result<SyntheticTaskSpec> {
    if let Some(line) = ckpt.meta("task") {
        return Ok(SyntheticTaskSpec::from_inline(line)?);
    }
    let mut task = TaskFile::parse_str(TOY_TASK, "toy task")?.task;
    task.feature_dim = feature_dim;
    task.symbols = task.symbols.min(vocab.saturating_sub(NUM_SPECIAL)).max(2);
    Ok(task)
}

fn cmd_analyze(ckpt_path: &Path, arch: &str, samples: usize, seed: u64, csv: &Path, svg: &Path) -> Result<()> {
    let arch = resolve_architecture(arch)?;
    let cfg = arch.to_model_config()?;
    let mut model = Multiformer::<f64>::new(cfg.clone(), 0)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    ckpt.apply(&mut model)?;
    let task = analysis_task(&ckpt, cfg.input_feature_dim, cfg.vocab_size)?;
    let report = analyze(&model, &task, samples, seed, Execution::Parallel)?;
    for (l, row) in report.shares.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || report.medians[l].iter().any(|m| !(*m >= 0.0)) {
            return Err(ExitWith(2, format!("layer {} report failed its sanity checks", l + 1)).into());
        }
    }
    report.write(csv, svg)?;
    let uniformity = report.uniformity();
    for (l, u) in uniformity.iter().enumerate() {
        let specs: Vec<String> = report.specs[l].iter().map(HeadSpec::to_string).collect();
        let shares: Vec<String> = report.shares[l].iter().map(|s| format!("{s:.3}")).collect();
        println!("layer {:>2} [{}] shares [{}] uniformity {u:.3}", l + 1, specs.join(" "), shares.join(" "));
    }
    println!("{} samples, {} tokens", report.sample_count, report.token_count);
    Ok(())
}

fn cmd_avg(metrics: &Path, dir: &Path, out: &Path) -> Result<()> {
    let chosen = checkpoint::select_from_metrics(metrics, dir, 3)?;
    checkpoint::average_checkpoints(&chosen, out)?;
    for p in &chosen {
        println!("{}", p.display());
    }
    println!("averaged {} checkpoints into {}", chosen.len(), out.display());
    Ok(())
}

fn cmd_verify(fast: bool) -> Result<()> {
    let opts = if fast { VerifyOptions::fast() } else { VerifyOptions::full() };
    let report = verify::run(opts)?;
    print!("{report}");
    if !report.passed() {
        return Err(ExitWith(2, "verification failed".into()).into());
    }
    Ok(())
}

fn cmd_bench(arch: &str, lens: &[usize]) -> Result<()> {
    if lens.is_empty() || lens.contains(&0) {
        bail!(ExitWith(1, "--lens needs positive lengths".into()));
    }
    let arch = resolve_architecture(arch)?;
    let head_dim = arch.d_model / arch.heads;
    let mut specs: Vec<HeadSpec> = Vec::new();
    for b in &arch.blocks {
        for h in &b.heads {
            if !specs.contains(h) {
                specs.push(*h);
            }
        }
    }
    let mut out = String::from("mechanism,n,score_products,wall_ms\n");
    for &n in lens {
        for spec in &specs {
            let c = head_cost(*spec, n, head_dim, 3, 0)?;
            let _ = writeln!(out, "\"{spec}\",{n},{},{:.3}", c.score_products, c.wall.as_secs_f64() * 1e3);
        }
    }
    print!("{out}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { arch, task, seed, steps, out, init_from, log_every } => {
            cmd_train(&arch, &task, seed, steps, &out, init_from.as_deref(), log_every)
        }
        Command::Analyze { ckpt, arch, samples, seed, csv, svg } => cmd_analyze(&ckpt, &arch, samples, seed, &csv, &svg),
        Command::AvgCkpt { metrics, dir, out } => cmd_avg(&metrics, &dir, &out),
        Command::Verify { fast } => cmd_verify(fast),
        Command::Bench { arch, lens } => cmd_bench(&arch, &lens),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
