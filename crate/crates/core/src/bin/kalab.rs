use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kalab::config::RunConfig;
use kalab::corpus::dump_corpus;
use kalab::error::{Error, Result};
use kalab::metrics::{read_metrics, MetricRecord};
use kalab::report::{build_report, write_curves};
use kalab::trainer::{self, open_run, prepare_out_dir, Setup, TrainOptions};

#[derive(Parser)]
#[command(name = "kalab", version, about = "Synthetic-biography knowledge lab")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "KALAB_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate profiles, vocabulary and an optional corpus sample.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model, evaluating and checkpointing periodically.
    Train {
        /// Required unless resuming (the run directory keeps a snapshot).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Suppress progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint of a run; prints metric records as JSON lines.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write records here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Confidence, attention-mass and rank-bin probes on a checkpoint.
    Probe {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize metrics.jsonl and export one CSV per curve.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// Directory for report.md and curves/ (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Emergence threshold (default: the run's emergence_threshold or 0.8).
        #[arg(long)]
        threshold: Option<f64>,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.validate()?;
    }
    Ok(cfg)
}

/// Step a checkpoint corresponds to.
fn checkpoint_step(cfg: &RunConfig, path: Option<&Path>) -> u64 {
    path.and_then(|p| p.file_name())
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_prefix("step-"))
        .and_then(|n| n.strip_suffix(".ckpt"))
        .and_then(|n| n.parse().ok())
        .unwrap_or(cfg.max_steps)
}

fn emit(records: &[MetricRecord], out: Option<&Path>) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Gen { config, out, force, seed } => {
            let cfg = load_config(&config, seed)?;
            prepare_out_dir(&out, force)?;
            let setup = Setup::new(&cfg)?;
            setup.write_artifacts(&cfg, &out)?;
            if cfg.dump_docs > 0 {
                let mut stream = setup.stream(&cfg)?;
                dump_corpus(&mut stream, cfg.dump_docs, &out.join("corpus_sample.jsonl"))?;
            }
            eprintln!(
                "generated {} training and {} unseen entities, vocabulary {} -> {}",
                cfg.num_train,
                cfg.num_unknown,
                setup.vocab.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            out,
            resume,
            force,
            seed,
            quiet,
        } => {
            let cfg = match (&config, resume) {
                (Some(p), _) => load_config(p, seed)?,
                (None, true) => load_config(&out.join(trainer::CONFIG_FILE), seed)?,
                (None, false) => return Err(Error::InvalidArgument("--config is required unless --resume".into())),
            };
            let s = trainer::train(
                &cfg,
                &out,
                &TrainOptions {
                    resume,
                    force,
                    stop_after: None,
                    verbose: !quiet,
                },
            )?;
            eprintln!(
                "trained {} steps, final loss {:.4}, {} evaluation snapshots -> {}",
                s.steps,
                s.final_loss,
                s.eval_snapshots,
                s.out_dir.display()
            );
        }
        Command::Eval { run, checkpoint, out } => {
            let (cfg, setup, model) = open_run(&run, checkpoint.as_deref())?;
            let step = checkpoint_step(&cfg, checkpoint.as_deref());
            let evaluator = setup.evaluator(&cfg)?;
            let (report, _) = evaluator.evaluate(&model, step)?;
            emit(&report.records(step, cfg.seed), out.as_deref())?;
        }
        Command::Probe { run, checkpoint, out } => {
            let (cfg, setup, model) = open_run(&run, checkpoint.as_deref())?;
            let step = checkpoint_step(&cfg, checkpoint.as_deref());
            let evaluator = setup.evaluator(&cfg)?;
            let set = evaluator.set_for(step)?;
            let probe_dir = out.as_deref().and_then(|p| p.parent()).unwrap_or(&run).to_path_buf();
            let recs = trainer::run_probes(&cfg, &setup, &model, &set, step, true, &probe_dir)?;
            emit(&recs, out.as_deref())?;
        }
        Command::Report { run, out, threshold } => {
            let records = read_metrics(&run.join(trainer::METRICS_FILE))?;
            let threshold = match threshold {
                Some(t) => t,
                None => RunConfig::load(&run.join(trainer::CONFIG_FILE))
                    .map(|c| c.emergence_threshold)
                    .unwrap_or(0.8),
            };
            let report = build_report(&records, threshold)?;
            let out = out.unwrap_or(run);
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let md = report.render_markdown();
            let p = out.join("report.md");
            std::fs::write(&p, &md).map_err(|e| Error::io(&p, e))?;
            let curves = write_curves(&records, &out.join("curves"))?;
            print!("{md}");
            eprintln!("wrote {} and {} curve files", p.display(), curves.len());
        }
    }
    Ok(())
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
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
        Err(_) => ExitCode::from(2),
    }
}
