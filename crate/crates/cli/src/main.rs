use std::fs;
use std::io::{BufRead, BufReader};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use gensim::api::{self, AppState};
use gensim_core::correction::{
    export_reward_dataset, export_sft_dataset, trigger_external_finetune, FinetuneMethod,
    RevisionFeedback, ScoreFeedback,
};
use gensim_core::experiments::{
    run_fluctuation_experiment, run_scaling_benchmark, write_fluctuation_csv, write_scaling_csv,
};
use gensim_core::gateway::{BackendKind, LatencyModel};
use gensim_core::scheduler::{run_with, EventLogWriter};
use gensim_core::{AgentId, Simulation, SimulationConfig, StopHandle};

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "gensim", version, about = "Round-based LLM agent social simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the HTTP API.
    Serve {
        #[arg(long, env = "GENSIM_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        /// Where checkpoints and exported datasets are written.
        #[arg(long, default_value = "gensim-data")]
        data_dir: PathBuf,
    },
    /// Run a simulation to completion, writing the event log and a final checkpoint.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the number of worker lanes.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Ask one agent of a checkpointed simulation a question.
    Interview {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        id: u64,
        #[arg(long)]
        question: String,
    },
    /// Search agent profiles of a checkpointed simulation.
    Search {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "")]
        query: String,
    },
    /// Turn a feedback file (JSON lines of scores and revisions) into a training dataset.
    Export {
        #[arg(long, value_enum)]
        kind: ExportKind,
        #[arg(long)]
        feedback: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hand an exported dataset to an external training service.
    Finetune {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        endpoint: String,
        #[arg(long, value_enum, default_value_t = Method::Sft)]
        method: Method,
    },
    /// Experiments that write CSV results.
    Bench {
        #[arg(value_enum)]
        which: Bench,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportKind {
    Sft,
    Reward,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Sft,
    Ppo,
}

#[derive(Clone, Copy, ValueEnum)]
enum Bench {
    Fluctuation,
    Scaling,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FeedbackLine {
    Revision(RevisionFeedback),
    Score(ScoreFeedback),
}

#[derive(Deserialize)]
#[serde(default)]
struct FluctuationBench {
    sample_sizes: Vec<usize>,
    repeats: usize,
    seed: u64,
    backend: BackendKind,
}

impl Default for FluctuationBench {
    fn default() -> Self {
        FluctuationBench {
            sample_sizes: vec![300, 3_000, 30_000],
            repeats: 10,
            seed: 0,
            backend: BackendKind::MockStochastic {
                seed: 0,
                rating_weights: vec![0.1; 10],
                latency: LatencyModel::default(),
            },
        }
    }
}

#[derive(Deserialize)]
#[serde(default)]
struct ScalingBench {
    agent_counts: Vec<usize>,
    concurrency_levels: Vec<usize>,
    latency_ms: u64,
    seed: u64,
}

impl Default for ScalingBench {
    fn default() -> Self {
        ScalingBench {
            agent_counts: vec![100, 200, 400],
            concurrency_levels: vec![2, 4, 8],
            latency_ms: 50,
            seed: 0,
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Serve { port, host, data_dir } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(api::serve(SocketAddr::new(host, port), Arc::new(AppState::new(data_dir))))?;
        }
        Command::Run {
            config,
            out,
            resume,
            workers,
        } => run(&config, &out, resume.as_deref(), workers)?,
        Command::Interview {
            checkpoint,
            id,
            question,
        } => {
            let sim = Simulation::restore(&checkpoint)?;
            let ex = sim.interview(AgentId(id), &question)?;
            println!("{}", serde_json::to_string_pretty(&ex)?);
        }
        Command::Search { checkpoint, query } => {
            let sim = Simulation::restore(&checkpoint)?;
            for p in sim.search(&query) {
                println!("{}", serde_json::to_string(p)?);
            }
        }
        Command::Export { kind, feedback, out } => {
            let (scores, revisions) = read_feedback(&feedback)?;
            let n = match kind {
                ExportKind::Sft => export_sft_dataset(&revisions, &out)?,
                ExportKind::Reward => export_reward_dataset(&scores, &out)?,
            };
            println!("wrote {n} records to {}", out.display());
        }
        Command::Finetune {
            dataset,
            endpoint,
            method,
        } => {
            let method = match method {
                Method::Sft => FinetuneMethod::Sft,
                Method::Ppo => FinetuneMethod::Ppo,
            };
            println!("{}", trigger_external_finetune(&dataset, &endpoint, method)?);
        }
        Command::Bench { which, config, out } => {
            fs::create_dir_all(&out)?;
            match which {
                Bench::Fluctuation => {
                    let b: FluctuationBench = read_json(config.as_deref())?;
                    let res = run_fluctuation_experiment(&b.sample_sizes, b.repeats, &b.backend, b.seed)?;
                    write_fluctuation_csv(&out.join("fluctuation.csv"), &res)?;
                    for r in &res {
                        println!("n={:>7} v_sum={:.6}", r.sample_size, r.v_sum);
                    }
                }
                Bench::Scaling => {
                    let b: ScalingBench = read_json(config.as_deref())?;
                    let latency = LatencyModel::constant(Duration::from_millis(b.latency_ms));
                    let rows = run_scaling_benchmark(&b.agent_counts, &b.concurrency_levels, latency, b.seed)?;
                    write_scaling_csv(&out.join("scaling.csv"), &rows)?;
                    for r in &rows {
                        println!("N={:>6} C={:>3} {:.1} ms", r.agents, r.concurrency, r.wall_time_ms);
                    }
                }
            }
        }
    }
    Ok(())
}

fn run(config: &Path, out: &Path, resume: Option<&Path>, workers: Option<usize>) -> Result<()> {
    let mut sim = match resume {
        Some(ckpt) => Simulation::restore(ckpt)?,
        None => {
            let mut c = SimulationConfig::from_json(&fs::read_to_string(config)?)?;
            if let Some(w) = workers {
                c.workers = w;
            }
            Simulation::new(c)?
        }
    };
    fs::create_dir_all(out)?;
    let log_path = out.join("events.jsonl");
    let log = if resume.is_some() {
        fs::OpenOptions::new().create(true).append(true).open(&log_path)?
    } else {
        fs::File::create(&log_path)?
    };
    let mut writer = EventLogWriter::new(log);
    let rounds = sim.config().rounds.saturating_sub(sim.round());
    let stop = StopHandle::new();
    let reports = run_with(&mut sim, rounds, &stop, |outcome| {
        writer.write_round(&outcome.events)?;
        let r = &outcome.report;
        println!(
            "round {:>4}: {} events, {} errors, {} fallbacks, {:.1} ms",
            r.round,
            r.events,
            r.errors,
            r.fallbacks,
            r.wall_time.as_secs_f64() * 1000.0
        );
        Ok(())
    })?;
    sim.checkpoint(&out.join("checkpoint.jsonl"))?;
    let m = sim.metrics();
    println!(
        "{} rounds, {} backend calls ({} failed attempts); log at {}",
        reports.len(),
        m.attempts,
        m.failures,
        log_path.display()
    );
    Ok(())
}

fn read_feedback(path: &Path) -> Result<(Vec<ScoreFeedback>, Vec<RevisionFeedback>)> {
    let mut scores = Vec::new();
    let mut revisions = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line).map_err(|e| format!("{}:{}: {e}", path.display(), i + 1))? {
            FeedbackLine::Score(s) => scores.push(s),
            FeedbackLine::Revision(r) => revisions.push(r),
        }
    }
    Ok((scores, revisions))
}
