//! `outage`: corpus generation, ground-truth construction, replay,
//! evaluation and the HTTP service.

mod offline;
mod serve;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use outage_core::config::MatchMode;
use outage_core::SystemConfig;
use std::path::PathBuf;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "outage",
    version,
    about = "Outage-management agent and its replay evaluator"
)]
struct Cli {
    /// TOML configuration file. `OUTAGE_*` environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus: traces, labels, runbooks and topology.
    GenCorpus {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value = "mixed")]
        profile: String,
        #[arg(long, default_value = "corpus")]
        out: PathBuf,
    },
    /// Build G1 and G2 for one trace.
    BuildGt {
        /// `<stem>.trace.jsonl` or `<stem>.meta.json`.
        #[arg(long)]
        trace: PathBuf,
        /// Label file; defaults to the trace's sibling `<stem>.labels.jsonl`.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[command(flatten)]
        knowledge: Knowledge,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replay one trace through the engine on a virtual clock.
    Replay {
        #[arg(long)]
        trace: PathBuf,
        #[command(flatten)]
        knowledge: Knowledge,
        /// Topology file; defaults to `topology.toml` beside the trace.
        #[arg(long)]
        topology: Option<PathBuf>,
        /// Keep the post-replay memory here instead of discarding it.
        #[arg(long)]
        memory_out: Option<PathBuf>,
        /// Output directory for recommendations, feedback, stream and summary.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score replayed recommendations against ground truth.
    Evaluate {
        /// `*.recs.jsonl` files or directories holding them.
        #[arg(long, num_args = 1.., required = true)]
        recs: Vec<PathBuf>,
        /// `*.gt.json` files or directories holding them.
        #[arg(long, num_args = 1.., required = true)]
        gt: Vec<PathBuf>,
        #[command(flatten)]
        matching: MatchArgs,
        /// Also write the embedding export here.
        #[arg(long)]
        coverage: Option<PathBuf>,
        /// Playbooks to include in the embedding export.
        #[arg(long)]
        playbooks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export embeddings of predicted, ground-truth and playbook actions.
    ExportCoverage {
        #[arg(long, num_args = 1.., required = true)]
        recs: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        gt: Vec<PathBuf>,
        #[arg(long)]
        playbooks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build ground truth, replay and evaluate every trace of a corpus.
    Run {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        matching: MatchArgs,
        /// Share memory across traces in id order, consolidating after each.
        #[arg(long)]
        evolve: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill playbooks into a memory directory.
    Distill {
        #[arg(long)]
        playbooks: PathBuf,
        #[arg(long)]
        memory: PathBuf,
    },
    /// Fold the closed cases of a memory directory into long-term knowledge.
    Consolidate {
        #[arg(long)]
        memory: PathBuf,
    },
    /// Run the HTTP service.
    Serve(serve::ServeArgs),
}

/// Where long-term knowledge comes from.
#[derive(Args, Clone, Default)]
struct Knowledge {
    /// Memory directory to start from. It is copied, never modified.
    #[arg(long)]
    memory_snapshot: Option<PathBuf>,
    /// Playbook directory to distill before starting.
    #[arg(long)]
    playbooks: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct MatchArgs {
    /// Matching window in seconds.
    #[arg(long)]
    window: Option<i64>,
    /// Similarity threshold for a match.
    #[arg(long)]
    threshold: Option<f64>,
    /// Similarity to a playbook action needed to join G2.
    #[arg(long)]
    g2_threshold: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Accept recommendations issued after the action within the window.
    #[arg(long)]
    symmetric_window: bool,
    /// Exact maximum-score assignment instead of greedy.
    #[arg(long)]
    optimal: bool,
    /// Let the gateway judge candidate pairs.
    #[arg(long)]
    judge: bool,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Mode {
    OneToOne,
    ManyToOne,
}

impl MatchArgs {
    fn apply(&self, cfg: &mut SystemConfig) -> Result<()> {
        let e = &mut cfg.eval;
        if let Some(w) = self.window {
            e.window_s = w;
        }
        if let Some(t) = self.threshold {
            e.threshold = t;
        }
        if let Some(t) = self.g2_threshold {
            e.g2_threshold = t;
        }
        if let Some(m) = self.mode {
            e.mode = match m {
                Mode::OneToOne => MatchMode::OneToOne,
                Mode::ManyToOne => MatchMode::ManyToOne,
            };
        }
        e.symmetric_window |= self.symmetric_window;
        e.optimal |= self.optimal;
        e.judge |= self.judge;
        e.validate()?;
        Ok(())
    }
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_env("OUTAGE_LOG").unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let mut cfg = SystemConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenCorpus {
            seed,
            n,
            profile,
            out,
        } => offline::gen_corpus(seed, n, &profile, &out),
        Command::BuildGt {
            trace,
            labels,
            knowledge,
            out,
        } => offline::build_gt(&cfg, &trace, labels.as_deref(), &knowledge, &out),
        Command::Replay {
            trace,
            knowledge,
            topology,
            memory_out,
            out,
        } => offline::replay(
            &cfg,
            &trace,
            &knowledge,
            topology.as_deref(),
            memory_out.as_deref(),
            &out,
        ),
        Command::Evaluate {
            recs,
            gt,
            matching,
            coverage,
            playbooks,
            out,
        } => {
            matching.apply(&mut cfg)?;
            offline::evaluate(
                &cfg,
                &recs,
                &gt,
                coverage.as_deref(),
                playbooks.as_deref(),
                &out,
            )
        }
        Command::ExportCoverage {
            recs,
            gt,
            playbooks,
            out,
        } => offline::export_coverage(&cfg, &recs, &gt, playbooks.as_deref(), &out),
        Command::Run {
            corpus,
            matching,
            evolve,
            out,
        } => {
            matching.apply(&mut cfg)?;
            offline::run(&cfg, &corpus, evolve, &out)
        }
        Command::Distill { playbooks, memory } => offline::distill(&cfg, &playbooks, &memory),
        Command::Consolidate { memory } => offline::consolidate(&cfg, &memory),
        Command::Serve(args) => serve::run(cfg, args),
    }
}
