use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use convslu::corpus::Split;
use convslu::experiment::{Artifact, ExperimentConfig, Run};

#[derive(Parser)]
#[command(name = "convslu", version, about = "History-conditioned transducer SLU experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Root for relative output directories [env: CONVSLU_OUTPUT_ROOT].
    #[arg(long)]
    output_root: Option<PathBuf>,
    /// Recompute this command's outputs even when they exist.
    #[arg(long)]
    force: bool,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus manifest.
    GenerateCorpus {
        #[command(flatten)]
        common: Common,
        /// Also write one WAV file per utterance.
        #[arg(long)]
        audio: bool,
    },
    /// Compute normalization statistics and optional feature files.
    ExtractFeatures(Common),
    /// Train the context encoder for the configured history spec.
    TrainContext {
        #[command(flatten)]
        common: Common,
        /// Train and score every context-encoder table row.
        #[arg(long)]
        all: bool,
    },
    /// CTC then transducer ASR pre-training.
    PretrainAsr(Common),
    /// Output and input surgery on the ASR model.
    AdaptSlu(Common),
    /// Decode every split with the no-history baseline.
    BuildDecHistories(Common),
    /// Train the SLU model for the configured history and regime.
    TrainSlu(Common),
    /// Write per-utterance hypotheses for one split.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Score the configured row on the test split.
    Evaluate(Common),
    /// Train and evaluate the full results grid for the task.
    RunMatrix(Common),
    /// Render every report in the run directory as tables.
    EmitTables(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenerateCorpus { common, .. }
            | Command::TrainContext { common, .. }
            | Command::Decode { common, .. } => common,
            Command::ExtractFeatures(c)
            | Command::PretrainAsr(c)
            | Command::AdaptSlu(c)
            | Command::BuildDecHistories(c)
            | Command::TrainSlu(c)
            | Command::Evaluate(c)
            | Command::RunMatrix(c)
            | Command::EmitTables(c) => c,
        }
    }

    /// Artifacts `--force` recomputes.
    fn forced(&self) -> Vec<Artifact> {
        match self {
            Command::GenerateCorpus { .. } => vec![Artifact::Corpus],
            Command::ExtractFeatures(_) => vec![Artifact::Features],
            Command::TrainContext { .. } => vec![Artifact::Context, Artifact::Report],
            Command::PretrainAsr(_) => vec![Artifact::Asr],
            Command::AdaptSlu(_) => vec![Artifact::Adapted],
            Command::BuildDecHistories(_) => vec![Artifact::DecHistories],
            Command::TrainSlu(_) => vec![Artifact::SluModel],
            Command::Decode { .. } | Command::Evaluate(_) | Command::EmitTables(_) => vec![Artifact::Report],
            Command::RunMatrix(_) => Artifact::ALL.to_vec(),
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common();
    let config = ExperimentConfig::load(&common.config)?;
    let force = if common.force { cli.command.forced() } else { Vec::new() };
    let mut run = Run::open(config, common.output_root.as_deref(), &force)?;
    run.verbose = !common.quiet;
    match &cli.command {
        Command::GenerateCorpus { audio, .. } => {
            let corpus = run.corpus()?;
            println!("{} conversations in {}", corpus.conversations.len(), run.corpus_dir().display());
            if *audio {
                run.write_audio()?;
            }
        }
        Command::ExtractFeatures(_) => {
            let n = run.extract_features()?;
            println!("normalization statistics written; {n} feature files");
        }
        Command::TrainContext { all, .. } => {
            if *all {
                for r in run.context_table()? {
                    println!("{} {:<28} {} {:.4}", r.row, r.description, r.metric_name, r.metric);
                }
            } else {
                let spec = run.config.history_spec();
                run.context(&spec)?;
                println!("context encoder in {}", run.context_dir(&spec).display());
            }
        }
        Command::PretrainAsr(_) => {
            let s = run.asr_summary()?;
            println!("ASR valid WER {:.4}, test WER {:.4}", s.best_valid_wer, s.test_wer);
        }
        Command::AdaptSlu(_) => {
            let history = run.config.regime.uses_history();
            run.adapted(history)?;
            println!("adapted model in {}", run.adapted_path(history).display());
        }
        Command::BuildDecHistories(_) => {
            let cache = run.dec_histories()?;
            println!("{} decoded utterances in {}", cache.len(), run.dec_path().display());
        }
        Command::TrainSlu(_) => {
            let row = run.configured_row();
            run.model(&row)?;
            println!("row {} model in {}", row.id, run.row_dir(&row.model_of).display());
        }
        Command::Decode { split, .. } => {
            let path = run.write_hypotheses(&run.configured_row(), *split)?;
            println!("{}", path.display());
        }
        Command::Evaluate(_) => {
            let r = run.evaluate_row(&run.configured_row())?;
            println!("{} {} {} {:.4}", r.row, r.regime, r.metric_name, r.metric);
        }
        Command::RunMatrix(_) => {
            for r in run.run_matrix()? {
                let wer = r.wer.map(|w| format!("{w:.4}")).unwrap_or_default();
                println!("{:<4} {:<8} {} {:.4} wer {wer}", r.row, r.regime, r.metric_name, r.metric);
            }
        }
        Command::EmitTables(_) => {
            let paths = run.emit_tables().context("no reports to tabulate yet")?;
            for p in paths {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
