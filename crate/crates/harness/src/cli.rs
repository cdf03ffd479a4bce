//! Command-line surface.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{ConfigLayer, RunConfig};
use crate::error::HarnessError;
use crate::runner::{self, ExperimentOptions};
use crate::{report, synth};

#[derive(Debug, Parser)]
#[command(name = "citeprobe", version, about = "Tests whether RAG citations are faithful or post-rationalized")]
pub struct Cli {
    /// TOML config file; flags override its keys
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// More log output (-v info, -vv debug)
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Chunk and index a corpus into the store directory
    Index {
        #[command(flatten)]
        overrides: ConfigLayer,
        /// Replace an existing store
        #[arg(long)]
        force: bool,
    },
    /// Answer one question and list the context it was given
    Ask {
        #[command(flatten)]
        overrides: ConfigLayer,
        question: String,
    },
    /// Baselines, forged trials and summary into a run directory
    Experiment {
        #[command(flatten)]
        overrides: ConfigLayer,
        /// Start a new run directory instead of resuming
        #[arg(long)]
        fresh: bool,
    },
    /// Per-condition table from a run directory or a counts file
    Report {
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// JSON array of {condition, n_total, n_recovered, n_adversarial_cited}
        #[arg(long)]
        counts: Option<PathBuf>,
        /// Also write the CSV here
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a synthetic corpus, QA set and scripted-model knowledge
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        questions: usize,
        #[arg(long, default_value_t = 60)]
        filler: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn resolve(path: &Option<PathBuf>, overrides: &ConfigLayer) -> Result<RunConfig, HarnessError> {
    Ok(RunConfig::resolve(path.as_deref(), overrides)?)
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<(), HarnessError> {
    let w = |out: &mut dyn Write, s: &str| {
        out.write_all(s.as_bytes()).map_err(|e| HarnessError::Usage(format!("stdout: {e}")))
    };
    match cli.command {
        Command::Index { overrides, force } => {
            let config = resolve(&cli.config, &overrides)?;
            let stats = runner::cmd_index(&config, force)?;
            w(out, &format!("{stats}\n"))
        }
        Command::Ask { overrides, question } => {
            let config = resolve(&cli.config, &overrides)?;
            let outcome = runner::cmd_ask(&config, &question, None)?;
            w(out, &outcome.render())
        }
        Command::Experiment { overrides, fresh } => {
            let config = resolve(&cli.config, &overrides)?;
            let outcome = runner::cmd_experiment(&config, &ExperimentOptions { fresh }, None)?;
            w(
                out,
                &format!(
                    "run {}\n{} trials ({} reused), {} baseline failures, {} questions skipped\n\n{}",
                    outcome.run_dir.display(),
                    outcome.executed_trials + outcome.reused_trials,
                    outcome.reused_trials,
                    outcome.baseline_failures,
                    outcome.skipped_questions,
                    report::render(&outcome.summary)
                ),
            )
        }
        Command::Report { run_dir, counts, csv } => {
            let summary = match (run_dir, counts) {
                (Some(_), Some(_)) => {
                    return Err(HarnessError::Usage("--run-dir and --counts are mutually exclusive".into()))
                }
                (None, None) => return Err(HarnessError::Usage("one of --run-dir or --counts is required".into())),
                (Some(dir), None) => report::load_summary(&dir)?,
                (None, Some(path)) => report::load_counts(&path)?,
            };
            if let Some(path) = csv {
                crate::io::write_atomic(&path, |f| f.write_all(report::csv(&summary).as_bytes()))?;
            }
            w(out, &report::render(&summary))
        }
        Command::Synth { out: dir, questions, filler, seed } => {
            let options = synth::SynthOptions { n_questions: questions, n_filler: filler, seed, ..Default::default() };
            let corpus = synth::generate(&options);
            synth::write(&dir, &corpus)?;
            w(
                out,
                &format!(
                    "wrote {} documents and {} questions to {}\n",
                    corpus.documents.len(),
                    corpus.qa.len(),
                    dir.display()
                ),
            )
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    0
                }
                _ => {
                    let _ = write!(err, "{e}");
                    1
                }
            };
        }
    };
    init_logging(cli.verbose);
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
