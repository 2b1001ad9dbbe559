use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dialogscore::bilstm::BiLstmModel;
use dialogscore::corpus::{load_corpus, synthesize_corpus, write_corpus, SignalSpec};
use dialogscore::experiment::{build_report, cv_run, fuse_run, ExperimentConfig, External};
use dialogscore::fusion::FusionMode;
use dialogscore::{agreement, Construct, Error};

/// Train, cross-validate and fuse automated scorers for text dialogs.
#[derive(Debug, Parser)]
#[command(name = "dialogscore", version)]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Md,
    Csv,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Mean,
    Median,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus as JSON Lines.
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rater_noise: Option<f64>,
        #[arg(long)]
        decoy_rate: Option<f64>,
        #[arg(long)]
        confusion_rate: Option<f64>,
    },
    /// Cross-validate every configured system on every configured construct.
    CvRun {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Best-subset fusion over a run's prediction sets.
    Fuse {
        #[arg(long, alias = "predictions-dir")]
        run_dir: PathBuf,
        /// External system as `id=path`; `path` is one JSONL file or a
        /// directory of `<construct>.jsonl` files.
        #[arg(long = "external")]
        externals: Vec<String>,
        #[arg(long, value_enum, default_value = "mean")]
        mode: Mode,
    },
    /// Print the construct x system table of a run.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
        /// Corpus whose rater scores fill the human agreement columns.
        #[arg(long)]
        ratings: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention heatmap of one dialog as SVG, with a `token,alpha` CSV
    /// next to it.
    Heatmap {
        /// An `lstm_att` snapshot directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dialog_id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Human inter-rater agreement for one construct.
    Irr {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        construct: String,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn write_out(path: &std::path::Path, body: &str) -> Result<(), Failure> {
    fs::write(path, body).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("DIALOGSCORE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::Usage(format!("DIALOGSCORE_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Synth {
            seed,
            n,
            out,
            rater_noise,
            decoy_rate,
            confusion_rate,
        } => {
            let d = SignalSpec::default();
            let spec = SignalSpec {
                rater_noise: rater_noise.unwrap_or(d.rater_noise),
                decoy_rate: decoy_rate.unwrap_or(d.decoy_rate),
                confusion_rate: confusion_rate.unwrap_or(d.confusion_rate),
            };
            let dialogs = synthesize_corpus(seed, n, &spec)?;
            write_corpus(&out, &dialogs)?;
            log::info!("wrote {} dialogs to {}", dialogs.len(), out.display());
        }
        Command::CvRun { config, out_dir } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(dir) = out_dir {
                cfg.out_dir = dir;
            }
            let records = cv_run(&cfg)?;
            let failed: Vec<String> = records
                .iter()
                .filter(|r| r.error.is_some())
                .map(|r| format!("{}/{} fold {}", r.construct, r.system, r.fold))
                .collect();
            let report = build_report(&cfg.out_dir, None)?.to_markdown();
            write_out(&cfg.out_dir.join("report.md"), &report)?;
            print!("{report}");
            if !failed.is_empty() {
                eprintln!("failed cells: {}", failed.join(", "));
            }
        }
        Command::Fuse {
            run_dir,
            externals,
            mode,
        } => {
            let externals = externals.iter().map(|s| s.parse::<External>()).collect::<Result<Vec<_>, _>>()?;
            let mode = match mode {
                Mode::Mean => FusionMode::Mean,
                Mode::Median => FusionMode::Median,
            };
            for r in fuse_run(&run_dir, &externals, mode)? {
                println!(
                    "{}: {} (qwk {:.3}, pooled {:.3})",
                    r.construct,
                    r.members.join("+"),
                    r.mean_qwk,
                    r.pooled_qwk
                );
            }
        }
        Command::Report {
            run_dir,
            format,
            ratings,
            out,
        } => {
            let ratings = ratings.map(load_corpus).transpose()?;
            let report = build_report(&run_dir, ratings.as_deref())?;
            let body = match format {
                Format::Md => report.to_markdown(),
                Format::Csv => report.to_csv()?,
            };
            match out {
                Some(path) => write_out(&path, &body)?,
                None => print!("{body}"),
            }
        }
        Command::Heatmap {
            model,
            corpus,
            dialog_id,
            out,
        } => {
            let model = BiLstmModel::load(&model).map_err(|e| match e {
                Error::Schema(msg) => Failure::Usage(format!("{}: {msg}", model.display())),
                e => e.into(),
            })?;
            if model.layout.attn.is_none() {
                return Err(Failure::Usage("model was trained without attention".into()));
            }
            let dialogs = load_corpus(&corpus)?;
            let dialog = dialogs
                .iter()
                .find(|d| d.id == dialog_id)
                .ok_or_else(|| Failure::Usage(format!("no dialog `{dialog_id}` in {}", corpus.display())))?;
            let weights = model.attention_heatmap(dialog)?;
            write_out(&out, &dialogscore::experiment::heatmap_svg(&weights))?;
            write_out(&out.with_extension("csv"), &dialogscore::experiment::heatmap_csv(&weights)?)?;
        }
        Command::Irr { ratings, construct } => {
            let construct: Construct = construct.parse()?;
            let dialogs = load_corpus(&ratings)?;
            let (kappa, alpha) = agreement::corpus_irr(&dialogs, construct)?;
            println!("conger_kappa\t{kappa:.6}");
            println!("krippendorff_alpha\t{alpha:.6}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
