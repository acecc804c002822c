use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use medner_core::config::PipelineConfig;
use medner_core::gateway::GatewayMode;
use medner_core::pipeline::{Pipeline, PipelineError, ReportFormat, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use medner_core::prompt::PromptStrategy;

/// Prompt-based medical entity recognition with a prompt ensemble.
#[derive(Debug, Parser)]
#[command(name = "medner", version)]
struct Cli {
    /// Pipeline config file (TOML).
    #[arg(long, global = true, default_value = "medner.toml")]
    config: PathBuf,
    /// Overrides `paths.out_dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Overrides `paths.cache_dir`.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse the corpus and print per-strategy sample counts.
    Ingest {
        #[arg(long, value_enum, default_value_t = SummaryFormat::Text)]
        format: SummaryFormat,
    },
    /// Build prompts, obtain completions and write per-strategy entity files.
    Run {
        #[arg(long, value_delimiter = ',', default_value = "zero,doc,sent,ent", value_parser = parse_strategy)]
        strategies: Vec<PromptStrategy>,
        /// Defaults to `llm.mode` from the config.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<GatewayMode>,
        /// Derived from the configuration when omitted.
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Cluster and vote over a run's strategy outputs.
    Ensemble {
        #[arg(long = "run")]
        run_id: String,
        /// Overrides `ensemble.tau`.
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Score strategy and ensemble outputs against the gold annotations.
    Evaluate {
        #[arg(long = "run")]
        run_id: String,
    },
    /// Print an evaluation artifact.
    Report {
        #[arg(long = "run")]
        run_id: String,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SummaryFormat {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
    Csv,
}

fn parse_strategy(s: &str) -> Result<PromptStrategy, String> {
    s.parse()
}

fn parse_mode(s: &str) -> Result<GatewayMode, String> {
    s.parse()
}

fn execute(cli: Cli) -> anyhow::Result<i32> {
    let mut config = PipelineConfig::load(&cli.config).map_err(PipelineError::from)?;
    if let Some(dir) = cli.out_dir {
        config.paths.out_dir = dir;
    }
    if let Some(dir) = cli.cache_dir {
        config.paths.cache_dir = dir;
    }
    let pipeline = Pipeline::from_env(config)?;

    match cli.command {
        Command::Ingest { format } => {
            let summary = pipeline.ingest()?;
            match format {
                SummaryFormat::Text => print!("{}", summary.to_text()),
                SummaryFormat::Json => println!("{}", serde_json::to_string_pretty(&summary)?),
            }
            Ok(EXIT_OK)
        }
        Command::Run { strategies, mode, run_id } => {
            let mode = mode.unwrap_or(pipeline.config().llm.mode);
            let manifest = pipeline.run(&strategies, mode, run_id.as_deref())?;
            print!("{}", manifest.to_text());
            println!("{}", manifest.run_id);
            for failure in manifest.failures() {
                eprintln!("error: {}: {}", failure.strategy, failure.error.as_deref().unwrap_or("failed"));
            }
            Ok(manifest.exit_code())
        }
        Command::Ensemble { run_id, tau } => {
            let output = pipeline.ensemble(&run_id, tau)?;
            println!("{}", output.summary());
            Ok(EXIT_OK)
        }
        Command::Evaluate { run_id } => {
            let report = pipeline.evaluate(&run_id)?;
            print!("{}", report.to_text());
            let failed = report.rows.iter().filter(|r| !r.errors.is_empty()).count();
            Ok(if failed == report.rows.len() { EXIT_DATA } else { EXIT_OK })
        }
        Command::Report { run_id, format } => {
            let format = match format {
                Format::Json => ReportFormat::Json,
                Format::Text => ReportFormat::Text,
                Format::Csv => ReportFormat::Csv,
            };
            print!("{}", pipeline.report(&run_id, format)?);
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { EXIT_OK as u8 });
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<PipelineError>().map_or(EXIT_DATA, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
