use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use ebmeta::cli::{cmd_fit, cmd_simulate, Command, RunConfig};
use ebmeta::pipeline::Estimator;
use ebmeta::Link;

#[derive(Parser)]
#[command(name = "ebmeta", version, about = "Integrate external model summaries into an internal GLM")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum LinkArg {
    Logit,
    Identity,
}

#[derive(clap::Args)]
struct Common {
    /// Comma-separated subset of mle,cml,eb,ivw,ocwe,sclearner
    #[arg(long, default_value = "mle,cml,eb,ivw,ocwe,sclearner")]
    methods: String,
    /// Monte Carlo draws for the EB covariance
    #[arg(long, default_value_t = 5000)]
    mc_draws: usize,
    /// RNG seed; required whenever Monte Carlo draws are used
    #[arg(long)]
    seed: Option<u64>,
    /// Link shared by the internal and external models
    #[arg(long, value_enum, default_value = "logit")]
    link: LinkArg,
    /// Output file (fit) or directory (simulate)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit the internal model and integrate external models
    Fit {
        /// Internal dataset (CSV with a header row)
        #[arg(long)]
        data: PathBuf,
        /// Outcome column
        #[arg(long)]
        outcome: String,
        /// Comma-separated names of the new covariates
        #[arg(long, value_delimiter = ',', required = true)]
        b_cols: Vec<String>,
        /// External model spec (JSON); repeat for several models
        #[arg(long)]
        external: Vec<PathBuf>,
        /// Held-out CSV for prediction metrics
        #[arg(long)]
        validation: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run a simulation scenario
    Simulate {
        /// One of I, II, III, IV, V, VI
        #[arg(long)]
        scenario: String,
        /// Number of replicates
        #[arg(long, default_value_t = 500)]
        reps: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_methods(s: &str) -> ebmeta::Result<BTreeSet<Estimator>> {
    s.split(',').filter(|m| !m.trim().is_empty()).map(str::parse).collect()
}

fn config(cli: Cli) -> ebmeta::Result<RunConfig> {
    let (command, common, fit, sim) = match cli.command {
        Cmd::Fit {
            data,
            outcome,
            b_cols,
            external,
            validation,
            common,
        } => (Command::Fit, common, Some((data, outcome, b_cols, external, validation)), None),
        Cmd::Simulate { scenario, reps, common } => (Command::Simulate, common, None, Some((scenario, reps))),
    };
    let (data_path, outcome_name, b_names, external_spec_paths, validation_path) = match fit {
        Some((d, o, b, e, v)) => (Some(d), Some(o), b, e, v),
        None => (None, None, Vec::new(), Vec::new(), None),
    };
    let (scenario, reps) = match sim {
        Some((s, r)) => (Some(s), r),
        None => (None, 0),
    };
    Ok(RunConfig {
        command,
        data_path,
        outcome_name,
        b_names,
        external_spec_paths,
        methods: parse_methods(&common.methods)?,
        mc_draws: common.mc_draws,
        seed: common.seed,
        scenario,
        reps,
        output_path: common.out,
        validation_path,
        link: match common.link {
            LinkArg::Logit => Link::Logit,
            LinkArg::Identity => Link::Identity,
        },
    })
}

fn run(config: &RunConfig) -> ebmeta::Result<()> {
    match config.command {
        Command::Fit => {
            let report = cmd_fit(config)?;
            if config.output_path.is_none() {
                let text = serde_json::to_string_pretty(&report).expect("report serializes");
                println!("{text}");
            }
        }
        Command::Simulate => {
            let (summary, outputs) = cmd_simulate(config)?;
            println!(
                "scenario {}: {} replicates, {} failed",
                summary.scenario, summary.reps, summary.failures
            );
            for row in summary.rows.iter().filter(|r| matches!(r.estimator.as_str(), "IVW" | "OCWE" | "SC-Learner")) {
                println!(
                    "{:<10} {:<12} bias {:>8.4}  sd {:.4}  ese {:.4}  cov {:.3}",
                    row.estimator, row.coefficient, row.bias, row.sd, row.ese, row.coverage
                );
            }
            if let Some(w) = summary.mean_weights("OCWE") {
                let formatted: Vec<String> = w.iter().map(|v| format!("{v:.3}")).collect();
                println!("mean OCWE weights: [{}]", formatted.join(", "));
            }
            println!("wrote {} and {}", outputs.summary_csv.display(), outputs.results_json.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = config(cli).and_then(|c| run(&c).map(|_| c));
    match result.context("ebmeta failed") {
        Ok(_) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let numerical = err
                .downcast_ref::<ebmeta::Error>()
                .is_some_and(ebmeta::Error::is_numerical);
            ExitCode::from(if numerical { 3 } else { 2 })
        }
    }
}
