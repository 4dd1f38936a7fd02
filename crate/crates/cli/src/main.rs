//! `prefunify` command-line driver.
//!
//! Exit codes: 0 ok, 1 usage, 2 validation, 3 runtime.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use prefunify::config::RunConfig;
use prefunify::manifest::Stage;
use prefunify::pipeline::{self, D_TRAIN_FILE};
use prefunify::Error;

#[derive(Debug, Parser)]
#[command(name = "prefunify", version, about = "Unify, filter and evaluate preference-tuning data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run configuration (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Override the selection seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the selection fraction, in (0, 1]
    #[arg(long)]
    fraction: Option<f64>,
    /// Override the output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and validate every source
    Ingest(RunArgs),
    /// Convert sources to preference pairs and take their union
    Unify(RunArgs),
    /// Embed the prompts of the unified dataset
    Embed(RunArgs),
    /// Cluster the prompt embeddings
    Cluster(RunArgs),
    /// Select the training subset from the unified dataset and cluster model
    Select(RunArgs),
    /// Run every stage and write the training manifests
    Pipeline(RunArgs),
    /// Compute bias and utility metrics from probe dumps
    Eval {
        /// Items file; defaults to the config's eval.items
        #[arg(long)]
        items: Option<PathBuf>,
        /// Dumps file; defaults to the config's eval.dumps
        #[arg(long)]
        dumps: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for metrics.json
        #[arg(long)]
        out: Option<PathBuf>,
        /// Row label for the table
        #[arg(long, default_value = "model")]
        label: String,
    },
    /// Write a training manifest for one stage
    Manifest {
        /// sft, reward or rlhf
        #[arg(long)]
        stage: String,
        /// Dataset the trainer should read; defaults to <out>/d_train.jsonl from the config
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest file to write; prints to stdout when absent
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(args: &RunArgs) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(&args.config)?;
    cfg.apply_overrides(args.seed, args.fraction, args.out.clone());
    Ok(cfg)
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Ingest(args) => {
            let counts = pipeline::run_ingest(&load_config(&args)?)?;
            for c in counts {
                println!("{}\t{:?}\t{} records", c.source_id, c.supervision, c.records);
            }
        }
        Command::Unify(args) => {
            let unified = pipeline::run_unify(&load_config(&args)?)?;
            for c in &unified.counts {
                println!("{}\t{} pairs", c.source_id, c.pairs);
            }
            for d in &unified.discards {
                println!(
                    "{}\tdiscarded {} single-response prompts, {} identical-endpoint groups; {} zero-variance groups kept",
                    d.source_id, d.single_response_prompts, d.identical_endpoint_groups, d.zero_variance_groups
                );
            }
        }
        Command::Embed(args) => {
            let map = pipeline::run_embed(&load_config(&args)?)?;
            println!("embedded {} prompts", map.len());
        }
        Command::Cluster(args) => {
            let model = pipeline::run_cluster(&load_config(&args)?)?;
            println!(
                "k={} inertia={:.6} best_restart={} sizes={:?}",
                model.k,
                model.inertia,
                model.best_restart,
                model.sizes()
            );
        }
        Command::Select(args) => {
            let report = pipeline::run_select(&load_config(&args)?)?;
            println!(
                "kept {}/{} pairs (requested fraction {}, achieved {:.4})",
                report.kept_total, report.input_total, report.fraction, report.achieved_fraction
            );
        }
        Command::Pipeline(args) => {
            let outputs = pipeline::run_pipeline(&load_config(&args)?)?;
            let counts = pipeline::stage_counts(&outputs.log);
            for stage in ["ingest", "unify", "embed", "cluster", "select"] {
                println!("{stage}\t{}", counts[stage]);
            }
            println!(
                "achieved fraction {:.4} (requested {})",
                outputs.report.achieved_fraction, outputs.report.fraction
            );
            println!("d_train\t{}", outputs.d_train.display());
            println!("sha256\t{}", outputs.log.d_train_sha256);
        }
        Command::Eval {
            items,
            dumps,
            config,
            out,
            label,
        } => {
            let cfg = config.as_deref().map(RunConfig::load).transpose()?;
            let eval = cfg.as_ref().and_then(|c| c.eval.clone());
            let items = items
                .or_else(|| eval.as_ref().map(|e| e.items.clone()))
                .context("--items or a config with an eval section is required")?;
            let dumps = dumps
                .or_else(|| eval.as_ref().map(|e| e.dumps.clone()))
                .context("--dumps or a config with an eval section is required")?;
            let report = pipeline::run_eval(&items, &dumps)?;
            print!("{}", report.to_table(&label));
            println!("{}", serde_json::to_string_pretty(&report)?);
            let out = out.or_else(|| cfg.map(|c| c.output_dir));
            if let Some(dir) = out {
                pipeline::write_metrics(&dir, &report)?;
            }
        }
        Command::Manifest {
            stage,
            dataset,
            config,
            out,
        } => {
            let stage: Stage = stage.parse()?;
            let dataset = match (dataset, config) {
                (Some(d), _) => d,
                (None, Some(c)) => RunConfig::load(&c)?
                    .output_dir
                    .join(D_TRAIN_FILE)
                    .to_string_lossy()
                    .into_owned(),
                (None, None) => anyhow::bail!("--dataset or --config is required"),
            };
            match out {
                Some(path) => pipeline::write_manifest(&path, stage, &dataset)?,
                None => {
                    let manifest = prefunify::manifest::canonical_manifest(stage, &dataset);
                    println!("{}", serde_json::to_string_pretty(&manifest)?);
                }
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_runtime() => 3,
        Some(_) => 2,
        // missing required inputs resolved at run time
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
