use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fairgen::config::{config_hash, load_config, presets, ExperimentConfig};
use fairgen::pipeline::{run_matrix, run_report, run_seed_until, RunDir, Stage};
use fairgen::Error;

/// Two-stage debiasing experiments on a procedural benchmark: balanced
/// synthetic generation, embedding filtering, contrastive pretraining, and
/// last-layer retraining, with worst-group accuracy reporting.
#[derive(Parser)]
#[command(name = "fairgen", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct StageArgs {
    /// Experiment config file (JSON).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset name (see `fairgen presets`).
    #[arg(long)]
    preset: Option<String>,
    /// Run a single seed instead of every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Root directory for run artifacts (default: $FAIRGEN_RUN_ROOT or ./runs).
    #[arg(long)]
    run_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the dataset splits.
    Split(StageArgs),
    /// Embed the real training split.
    Embed(StageArgs),
    /// Cluster each group's embeddings (clustered strategy only).
    Cluster(StageArgs),
    /// Generate the synthetic pool.
    Generate(StageArgs),
    /// Embed the synthetic pool for scoring.
    Score(StageArgs),
    /// Apply the filtering rule to the synthetic pool.
    Filter(StageArgs),
    /// Stage-1 training on the filtered synthetic pool.
    Pretrain(StageArgs),
    /// Stage-2 retraining on the real split (or baseline training).
    Finetune(StageArgs),
    /// Evaluate on the group-balanced test split.
    Evaluate(StageArgs),
    /// Aggregate all seeds into summary.csv / summary.md.
    Report(StageArgs),
    /// Run the full pipeline for every seed and write the summary.
    Run(StageArgs),
    /// Run several presets and write a consolidated summary.
    Matrix {
        /// Comma-separated preset names; defaults to every preset.
        #[arg(long)]
        presets: Option<String>,
        #[arg(long)]
        run_root: Option<PathBuf>,
    },
    /// List the built-in presets.
    Presets,
}

fn run_root(arg: Option<PathBuf>) -> PathBuf {
    arg.or_else(|| std::env::var_os("FAIRGEN_RUN_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn resolve_config(args: &StageArgs) -> Result<ExperimentConfig, Error> {
    match (&args.config, &args.preset) {
        (Some(path), _) => load_config(path),
        (None, Some(name)) => presets()
            .remove(name.as_str())
            .ok_or_else(|| Error::Config(format!("unknown preset `{name}`"))),
        (None, None) => Err(Error::Config(
            "either --config or --preset is required".into(),
        )),
    }
}

fn run_stage(stage: Stage, args: StageArgs) -> Result<(), Error> {
    let cfg = resolve_config(&args)?;
    let root = run_root(args.run_root);
    if stage == Stage::Report {
        let summary = run_report(&cfg, &root)?;
        println!(
            "{}: worst-group {:.4} ± {:.4}, average-group {:.4} ± {:.4} over {} seeds",
            summary.method,
            summary.worst_group_mean,
            summary.worst_group_std,
            summary.average_group_mean,
            summary.average_group_std,
            summary.seeds,
        );
        return Ok(());
    }
    let run = RunDir::create(&root, &cfg)?;
    let seeds: Vec<u64> = args.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
    for seed in seeds {
        match run_seed_until(&cfg, seed, &run, stage)? {
            Some(outcome) => println!(
                "seed {seed}: worst-group {:.4}, average-group {:.4}",
                outcome.report.worst_group, outcome.report.average_group
            ),
            None => println!("seed {seed}: {} done", stage.name()),
        }
    }
    println!("artifacts: {}", run.root.display());
    Ok(())
}

fn main_inner() -> Result<(), Error> {
    match Cli::parse().cmd {
        Cmd::Split(a) => run_stage(Stage::Split, a),
        Cmd::Embed(a) => run_stage(Stage::Embed, a),
        Cmd::Cluster(a) => run_stage(Stage::Cluster, a),
        Cmd::Generate(a) => run_stage(Stage::Generate, a),
        Cmd::Score(a) => run_stage(Stage::Score, a),
        Cmd::Filter(a) => run_stage(Stage::Filter, a),
        Cmd::Pretrain(a) => run_stage(Stage::Pretrain, a),
        Cmd::Finetune(a) => run_stage(Stage::Finetune, a),
        Cmd::Evaluate(a) => run_stage(Stage::Evaluate, a),
        Cmd::Report(a) | Cmd::Run(a) => run_stage(Stage::Report, a),
        Cmd::Matrix { presets: names, run_root: root } => {
            let all = presets();
            let selected: BTreeMap<String, ExperimentConfig> = match names {
                Some(list) => list
                    .split(',')
                    .map(|name| {
                        let name = name.trim();
                        all.get(name)
                            .cloned()
                            .map(|cfg| (name.to_string(), cfg))
                            .ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))
                    })
                    .collect::<Result<_, _>>()?,
                None => all,
            };
            let root = run_root(root);
            let report = run_matrix(&selected, &root)?;
            for s in &report.summaries {
                println!(
                    "{}: worst-group {:.4} ± {:.4} ({} seeds)",
                    s.method, s.worst_group_mean, s.worst_group_std, s.seeds
                );
            }
            for (name, err) in &report.failures {
                eprintln!("{name}: FAILED: {err}");
            }
            println!("summary: {}", root.join("summary.csv").display());
            if report.failures.is_empty() {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{} preset(s) failed",
                    report.failures.len()
                )))
            }
        }
        Cmd::Presets => {
            for (name, cfg) in presets() {
                println!("{name}\t{}", config_hash(&cfg)?);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match main_inner() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
