use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use roadnext::evaluation::{summarize_robustness, PerturbationKind};
use roadnext::pipeline::{self, AblationGrid, RunConfig};

/// Next-step prediction on road intersection graphs.
#[derive(Debug, Parser)]
#[command(name = "roadnext", version)]
struct Cli {
    /// JSON run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Worker threads. Every N reproduces the single-thread outputs.
    #[arg(long, global = true, default_value_t = 1, value_name = "N")]
    workers: usize,
    /// Overrides the configured seed.
    #[arg(long, global = true, env = "RNN_SEED")]
    seed: Option<u64>,
    /// Overrides `paths.work_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    work_dir: Option<PathBuf>,
    /// Overrides `paths.graph`.
    #[arg(long, global = true, value_name = "PATH")]
    graph: Option<PathBuf>,
    /// Overrides `paths.pois`.
    #[arg(long, global = true, value_name = "PATH")]
    pois: Option<PathBuf>,
    /// Overrides `paths.trajectories`.
    #[arg(long, global = true, value_name = "PATH")]
    trajectories: Option<PathBuf>,
    /// Sets a config field by dotted path, e.g. `model.d=64` or
    /// `projection.windows.full=false`. Values parse as JSON, else as strings.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic grid city, POIs and walker trajectories.
    Synth,
    /// Validate the input graph and POIs and stage them in the work directory.
    BuildGraph,
    /// Train structural node embeddings.
    Embed,
    /// Compute per-node POI descriptors.
    Featurize,
    /// Project trajectories onto the graph and cut segments.
    Project,
    /// Train the model and save the best-validation checkpoint.
    Train,
    /// Evaluate the checkpoint on the test split.
    Eval,
    /// Run perturbation trials against the checkpoint.
    Robustness {
        /// `coordinate` or `poi`.
        #[arg(long)]
        kind: PerturbationKind,
    },
    /// Retrain under an ablation grid.
    Ablate {
        /// `branches`, `layers`, `sectors` or `radius`.
        #[arg(long, default_value = "branches")]
        grid: AblationGrid,
    },
    /// Depth and head-count sweep scored on validation Acc@1.
    Sweep,
    /// POI coverage as a function of radius.
    Coverage,
}

fn set_field(root: &mut serde_json::Value, assignment: &str) -> anyhow::Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {assignment:?}"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| anyhow!("--set: unknown config field {key:?}"))?;
    }
    *node = value;
    Ok(())
}

fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if !cli.set.is_empty() {
        let mut v = serde_json::to_value(&cfg)?;
        for s in &cli.set {
            set_field(&mut v, s)?;
        }
        cfg = serde_json::from_value(v).context("--set")?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let paths = &mut cfg.paths;
    for (slot, value) in [
        (&mut paths.work_dir, &cli.work_dir),
        (&mut paths.graph, &cli.graph),
        (&mut paths.pois, &cli.pois),
        (&mut paths.trajectories, &cli.trajectories),
    ] {
        if let Some(v) = value {
            *slot = v.clone();
        }
    }
    cfg.sync_dims();
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.workers == 0 {
        bail!("--workers must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global()?;
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Synth => {
            pipeline::stage_synth(&cfg)?;
            log::info!("wrote {}", cfg.paths.trajectories.display());
        }
        Command::BuildGraph => pipeline::stage_build_graph(&cfg)?,
        Command::Embed => pipeline::stage_embed(&cfg)?,
        Command::Featurize => pipeline::stage_featurize(&cfg)?,
        Command::Project => {
            let n = pipeline::stage_project(&cfg)?;
            log::info!("{n} segments");
        }
        Command::Train => {
            let out = pipeline::stage_train(&cfg, |_| {})?;
            log::info!("kept epoch {}", out.best_epoch);
        }
        Command::Eval => {
            let out = pipeline::stage_eval(&cfg)?;
            print!("{}", out.json);
            print!("{}", out.table);
        }
        Command::Robustness { kind } => {
            let rows = pipeline::stage_robustness(&cfg, kind)?;
            println!("level,mean_acc1,std_acc1");
            for (level, mean, std) in summarize_robustness(&rows) {
                println!("{level},{mean:.4},{std:.4}");
            }
        }
        Command::Ablate { grid } => {
            for r in pipeline::stage_ablate(&cfg, grid)? {
                println!("{},{:.4},{:.4}", r.variant.name, r.report.overall.acc1, r.report.overall.mrr);
            }
        }
        Command::Sweep => {
            println!("L,H,val_acc1");
            for r in pipeline::stage_sweep(&cfg)? {
                println!("{},{},{:.4}", r.layers, r.heads, r.val_acc1);
            }
        }
        Command::Coverage => {
            println!("radius,coverage,duplicate,avg_nodes,marginal_gain");
            for r in pipeline::stage_coverage(&cfg)? {
                println!(
                    "{},{:.4},{:.4},{:.4},{:.4}",
                    r.radius, r.coverage, r.duplicate, r.avg_nodes, r.marginal_gain
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
