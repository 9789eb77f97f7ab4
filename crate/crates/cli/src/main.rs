use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gripforce_cli::commands::{self, ControllerKind, SimulateOpts, DATASET_FILE};
use gripforce_cli::{CliError, CliResult, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "gripforce", version, about = "Tendon-driven gripper twin: oracle, dataset and policy pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (defaults depend on the command and `[paths]`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one closed-loop episode and write a per-step trace.
    Simulate {
        #[arg(long, default_value = "zero")]
        controller: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        traj_seed: Option<u64>,
        /// Hold the reference at zero.
        #[arg(long)]
        flat: bool,
        /// Control steps per episode.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a controller on the held-out trajectories.
    Evaluate {
        #[arg(long, default_value = "policy")]
        controller: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sweep the oracle's force weight.
    Pareto {
        /// Comma-separated force weights.
        #[arg(long, value_delimiter = ',')]
        weights_grid: Option<Vec<f64>>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Record oracle demonstrations.
    Collect {
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Also write transitions.csv.
        #[arg(long)]
        export_csv: bool,
    },
    /// Offline IQL on a recorded dataset.
    TrainIql {
        /// Dataset file (defaults to `<dataset_dir>/dataset.ttw`).
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        updates: Option<usize>,
    },
    /// Online TD3 fine-tuning from an IQL checkpoint.
    FinetuneTd3 {
        /// IQL checkpoint directory.
        #[arg(long)]
        iql: Option<PathBuf>,
        /// Dataset used to prefill the replay buffer.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Measure policy inference latency.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
    },
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn with_steps(cfg: &mut RunConfig, steps: Option<usize>) -> CliResult<()> {
    if let Some(n) = steps {
        cfg.env.episode_len = n;
        cfg.pareto.episode_len = n;
    }
    cfg.validate()
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializes"));
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = load_config(&cli.common)?;
    let out_or = |default: PathBuf| cli.common.out.clone().unwrap_or(default);
    let paths = cfg.paths.clone();
    match cli.command {
        Command::Simulate { controller, checkpoint, traj_seed, flat, steps } => {
            with_steps(&mut cfg, steps)?;
            let opts = SimulateOpts {
                controller: controller.parse()?,
                checkpoint: checkpoint.as_deref(),
                traj_seed: traj_seed.unwrap_or(cfg.eval.traj_seed),
                flat,
            };
            let report = commands::simulate(&cfg, &opts, &out_or(paths.output_dir.join("simulate")))?;
            print_json(&report);
        }
        Command::Evaluate { controller, checkpoint, episodes, steps } => {
            if let Some(n) = episodes {
                cfg.eval.episodes = n;
            }
            with_steps(&mut cfg, steps)?;
            let kind: ControllerKind = controller.parse()?;
            let report = commands::evaluate(&cfg, kind, checkpoint.as_deref(), &out_or(paths.output_dir.join("evaluate")))?;
            print_json(&report);
        }
        Command::Pareto { weights_grid, steps } => {
            with_steps(&mut cfg, steps)?;
            if let Some(g) = &weights_grid {
                if g.is_empty() || g.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                    return Err(CliError::Usage("--weights-grid needs finite values >= 0".into()));
                }
            }
            let rows = commands::pareto(&cfg, weights_grid.as_deref(), &out_or(paths.output_dir.join("pareto")))?;
            print_json(&rows);
        }
        Command::Collect { episodes, steps, export_csv } => {
            with_steps(&mut cfg, steps)?;
            let rows = commands::collect(&cfg, episodes, export_csv, &out_or(paths.dataset_dir.clone()))?;
            let mean = rows.iter().map(|r| r.episode_return).sum::<f64>() / rows.len() as f64;
            println!("collected {} episodes, mean return {mean:.4}", rows.len());
        }
        Command::TrainIql { dataset, updates } => {
            let dataset = dataset.unwrap_or_else(|| paths.dataset_dir.join(DATASET_FILE));
            let summary = commands::train_iql(&cfg, &dataset, updates, &out_or(paths.checkpoint_dir.join("iql")))?;
            print_json(&summary);
        }
        Command::FinetuneTd3 { iql, dataset, steps } => {
            let iql = iql.unwrap_or_else(|| paths.checkpoint_dir.join("iql"));
            let default_data = paths.dataset_dir.join(DATASET_FILE);
            let dataset = dataset.or_else(|| default_data.exists().then_some(default_data));
            let summary = commands::finetune_td3(
                &cfg,
                &iql,
                dataset.as_deref(),
                steps,
                &out_or(paths.checkpoint_dir.join("td3")),
            )?;
            print_json(&summary.evals);
        }
        Command::Bench { checkpoint, iterations } => {
            let report = commands::bench(&cfg, &checkpoint, iterations, cli.common.out.as_deref().map(Path::new))?;
            print_json(&report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
