//! Pipeline stages. Every command writes its artifacts and a manifest into
//! its output directory and is deterministic given the config.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use gripforce_core::control::{run_episode, Controller, ZeroController};
use gripforce_core::dataset::{
    fit_scalers, read_dataset_file, record_episode, EpisodeRecord, EpisodeWriter, ReplayBuffer, Scalers,
};
use gripforce_core::nn::Mlp;
use gripforce_core::oracle::{pareto_sweep, Oracle, OracleConfig, ParetoRow};
use gripforce_core::rl::{
    evaluate as evaluate_episodes, iql_train, td3_finetune, transfer_weights, IqlLogRow, IqlNets, PolicyController,
    Td3EvalRow, Td3LogRow, TransferReport,
};
use gripforce_core::sim::{Env, EnvConfig, ReferenceTrajectory, OBS_DIM};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;
use crate::report::{EpisodeReport, EvalReport};

pub const DATASET_FILE: &str = "dataset.ttw";
pub const SCALERS_FILE: &str = "scalers.bin";
pub const ACTOR_FILE: &str = "actor.ttwn";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    Zero,
    Oracle,
    Policy,
}

impl FromStr for ControllerKind {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "zero" => Ok(ControllerKind::Zero),
            "oracle" => Ok(ControllerKind::Oracle),
            "policy" => Ok(ControllerKind::Policy),
            other => Err(CliError::Usage(format!("unknown controller `{other}` (zero | oracle | policy)"))),
        }
    }
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Zero => "zero",
            ControllerKind::Oracle => "oracle",
            ControllerKind::Policy => "policy",
        }
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing checkpoint or input"),
        ))
    }
}

/// Actor and scalers from a checkpoint directory (IQL or TD3 output).
pub fn load_policy(dir: &Path) -> CliResult<PolicyController> {
    let actor_path = dir.join(ACTOR_FILE);
    let scaler_path = dir.join(SCALERS_FILE);
    require(&actor_path)?;
    require(&scaler_path)?;
    let actor = Mlp::load(&actor_path)?;
    let scalers = Scalers::load(&scaler_path)?;
    Ok(PolicyController::new(actor, scalers)?)
}

fn make_controller(cfg: &RunConfig, kind: ControllerKind, checkpoint: Option<&Path>) -> CliResult<Box<dyn Controller>> {
    Ok(match kind {
        ControllerKind::Zero => Box::new(ZeroController),
        ControllerKind::Oracle => Box::new(Oracle::new(cfg.oracle_config())?),
        ControllerKind::Policy => {
            let dir = checkpoint.ok_or_else(|| CliError::Usage("--checkpoint is required for the policy controller".into()))?;
            Box::new(load_policy(dir)?)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub t: f64,
    pub theta_ref: f64,
    pub theta_g: f64,
    #[serde(rename = "F_g")]
    pub f_g: f64,
    #[serde(rename = "V1")]
    pub v1: f64,
    #[serde(rename = "V2")]
    pub v2: f64,
    pub reward: f64,
}

pub struct SimulateOpts<'a> {
    pub controller: ControllerKind,
    pub checkpoint: Option<&'a Path>,
    pub traj_seed: u64,
    /// Constant zero reference instead of a sampled trajectory.
    pub flat: bool,
}

/// One closed-loop episode with a per-step trace.
pub fn simulate(cfg: &RunConfig, opts: &SimulateOpts, out: &Path) -> CliResult<EvalReport> {
    let start = Instant::now();
    ensure_dir(out)?;
    let mut controller = make_controller(cfg, opts.controller, opts.checkpoint)?;
    let mut env = Env::new(&cfg.plant, cfg.env.clone())?;
    let traj = if opts.flat || cfg.env.flat_reference {
        ReferenceTrajectory::flat()
    } else {
        ReferenceTrajectory::sample(opts.traj_seed)
    };
    let f_ref = cfg.env.f_ref;
    let mut rows = Vec::with_capacity(cfg.env.episode_len);
    let stats = run_episode(&mut env, controller.as_mut(), traj, |env, _, out| {
        let t = env.time();
        rows.push(SimRow {
            t,
            theta_ref: traj.eval(t),
            theta_g: out.obs.theta_g,
            f_g: f_ref + out.obs.force_err,
            v1: out.applied[0],
            v2: out.applied[1],
            reward: out.reward,
        });
    })?;
    let report = EvalReport::new(opts.controller.name(), f_ref, vec![EpisodeReport::new(opts.traj_seed, &stats, f_ref)]);
    write_csv(&out.join("simulate.csv"), &rows)?;
    write_json(&out.join("report.json"), &report)?;
    let inputs: Vec<PathBuf> = opts.checkpoint.map(|d| vec![d.join(ACTOR_FILE)]).unwrap_or_default();
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    Manifest::build("simulate", cfg, &inputs, out, &["simulate.csv", "report.json"], start.elapsed().as_secs_f64())?
        .write(out)?;
    Ok(report)
}

/// Greedy episodes on the held-out evaluation trajectories.
pub fn evaluate(cfg: &RunConfig, kind: ControllerKind, checkpoint: Option<&Path>, out: &Path) -> CliResult<EvalReport> {
    let start = Instant::now();
    ensure_dir(out)?;
    let mut controller = make_controller(cfg, kind, checkpoint)?;
    let seeds = cfg.eval_seeds();
    let results = evaluate_episodes(&cfg.plant, &cfg.env, controller.as_mut(), &seeds)?;
    let episodes: Vec<EpisodeReport> = seeds
        .iter()
        .zip(&results)
        .map(|(&s, (_, stats))| EpisodeReport::new(s, stats, cfg.env.f_ref))
        .collect();
    let report = EvalReport::new(kind.name(), cfg.env.f_ref, episodes);
    write_csv(&out.join("eval.csv"), &report.episodes)?;
    write_json(&out.join("report.json"), &report)?;
    let inputs: Vec<PathBuf> = checkpoint.map(|d| vec![d.join(ACTOR_FILE)]).unwrap_or_default();
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    Manifest::build("evaluate", cfg, &inputs, out, &["eval.csv", "report.json"], start.elapsed().as_secs_f64())?
        .write(out)?;
    Ok(report)
}

/// Force-weight sweep, one full oracle episode per weight.
pub fn pareto(cfg: &RunConfig, grid: Option<&[f64]>, out: &Path) -> CliResult<Vec<ParetoRow>> {
    let start = Instant::now();
    ensure_dir(out)?;
    let grid = grid.map(<[f64]>::to_vec).unwrap_or_else(|| cfg.pareto.weight_grid());
    let env_cfg = EnvConfig {
        episode_len: cfg.pareto.episode_len,
        ..cfg.env.clone()
    };
    let oracle_cfg = OracleConfig {
        max_evals: cfg.pareto.max_evals.unwrap_or(cfg.oracle.max_evals),
        ..cfg.oracle_config()
    };
    let rows = pareto_sweep(&grid, &cfg.plant, &env_cfg, &oracle_cfg, cfg.pareto.traj_seed)?;
    write_csv(&out.join("pareto.csv"), &rows)?;
    Manifest::build("pareto", cfg, &[], out, &["pareto.csv"], start.elapsed().as_secs_f64())?.write(out)?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollectRow {
    pub episode: usize,
    pub traj_seed: u64,
    pub episode_return: f64,
    pub length: usize,
    pub terminated: bool,
    pub mean_force_err_n: f64,
    pub mean_angle_err_pct: f64,
}

/// Record `episodes` oracle episodes (default from config) into one dataset file.
pub fn collect(cfg: &RunConfig, episodes: Option<usize>, export_csv: bool, out: &Path) -> CliResult<Vec<CollectRow>> {
    let start = Instant::now();
    ensure_dir(out)?;
    let n = episodes.unwrap_or(cfg.collect.episodes);
    if n == 0 {
        return Err(CliError::Usage("--episodes must be >= 1".into()));
    }
    let mut env = Env::new(&cfg.plant, cfg.env.clone())?;
    let mut oracle = Oracle::new(cfg.oracle_config())?;
    let path = out.join(DATASET_FILE);
    let mut writer = EpisodeWriter::create(&path)?;
    let mut rows = Vec::with_capacity(n);
    for k in 0..n {
        let seed = cfg.collect.traj_seed + k as u64;
        let traj = if cfg.env.flat_reference {
            ReferenceTrajectory::flat()
        } else {
            ReferenceTrajectory::sample(seed)
        };
        let summary = match record_episode(&mut env, &mut oracle, traj, &mut writer) {
            Ok(s) => s,
            Err(e) => {
                writer.finish()?;
                return Err(e.into());
            }
        };
        let report = EpisodeReport::new(seed, &summary.stats, cfg.env.f_ref);
        log::info!(
            "collect {}/{n}: return {:.4} force {:.4}% angle {:.3}%",
            k + 1,
            summary.episode_return,
            report.mean_force_err_pct,
            report.mean_angle_err_pct
        );
        rows.push(CollectRow {
            episode: k,
            traj_seed: seed,
            episode_return: summary.episode_return,
            length: summary.length,
            terminated: summary.terminated_early,
            mean_force_err_n: report.mean_force_err_n,
            mean_angle_err_pct: report.mean_angle_err_pct,
        });
    }
    writer.finish()?;
    write_csv(&out.join("collect.csv"), &rows)?;
    let mut artifacts = vec![DATASET_FILE, "collect.csv"];
    if export_csv {
        export_transitions(&read_dataset_file(&path)?, &out.join("transitions.csv"))?;
        artifacts.push("transitions.csv");
    }
    Manifest::build("collect", cfg, &[], out, &artifacts, start.elapsed().as_secs_f64())?.write(out)?;
    Ok(rows)
}

/// One CSV row per transition, for inspection.
pub fn export_transitions(episodes: &[EpisodeRecord], path: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["episode".to_string(), "step".to_string()];
    header.extend((0..OBS_DIM).map(|i| format!("obs{i}")));
    header.extend(["V1".to_string(), "V2".to_string(), "reward".to_string()]);
    header.extend((0..OBS_DIM).map(|i| format!("next_obs{i}")));
    header.extend(["terminated".to_string(), "truncated".to_string()]);
    w.write_record(&header)?;
    for (e, ep) in episodes.iter().enumerate() {
        for (k, t) in ep.transitions.iter().enumerate() {
            let mut rec = vec![e.to_string(), k.to_string()];
            rec.extend(t.obs.iter().map(|v| v.to_string()));
            rec.extend(t.action.iter().map(|v| v.to_string()));
            rec.push(t.reward.to_string());
            rec.extend(t.next_obs.iter().map(|v| v.to_string()));
            rec.push(u8::from(t.terminated).to_string());
            rec.push(u8::from(t.truncated).to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqlSummary {
    pub updates: usize,
    pub transitions: usize,
    pub final_row: Option<IqlLogRow>,
}

/// Offline IQL on a dataset file; writes the networks, scalers and loss curve.
pub fn train_iql(cfg: &RunConfig, dataset: &Path, updates: Option<usize>, out: &Path) -> CliResult<IqlSummary> {
    let start = Instant::now();
    ensure_dir(out)?;
    require(dataset)?;
    let episodes = read_dataset_file(dataset)?;
    let scalers = fit_scalers(&episodes, cfg.plant.v_max)?;
    let total: usize = episodes.iter().map(|e| e.transitions.len()).sum();
    let buffer = ReplayBuffer::from_episodes(&episodes, total.max(1));
    let mut iql_cfg = cfg.iql_config();
    if let Some(u) = updates {
        iql_cfg.updates = u;
    }
    let (nets, curve) = iql_train(&buffer, &scalers, &cfg.nets, &iql_cfg, |u, nets| {
        if iql_cfg.checkpoint_every > 0 && u % iql_cfg.checkpoint_every == 0 && u != iql_cfg.updates {
            nets.save(out.join(format!("update-{u:08}")))?;
        }
        Ok(())
    })?;
    nets.save(out)?;
    scalers.save(out.join(SCALERS_FILE))?;
    write_csv(&out.join("iql_curve.csv"), &curve)?;
    Manifest::build(
        "train-iql",
        cfg,
        &[dataset],
        out,
        &[ACTOR_FILE, "q1.ttwn", "q2.ttwn", "q1_target.ttwn", "q2_target.ttwn", "value.ttwn", SCALERS_FILE, "iql_curve.csv"],
        start.elapsed().as_secs_f64(),
    )?
    .write(out)?;
    Ok(IqlSummary {
        updates: iql_cfg.updates,
        transitions: total,
        final_row: curve.last().copied(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Td3Summary {
    pub transfer: TransferReport,
    pub evals: Vec<Td3EvalRow>,
    pub log: Vec<Td3LogRow>,
}

/// Online TD3 initialized from an IQL checkpoint directory.
pub fn finetune_td3(
    cfg: &RunConfig,
    iql_dir: &Path,
    dataset: Option<&Path>,
    steps: Option<usize>,
    out: &Path,
) -> CliResult<Td3Summary> {
    let start = Instant::now();
    ensure_dir(out)?;
    require(&iql_dir.join(ACTOR_FILE))?;
    let iql = IqlNets::load(iql_dir)?;
    let scalers = Scalers::load(iql_dir.join(SCALERS_FILE))?;
    let mut td3_cfg = cfg.td3_config();
    if let Some(s) = steps {
        td3_cfg.steps = s;
    }
    let offline = match (td3_cfg.prefill_offline, dataset) {
        (true, Some(path)) => {
            require(path)?;
            Some(read_dataset_file(path)?)
        }
        (true, None) => {
            log::warn!("prefill_offline is set but no dataset was given; the replay buffer starts empty");
            None
        }
        (false, _) => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(td3_cfg.seed);
    let (agent, transfer) = transfer_weights(&iql, &cfg.nets, &td3_cfg, &mut rng)?;
    let outcome = td3_finetune(&cfg.plant, &cfg.env, agent, &scalers, offline.as_deref(), &td3_cfg)?;
    let agent = &outcome.agent;
    for (name, net) in [
        (ACTOR_FILE, &agent.actor),
        ("actor_target.ttwn", &agent.actor_target),
        ("q1.ttwn", &agent.q1),
        ("q2.ttwn", &agent.q2),
        ("q1_target.ttwn", &agent.q1_target),
        ("q2_target.ttwn", &agent.q2_target),
    ] {
        net.save(out.join(name))?;
    }
    scalers.save(out.join(SCALERS_FILE))?;
    write_csv(&out.join("td3_eval.csv"), &outcome.evals)?;
    write_csv(&out.join("td3_log.csv"), &outcome.log)?;
    let mut inputs = vec![iql_dir.join(ACTOR_FILE)];
    if let (Some(p), true) = (dataset, offline.is_some()) {
        inputs.push(p.to_path_buf());
    }
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    Manifest::build(
        "finetune-td3",
        cfg,
        &inputs,
        out,
        &[
            ACTOR_FILE,
            "actor_target.ttwn",
            "q1.ttwn",
            "q2.ttwn",
            "q1_target.ttwn",
            "q2_target.ttwn",
            SCALERS_FILE,
            "td3_eval.csv",
            "td3_log.csv",
        ],
        start.elapsed().as_secs_f64(),
    )?
    .write(out)?;
    Ok(Td3Summary {
        transfer,
        evals: outcome.evals,
        log: outcome.log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub param_count: usize,
    pub layer_sizes: Vec<usize>,
    /// Parameter storage at 64-bit floats.
    pub memory_bytes_fp64: usize,
    pub iterations: usize,
    pub mean_latency_ms: f64,
    pub median_latency_ms: f64,
    pub p99_latency_ms: f64,
}

/// Single-step inference latency of a policy checkpoint (observation scaling,
/// actor forward and action unscaling).
pub fn bench(cfg: &RunConfig, checkpoint: &Path, iterations: Option<usize>, out: Option<&Path>) -> CliResult<BenchReport> {
    let policy = load_policy(checkpoint)?;
    let n = iterations.unwrap_or(cfg.bench.iterations).max(1);
    let mut env = Env::new(&cfg.plant, cfg.env.clone())?;
    env.reset(cfg.eval.traj_seed);
    let base = env.observe().to_array();
    let mut samples = Vec::with_capacity(n);
    let mut sink = 0.0;
    for k in 0..n {
        let mut obs = base;
        obs[8] += 1e-3 * (k % 97) as f64;
        let t = Instant::now();
        let v = policy.volts(std::hint::black_box(&obs))?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
        sink += v[0];
    }
    std::hint::black_box(sink);
    let mean = samples.iter().sum::<f64>() / n as f64;
    samples.sort_by(f64::total_cmp);
    let pick = |q: f64| samples[((n - 1) as f64 * q).round() as usize];
    let report = BenchReport {
        param_count: policy.actor.param_count(),
        layer_sizes: policy.actor.sizes().to_vec(),
        memory_bytes_fp64: 8 * policy.actor.param_count(),
        iterations: n,
        mean_latency_ms: mean,
        median_latency_ms: pick(0.5),
        p99_latency_ms: pick(0.99),
    };
    if let Some(out) = out {
        ensure_dir(out)?;
        write_json(&out.join("bench.json"), &report)?;
    }
    Ok(report)
}
