//! Run configuration: one TOML file with a section per pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gripforce_core::oracle::OracleConfig;
use gripforce_core::plant::PlantParams;
use gripforce_core::rl::{IqlConfig, NetShapes, Td3Config};
use gripforce_core::sim::EnvConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset_dir: "runs/data".into(),
            checkpoint_dir: "runs/checkpoints".into(),
            output_dir: "runs/out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectConfig {
    pub episodes: usize,
    /// Trajectory seed of the first episode; episode `k` uses `traj_seed + k`.
    pub traj_seed: u64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        CollectConfig {
            episodes: 1000,
            traj_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParetoConfig {
    /// Explicit force weights; when empty a logarithmic grid is used.
    pub grid: Vec<f64>,
    pub w_f_min: f64,
    pub w_f_max: f64,
    pub points: usize,
    pub traj_seed: u64,
    /// Control steps per sweep episode.
    pub episode_len: usize,
    /// Per-decision rollout budget during the sweep; defaults to the oracle's.
    pub max_evals: Option<usize>,
}

impl Default for ParetoConfig {
    fn default() -> Self {
        ParetoConfig {
            grid: Vec::new(),
            w_f_min: 1e-4,
            w_f_max: 1e-1,
            points: 7,
            traj_seed: 0,
            episode_len: 3000,
            max_evals: None,
        }
    }
}

impl ParetoConfig {
    pub fn weight_grid(&self) -> Vec<f64> {
        if !self.grid.is_empty() {
            return self.grid.clone();
        }
        log_grid(self.w_f_min, self.w_f_max, self.points)
    }
}

/// `points` values spaced evenly in log10 between `lo` and `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..points)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (points - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// First held-out trajectory seed.
    pub traj_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 10,
            traj_seed: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub iterations: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { iterations: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed mixed into every stage seed.
    pub seed: u64,
    pub plant: PlantParams,
    pub env: EnvConfig,
    pub oracle: OracleConfig,
    pub nets: NetShapes,
    pub iql: IqlConfig,
    pub td3: Td3Config,
    pub collect: CollectConfig,
    pub pareto: ParetoConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub paths: Paths,
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of one stage: its own key combined with the global seed.
pub fn stage_seed(global: u64, stage: u64, tag: u64) -> u64 {
    stage ^ mix(global ^ mix(tag))
}

const ORACLE_TAG: u64 = 1;
const IQL_TAG: u64 = 2;
const TD3_TAG: u64 = 3;

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.plant.validate()?;
        self.env.validate()?;
        self.oracle.validate()?;
        self.nets.validate()?;
        self.iql.validate()?;
        self.td3.validate()?;
        if self.collect.episodes == 0 {
            return Err(CliError::Config("collect.episodes must be >= 1".into()));
        }
        let p = &self.pareto;
        if p.grid.is_empty() {
            if p.points == 0 || !(p.w_f_min > 0.0 && p.w_f_max >= p.w_f_min && p.w_f_max.is_finite()) {
                return Err(CliError::Config("pareto grid needs points >= 1 and 0 < w_f_min <= w_f_max".into()));
            }
        } else if p.grid.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(CliError::Config("pareto.grid values must be finite and >= 0".into()));
        }
        if p.episode_len == 0 || p.max_evals == Some(0) {
            return Err(CliError::Config("pareto.episode_len and pareto.max_evals must be >= 1".into()));
        }
        if self.eval.episodes == 0 || self.bench.iterations == 0 {
            return Err(CliError::Config("eval.episodes and bench.iterations must be >= 1".into()));
        }
        Ok(())
    }

    /// Oracle settings with the effective seed.
    pub fn oracle_config(&self) -> OracleConfig {
        OracleConfig {
            seed: stage_seed(self.seed, self.oracle.seed, ORACLE_TAG),
            ..self.oracle.clone()
        }
    }

    pub fn iql_config(&self) -> IqlConfig {
        IqlConfig {
            seed: stage_seed(self.seed, self.iql.seed, IQL_TAG),
            ..self.iql.clone()
        }
    }

    pub fn td3_config(&self) -> Td3Config {
        Td3Config {
            seed: stage_seed(self.seed, self.td3.seed, TD3_TAG),
            ..self.td3.clone()
        }
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        (0..self.eval.episodes as u64).map(|k| self.eval.traj_seed + k).collect()
    }

    /// Canonical serialization hashed into manifests.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sede = 3").is_err());
        assert!(RunConfig::from_toml("[plant]\nR = 4.0\nbogus = 1").is_err());
        assert!(RunConfig::from_toml("[td3]\nsteps = 10\nnoise = 0.1").is_err());
        assert!(RunConfig::from_toml("[nowhere]\nx = 1").is_err());
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        assert!(RunConfig::from_toml("[plant]\nR = -1.0").is_err());
        assert!(RunConfig::from_toml("[iql]\nexpectile = 1.5").is_err());
        assert!(RunConfig::from_toml("[td3]\npolicy_delay = 0").is_err());
        assert!(RunConfig::from_toml("[collect]\nepisodes = 0").is_err());
        assert!(RunConfig::from_toml("[env]\nsubsteps = 7").is_err());
    }

    #[test]
    fn renamed_keys_parse() {
        let cfg = RunConfig::from_toml("[plant]\nV_max = 5.0\n[oracle]\nH = 3\nw_F = 0.02\n[env]\nF_ref = 10.0").unwrap();
        assert_eq!(cfg.plant.v_max, 5.0);
        assert_eq!(cfg.oracle.horizon, 3);
        assert_eq!(cfg.oracle.w_f, 0.02);
        assert_eq!(cfg.env.f_ref, 10.0);
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(1e-4, 1e2, 7);
        assert_eq!(g.len(), 7);
        assert!((g[0] - 1e-4).abs() < 1e-18);
        assert!((g[6] - 1e2).abs() < 1e-10);
        assert!(g.windows(2).all(|w| (w[1] / w[0] - 10.0).abs() < 1e-9));
    }

    #[test]
    fn stage_seeds_depend_on_global_seed() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..RunConfig::default() };
        assert_ne!(a.iql_config().seed, b.iql_config().seed);
        assert_ne!(a.iql_config().seed, a.td3_config().seed);
        assert_eq!(a.iql_config().seed, RunConfig::default().iql_config().seed);
    }
}
