//! Receding-horizon CMA-ES oracle.
//!
//! At every control step the oracle searches over `2H` voltages (H pairs,
//! each held for one control period), scoring each candidate by rolling a
//! clone of the plant forward and summing
//! `w_θ·|θ_g − θ_ref| + w_F·|F_g − F_ref|` over every internal substep. Only
//! the first pair of the best sequence is applied; the sequence, shifted by
//! one pair, seeds the next decision.

pub mod cmaes;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{run_episode, Controller};
use crate::error::{Error, Result};
use crate::plant::{Plant, PlantParams, PlantState};
use crate::sim::{integrate_substeps_with, EnvConfig, Integrator, ReferenceTrajectory};
use crate::sim::Env;

pub use cmaes::{default_pop_size, CmaEs};

/// Cost assigned to rollouts that diverge.
pub const DIVERGED_COST: f64 = 1.0e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Horizon in control steps.
    #[serde(rename = "H")]
    pub horizon: usize,
    pub w_theta: f64,
    #[serde(rename = "w_F")]
    pub w_f: f64,
    /// Rollout budget per decision, including the evaluation of the initial mean.
    pub max_evals: usize,
    /// Defaults to `4 + ⌊3·ln(2H)⌋`.
    pub pop_size: Option<usize>,
    /// Defaults to `0.3·V_max`.
    pub init_sigma: Option<f64>,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self::final_preset()
    }
}

impl OracleConfig {
    /// Shipping configuration: `H = 5`, `w_θ = 1`, `w_F = 0.005`.
    pub fn final_preset() -> Self {
        OracleConfig {
            horizon: 5,
            w_theta: 1.0,
            w_f: 0.005,
            max_evals: 2000,
            pop_size: None,
            init_sigma: None,
            seed: 0,
        }
    }

    /// First configuration tried before the weight sweep: `H = 10`, `w_F = 0.01`.
    pub fn initial_preset() -> Self {
        OracleConfig {
            horizon: 10,
            w_f: 0.01,
            ..Self::final_preset()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "final" => Ok(Self::final_preset()),
            "initial" => Ok(Self::initial_preset()),
            other => Err(Error::Config(format!("unknown oracle preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::param("H", "must be >= 1"));
        }
        if !(self.w_theta >= 0.0 && self.w_f >= 0.0) {
            return Err(Error::param("w_theta", "cost weights must be >= 0"));
        }
        if self.pop_size.is_some_and(|p| p < 4) {
            return Err(Error::param("pop_size", "must be >= 4"));
        }
        if self.init_sigma.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::param("init_sigma", "must be > 0"));
        }
        if self.max_evals == 0 {
            return Err(Error::param("max_evals", "must be >= 1"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        2 * self.horizon
    }

    pub fn pop_size(&self) -> usize {
        self.pop_size.unwrap_or_else(|| default_pop_size(self.dim()))
    }

    pub fn init_sigma(&self, v_max: f64) -> f64 {
        self.init_sigma.unwrap_or(0.3 * v_max)
    }
}

/// Forward model used by rollouts: holds a voltage pair for `n` substeps and
/// reports `(θ_g, F_g)` after each one.
pub trait HoldModel: Sync {
    type State: Clone + Send + Sync;

    fn hold<F: FnMut(f64, f64)>(
        &self,
        state: &mut Self::State,
        voltages: [f64; 2],
        n: usize,
        observe: F,
    ) -> Result<()>;
}

/// The digital twin as a rollout model.
#[derive(Debug, Clone, Copy)]
pub struct PlantModel<'a> {
    pub plant: &'a Plant,
    pub dt: f64,
    pub scheme: Integrator,
}

impl HoldModel for PlantModel<'_> {
    type State = PlantState;

    #[inline]
    fn hold<F: FnMut(f64, f64)>(
        &self,
        state: &mut PlantState,
        voltages: [f64; 2],
        n: usize,
        mut observe: F,
    ) -> Result<()> {
        *state = integrate_substeps_with(
            self.plant,
            state,
            voltages[0],
            voltages[1],
            n,
            self.dt,
            self.scheme,
            |_, s, sol| observe(s.theta_g, sol.fg),
        )?;
        Ok(())
    }
}

/// Weights and targets of the rollout cost.
#[derive(Debug, Clone, Copy)]
pub struct CostWeights {
    pub w_theta: f64,
    pub w_f: f64,
    pub f_ref: f64,
}

/// Sum the tracking cost of `seq` (pairs `[V1, V2]` per control step) over
/// every substep. `refs[i]` is the reference angle after substep `i`.
/// Divergence yields [`DIVERGED_COST`].
pub fn accumulate_cost<M: HoldModel>(
    model: &M,
    start: &M::State,
    seq: &[f64],
    refs: &[f64],
    substeps: usize,
    weights: CostWeights,
) -> f64 {
    let horizon = seq.len() / 2;
    debug_assert_eq!(refs.len(), horizon * substeps);
    let mut state = start.clone();
    let mut cost = 0.0;
    let mut idx = 0;
    for k in 0..horizon {
        let held = model.hold(&mut state, [seq[2 * k], seq[2 * k + 1]], substeps, |theta, force| {
            cost += weights.w_theta * (theta - refs[idx]).abs() + weights.w_f * (force - weights.f_ref).abs();
            idx += 1;
        });
        if held.is_err() || !cost.is_finite() {
            return DIVERGED_COST;
        }
    }
    cost
}

/// Reference angles at every substep of the next `horizon` control steps.
pub fn horizon_references(env: &Env, horizon: usize) -> Vec<f64> {
    let cfg = env.config();
    let t0 = env.time();
    let traj = env.trajectory();
    (0..horizon * cfg.substeps)
        .map(|i| traj.eval(t0 + (i + 1) as f64 * cfg.dt_phys))
        .collect()
}

/// Cost of applying `seq` from the environment's current snapshot. The
/// environment is only read.
pub fn rollout_cost(env: &Env, seq: &[f64], cfg: &OracleConfig) -> f64 {
    let horizon = seq.len() / 2;
    let refs = horizon_references(env, horizon);
    let model = PlantModel {
        plant: env.plant(),
        dt: env.config().dt_phys,
        scheme: env.config().integrator,
    };
    let weights = CostWeights {
        w_theta: cfg.w_theta,
        w_f: cfg.w_f,
        f_ref: env.config().f_ref,
    };
    accumulate_cost(&model, env.state(), seq, &refs, env.config().substeps, weights)
}

/// `[p0, p1, …, p_{H−1}] → [p1, …, p_{H−1}, p_{H−1}]` (pairs).
pub fn shift_warm_start(warm: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(warm.len());
    if warm.len() >= 2 {
        out.extend_from_slice(&warm[2..]);
        out.extend_from_slice(&warm[warm.len() - 2..]);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: [f64; 2],
    pub sequence: Vec<f64>,
    pub evals_used: usize,
    pub best_cost: f64,
}

/// One receding-horizon optimization from the environment snapshot.
///
/// The initial mean (shifted warm start, or zeros) is evaluated first and is
/// the incumbent; a candidate replaces the incumbent only with a strictly
/// lower cost. Generations run while the budget allows a full population.
pub fn oracle_decide(env: &Env, cfg: &OracleConfig, warm: Option<&[f64]>, rng: &mut ChaCha8Rng) -> Decision {
    let dim = cfg.dim();
    let v_max = env.plant().params().v_max;
    let mean = match warm {
        Some(w) if w.len() == dim => shift_warm_start(w),
        _ => vec![0.0; dim],
    };
    let mean: Vec<f64> = mean.into_iter().map(|v| v.clamp(-v_max, v_max)).collect();

    let refs = horizon_references(env, cfg.horizon);
    let model = PlantModel {
        plant: env.plant(),
        dt: env.config().dt_phys,
        scheme: env.config().integrator,
    };
    let weights = CostWeights {
        w_theta: cfg.w_theta,
        w_f: cfg.w_f,
        f_ref: env.config().f_ref,
    };
    let substeps = env.config().substeps;
    let start = *env.state();
    let cost_of = |seq: &[f64]| accumulate_cost(&model, &start, seq, &refs, substeps, weights);

    let mut best = mean.clone();
    let mut best_cost = cost_of(&mean);
    let mut evals = 1;

    let mut es = CmaEs::new(mean, cfg.init_sigma(v_max), Some(cfg.pop_size())).with_bounds(-v_max, v_max);
    while evals + es.pop_size() <= cfg.max_evals {
        let candidates = es.ask(rng);
        let costs: Vec<f64> = candidates.par_iter().map(|c| cost_of(c)).collect();
        evals += candidates.len();
        for (c, &cost) in candidates.iter().zip(&costs) {
            if cost < best_cost {
                best_cost = cost;
                best.clone_from(c);
            }
        }
        es.tell(&candidates, &costs);
    }

    Decision {
        action: [best[0], best[1]],
        sequence: best,
        evals_used: evals,
        best_cost,
    }
}

/// Stateful oracle controller carrying the warm start between decisions.
/// The sampling stream of each decision is keyed by the step index, so a
/// decision depends only on the seed, the snapshot and the warm start.
#[derive(Debug, Clone)]
pub struct Oracle {
    cfg: OracleConfig,
    warm: Option<Vec<f64>>,
    last: Option<Decision>,
}

impl Oracle {
    pub fn new(cfg: OracleConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Oracle {
            cfg,
            warm: None,
            last: None,
        })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    pub fn last_decision(&self) -> Option<&Decision> {
        self.last.as_ref()
    }

    pub fn decide(&mut self, env: &Env) -> Decision {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(env.step_index() as u64);
        let decision = oracle_decide(env, &self.cfg, self.warm.as_deref(), &mut rng);
        self.warm = Some(decision.sequence.clone());
        self.last = Some(decision.clone());
        decision
    }
}

impl Controller for Oracle {
    fn reset(&mut self) {
        self.warm = None;
        self.last = None;
    }

    fn act(&mut self, env: &Env) -> Result<[f64; 2]> {
        Ok(self.decide(env).action)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    #[serde(rename = "w_F")]
    pub w_f: f64,
    pub angle_cost: f64,
    pub force_cost: f64,
}

/// One closed-loop oracle episode per force weight (ascending), on the same
/// trajectory. Costs are `Σ|θ_g − θ_ref|` and `Σ|F_g − F_ref|` over the
/// post-step states of the episode; the fail band does not end the episode so
/// every weight is scored over the same duration.
pub fn pareto_sweep(
    weight_grid: &[f64],
    params: &PlantParams,
    env_cfg: &EnvConfig,
    oracle_cfg: &OracleConfig,
    traj_seed: u64,
) -> Result<Vec<ParetoRow>> {
    if weight_grid.is_empty() {
        return Err(Error::Config("Pareto weight grid is empty".into()));
    }
    let mut grid = weight_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    let cfg = EnvConfig {
        terminate_on_fail: false,
        ..env_cfg.clone()
    };
    let mut env = Env::new(params, cfg)?;
    let traj = if env.config().flat_reference {
        ReferenceTrajectory::flat()
    } else {
        ReferenceTrajectory::sample(traj_seed)
    };
    grid.into_iter()
        .map(|w_f| {
            let mut oracle = Oracle::new(OracleConfig {
                w_f,
                ..oracle_cfg.clone()
            })?;
            let stats = run_episode(&mut env, &mut oracle, traj, |_, _, _| {})?;
            log::info!(
                "pareto w_F={w_f:e}: angle {:.5} force {:.5}",
                stats.sum_abs_angle_err,
                stats.sum_abs_force_err
            );
            Ok(ParetoRow {
                w_f,
                angle_cost: stats.sum_abs_angle_err,
                force_cost: stats.sum_abs_force_err,
            })
        })
        .collect()
}
