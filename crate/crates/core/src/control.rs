//! Controllers and closed-loop episode bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sim::{Env, ReferenceTrajectory, StepOutcome};

/// Anything that maps the current environment to a voltage pair.
///
/// Controllers receive the whole environment so that model-based ones (the
/// oracle) can roll out snapshots; learned policies only read the observation.
pub trait Controller {
    /// Called at the start of every episode.
    fn reset(&mut self) {}

    fn act(&mut self, env: &Env) -> Result<[f64; 2]>;
}

/// Always commands zero volts.
#[derive(Debug, Default, Clone, Copy)]
pub struct ZeroController;

impl Controller for ZeroController {
    fn act(&mut self, _env: &Env) -> Result<[f64; 2]> {
        Ok([0.0, 0.0])
    }
}

/// Per-episode tracking statistics. Errors are evaluated at the post-step
/// instant of every control step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub steps: usize,
    pub episode_return: f64,
    pub terminated: bool,
    pub sum_abs_force_err: f64,
    pub max_abs_force_err: f64,
    pub sum_abs_angle_err: f64,
    pub ref_min: f64,
    pub ref_max: f64,
}

impl Default for EpisodeStats {
    fn default() -> Self {
        EpisodeStats {
            steps: 0,
            episode_return: 0.0,
            terminated: false,
            sum_abs_force_err: 0.0,
            max_abs_force_err: 0.0,
            sum_abs_angle_err: 0.0,
            ref_min: f64::INFINITY,
            ref_max: f64::NEG_INFINITY,
        }
    }
}

impl EpisodeStats {
    pub fn record(&mut self, out: &StepOutcome) {
        let reference = out.obs.theta_g - out.obs.angle_err;
        self.steps += 1;
        self.episode_return += out.reward;
        self.terminated |= out.terminated;
        self.sum_abs_force_err += out.obs.force_err.abs();
        self.max_abs_force_err = self.max_abs_force_err.max(out.obs.force_err.abs());
        self.sum_abs_angle_err += out.obs.angle_err.abs();
        self.ref_min = self.ref_min.min(reference);
        self.ref_max = self.ref_max.max(reference);
    }

    pub fn mean_abs_force_err(&self) -> f64 {
        self.sum_abs_force_err / self.steps.max(1) as f64
    }

    pub fn mean_abs_angle_err(&self) -> f64 {
        self.sum_abs_angle_err / self.steps.max(1) as f64
    }

    /// Peak-to-peak range of the reference over the evaluated steps.
    pub fn reference_range(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.ref_max - self.ref_min
        }
    }
}

/// Run one episode on `traj` from the equilibrium. `on_step` sees the
/// pre-step observation array, the outcome and the trajectory time.
pub fn run_episode<C, F>(
    env: &mut Env,
    controller: &mut C,
    traj: ReferenceTrajectory,
    mut on_step: F,
) -> Result<EpisodeStats>
where
    C: Controller + ?Sized,
    F: FnMut(&Env, &[f64; crate::sim::OBS_DIM], &StepOutcome),
{
    controller.reset();
    let mut obs = env.reset_with(traj).to_array();
    let mut stats = EpisodeStats::default();
    while !env.is_done() {
        let action = controller.act(env)?;
        let out = env.step(action)?;
        stats.record(&out);
        on_step(env, &obs, &out);
        obs = out.obs.to_array();
    }
    Ok(stats)
}
