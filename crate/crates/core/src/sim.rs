//! Fixed-step integration, the multi-rate control environment and the
//! randomized multi-harmonic jaw reference.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{calibrate_pretension, DaeSolution, Plant, PlantParams, PlantState};

/// Any dynamic state beyond this magnitude is treated as divergence.
pub const BLOW_UP_BOUND: f64 = 1.0e6;

pub const OBS_DIM: usize = 10;
pub const ACT_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Sin,
    Cos,
}

/// `θ_ref(t) = θ0 + Σ A_k·trig(2π·f_k·t + φ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    pub family: Family,
    pub theta0: f64,
    pub amplitudes: [f64; 3],
    pub frequencies: [f64; 3],
    pub phase: f64,
}

impl ReferenceTrajectory {
    /// Constant zero reference.
    pub fn flat() -> Self {
        ReferenceTrajectory {
            family: Family::Cos,
            theta0: 0.0,
            amplitudes: [0.0; 3],
            frequencies: [0.4, 0.8, 1.2],
            phase: 0.0,
        }
    }

    /// Draw a trajectory. `f1 ~ U[0.4, 1.0]` Hz, `f2/f1 ~ U[1.5, 2.5)`,
    /// `f3/f1 ~ U[2.5, 3.5)`, `|A1| ~ U[0.05, 0.15]` rad, `|A2/A1| ~ U[0.15, 0.35]`,
    /// `|A3/A1| ~ U[0.03, 0.12]`, independent random signs, zero phase, and
    /// `θ0 = −ΣA_k`.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let family = if rng.random_bool(0.5) { Family::Sin } else { Family::Cos };
        let f1 = rng.random_range(0.4..=1.0);
        let gamma2 = rng.random_range(1.5..2.5);
        let gamma3 = rng.random_range(2.5..3.5);
        let a1 = rng.random_range(0.05..=0.15);
        let rho2 = rng.random_range(0.15..=0.35);
        let rho3 = rng.random_range(0.03..=0.12);
        let mut sign = || if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let amplitudes = [sign() * a1, sign() * rho2 * a1, sign() * rho3 * a1];
        ReferenceTrajectory {
            family,
            theta0: -(amplitudes[0] + amplitudes[1] + amplitudes[2]),
            amplitudes,
            frequencies: [f1, gamma2 * f1, gamma3 * f1],
            phase: 0.0,
        }
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        let trig = match self.family {
            Family::Sin => f64::sin,
            Family::Cos => f64::cos,
        };
        let mut acc = self.theta0;
        for k in 0..3 {
            acc += self.amplitudes[k] * trig(2.0 * PI * self.frequencies[k] * t + self.phase);
        }
        acc
    }

    /// Flat layout used by the episode file: family flag (0 = sin, 1 = cos),
    /// θ0, A1..A3, f1..f3, φ.
    pub fn to_array(&self) -> [f64; 9] {
        let flag = match self.family {
            Family::Sin => 0.0,
            Family::Cos => 1.0,
        };
        [
            flag,
            self.theta0,
            self.amplitudes[0],
            self.amplitudes[1],
            self.amplitudes[2],
            self.frequencies[0],
            self.frequencies[1],
            self.frequencies[2],
            self.phase,
        ]
    }

    pub fn from_array(a: [f64; 9]) -> Result<Self> {
        let family = match a[0] {
            f if f == 0.0 => Family::Sin,
            f if f == 1.0 => Family::Cos,
            other => return Err(Error::Format(format!("unknown trajectory family flag {other}"))),
        };
        Ok(ReferenceTrajectory {
            family,
            theta0: a[1],
            amplitudes: [a[2], a[3], a[4]],
            frequencies: [a[5], a[6], a[7]],
            phase: a[8],
        })
    }
}

/// Convenience alias matching the operation name.
pub fn sample_trajectory(seed: u64) -> ReferenceTrajectory {
    ReferenceTrajectory::sample(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// Velocities from accelerations first, then positions from the new
    /// velocities; currents by forward Euler.
    #[default]
    SemiImplicitEuler,
    ExplicitEuler,
}

#[inline]
fn advance(x: &mut PlantState, dx: &[f64; 8], dt: f64, scheme: Integrator) {
    match scheme {
        Integrator::SemiImplicitEuler => {
            x.dtheta_m1 += dt * dx[1];
            x.dtheta_m2 += dt * dx[3];
            x.dtheta_g += dt * dx[5];
            x.theta_m1 += dt * x.dtheta_m1;
            x.theta_m2 += dt * x.dtheta_m2;
            x.theta_g += dt * x.dtheta_g;
        }
        Integrator::ExplicitEuler => {
            x.theta_m1 += dt * dx[0];
            x.theta_m2 += dt * dx[2];
            x.theta_g += dt * dx[4];
            x.dtheta_m1 += dt * dx[1];
            x.dtheta_m2 += dt * dx[3];
            x.dtheta_g += dt * dx[5];
        }
    }
    x.i1 += dt * dx[6];
    x.i2 += dt * dx[7];
}

#[inline]
fn check_bounds(x: &PlantState, substep: usize) -> Result<()> {
    const NAMES: [&str; 8] = [
        "theta_m1", "dtheta_m1", "theta_m2", "dtheta_m2", "theta_g", "dtheta_g", "I1", "I2",
    ];
    for (name, value) in NAMES.iter().zip(x.dynamic()) {
        // negated comparison also catches NaN
        if !(value.abs() <= BLOW_UP_BOUND) {
            return Err(Error::Unstable {
                substep,
                field: name,
                value,
            });
        }
    }
    Ok(())
}

/// Advance `n` substeps under zero-order-hold voltages, calling `observe`
/// after every substep with the new state and the DAE solution at it.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn integrate_substeps_with<F>(
    plant: &Plant,
    state: &PlantState,
    v1: f64,
    v2: f64,
    n: usize,
    dt: f64,
    scheme: Integrator,
    mut observe: F,
) -> Result<PlantState>
where
    F: FnMut(usize, &PlantState, &DaeSolution),
{
    let mut x = *state;
    let (mut dx, _) = plant.derivative(&x, v1, v2);
    let mut sol = DaeSolution::default();
    for j in 0..n {
        advance(&mut x, &dx, dt, scheme);
        check_bounds(&x, j)?;
        let (next, s) = plant.derivative(&x, v1, v2);
        dx = next;
        sol = s;
        observe(j, &x, &sol);
    }
    Ok(x.with_forces(&sol))
}

/// Advance `n ≥ 1` substeps of length `dt` and cache the forces of the final state.
pub fn integrate_substeps(
    plant: &Plant,
    state: &PlantState,
    v1: f64,
    v2: f64,
    n: usize,
    dt: f64,
    scheme: Integrator,
) -> Result<PlantState> {
    if n == 0 {
        return Err(Error::param("substeps", "must be >= 1"));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::param("dt_phys", format!("must be > 0, got {dt}")));
    }
    integrate_substeps_with(plant, state, v1, v2, n, dt, scheme, |_, _, _| {})
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    #[serde(rename = "F_ref")]
    pub f_ref: f64,
    pub fail_band: f64,
    #[serde(rename = "lambda_F")]
    pub lambda_f: f64,
    pub lambda_theta: f64,
    pub dt_phys: f64,
    pub control_period: f64,
    pub substeps: usize,
    pub episode_len: usize,
    pub seed: u64,
    pub integrator: Integrator,
    /// End the episode when the force leaves the fail band.
    pub terminate_on_fail: bool,
    /// Replace sampled trajectories by the constant zero reference.
    pub flat_reference: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            f_ref: 12.57,
            fail_band: 2.5,
            lambda_f: 0.005,
            lambda_theta: 1.0,
            dt_phys: 2.0e-6,
            control_period: 1.0e-3,
            substeps: 500,
            episode_len: 3000,
            seed: 0,
            integrator: Integrator::SemiImplicitEuler,
            terminate_on_fail: true,
            flat_reference: false,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_ref.is_finite() && self.f_ref > 0.0) {
            return Err(Error::param("F_ref", "must be > 0"));
        }
        if !(self.fail_band.is_finite() && self.fail_band > 0.0) {
            return Err(Error::param("fail_band", "must be > 0"));
        }
        if !(self.lambda_f >= 0.0 && self.lambda_theta >= 0.0) {
            return Err(Error::param("lambda_F", "reward weights must be >= 0"));
        }
        if !(self.dt_phys > 0.0 && self.control_period > 0.0) {
            return Err(Error::param("dt_phys", "time steps must be > 0"));
        }
        if self.substeps == 0 {
            return Err(Error::param("substeps", "must be >= 1"));
        }
        let period = self.substeps as f64 * self.dt_phys;
        if ((period - self.control_period) / self.control_period).abs() > 1e-9 {
            return Err(Error::param(
                "substeps",
                format!(
                    "substeps·dt_phys = {period:e} s must equal control_period = {:e} s",
                    self.control_period
                ),
            ));
        }
        if self.episode_len == 0 {
            return Err(Error::param("episode_len", "must be >= 1"));
        }
        Ok(())
    }
}

/// Ten-component observation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Observation {
    pub theta_m1: f64,
    pub dtheta_m1: f64,
    pub theta_m2: f64,
    pub dtheta_m2: f64,
    pub i1: f64,
    pub i2: f64,
    pub theta_g: f64,
    pub dtheta_g: f64,
    /// `F_g − F_ref`, N.
    pub force_err: f64,
    /// `θ_g − θ_ref(t)`, rad.
    pub angle_err: f64,
}

impl Observation {
    pub fn to_array(&self) -> [f64; OBS_DIM] {
        [
            self.theta_m1,
            self.dtheta_m1,
            self.theta_m2,
            self.dtheta_m2,
            self.i1,
            self.i2,
            self.theta_g,
            self.dtheta_g,
            self.force_err,
            self.angle_err,
        ]
    }

    pub fn from_array(a: &[f64]) -> Self {
        Observation {
            theta_m1: a[0],
            dtheta_m1: a[1],
            theta_m2: a[2],
            dtheta_m2: a[3],
            i1: a[4],
            i2: a[5],
            theta_g: a[6],
            dtheta_g: a[7],
            force_err: a[8],
            angle_err: a[9],
        }
    }
}

/// Penalty for one control step.
pub fn reward(lambda_f: f64, lambda_theta: f64, force_err: f64, angle_err: f64) -> f64 {
    -(lambda_f * force_err.abs() + lambda_theta * angle_err.abs())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub obs: Observation,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    /// Voltages actually applied after clipping.
    pub applied: [f64; 2],
}

/// One control-rate environment instance. Cloning yields an independent snapshot.
#[derive(Debug, Clone)]
pub struct Env {
    plant: Arc<Plant>,
    cfg: EnvConfig,
    state: PlantState,
    traj: ReferenceTrajectory,
    step: usize,
    done: bool,
}

impl Env {
    /// Build the environment; the plant pretension is recalibrated so the rest
    /// grasp force equals `F_ref`.
    pub fn new(params: &PlantParams, cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        params.validate()?;
        let pretension = calibrate_pretension(params, cfg.f_ref)?;
        let plant = Plant::new(PlantParams {
            pretension,
            ..params.clone()
        })?;
        let state = plant.rest_state();
        Ok(Env {
            plant: Arc::new(plant),
            cfg,
            state,
            traj: ReferenceTrajectory::flat(),
            step: 0,
            done: true,
        })
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn trajectory(&self) -> &ReferenceTrajectory {
        &self.traj
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Physical time of the current state.
    pub fn time(&self) -> f64 {
        self.step as f64 * self.cfg.control_period
    }

    /// Reset at the pretensioned equilibrium with a fresh trajectory drawn from `seed`.
    pub fn reset(&mut self, seed: u64) -> (Observation, ReferenceTrajectory) {
        let traj = if self.cfg.flat_reference {
            ReferenceTrajectory::flat()
        } else {
            ReferenceTrajectory::sample(seed)
        };
        (self.reset_with(traj), traj)
    }

    /// Reset onto a given trajectory (used for replay).
    pub fn reset_with(&mut self, traj: ReferenceTrajectory) -> Observation {
        self.traj = traj;
        self.state = self.plant.rest_state();
        self.step = 0;
        self.done = false;
        self.observe()
    }

    pub fn observe(&self) -> Observation {
        let s = &self.state;
        Observation {
            theta_m1: s.theta_m1,
            dtheta_m1: s.dtheta_m1,
            theta_m2: s.theta_m2,
            dtheta_m2: s.dtheta_m2,
            i1: s.i1,
            i2: s.i2,
            theta_g: s.theta_g,
            dtheta_g: s.dtheta_g,
            force_err: s.fg - self.cfg.f_ref,
            angle_err: s.theta_g - self.traj.eval(self.time()),
        }
    }

    pub fn clip_action(&self, action: [f64; 2]) -> [f64; 2] {
        let v_max = self.plant.params().v_max;
        action.map(|v| if v.is_nan() { 0.0 } else { v.clamp(-v_max, v_max) })
    }

    /// Apply one voltage pair for a control period.
    pub fn step(&mut self, action: [f64; 2]) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        let applied = self.clip_action(action);
        let next = integrate_substeps(
            &self.plant,
            &self.state,
            applied[0],
            applied[1],
            self.cfg.substeps,
            self.cfg.dt_phys,
            self.cfg.integrator,
        );
        let next = match next {
            Ok(s) => s,
            Err(e) => {
                self.done = true;
                return Err(e);
            }
        };
        self.state = next;
        self.step += 1;
        let obs = self.observe();
        let reward = reward(self.cfg.lambda_f, self.cfg.lambda_theta, obs.force_err, obs.angle_err);
        let terminated = self.cfg.terminate_on_fail && obs.force_err.abs() > self.cfg.fail_band;
        let truncated = !terminated && self.step >= self.cfg.episode_len;
        self.done = terminated || truncated;
        Ok(StepOutcome {
            obs,
            reward,
            terminated,
            truncated,
            applied,
        })
    }
}
