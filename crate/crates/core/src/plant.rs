//! Coupled electromechanical model of the dual-motor, tendon-driven jaw.
//!
//! Two DC motors wind an agonist/antagonist tendon pair through a gearbox and
//! spool. The tendons are linear axial springs with a lumped share of their
//! mass, and they drive a rigid jaw about its distal pulley. At every
//! evaluation the accelerations and internal forces
//! `z = [θ̈_g, θ̈_m1, θ̈_m2, F_s1, F_s2, F_g]` are obtained from a 6×6 linear
//! system `A·z = b(x)`.
//!
//! Sign conventions:
//! * `Δℓ1 = r_s·θ_m1/τ − r_p·θ_g`, `Δℓ2 = r_s·θ_m2/τ + r_p·θ_g`; tendon 1 pulls
//!   the jaw towards positive `θ_g`.
//! * The pretension is an elongation offset `P/k_w` on both tendons whose
//!   reaction is carried by the spool preload, so the motors only feel
//!   `F_si − P`. The rest configuration is then an equilibrium at zero
//!   voltage and current with `F_g = (r_p/r_tip)·P`.
//! * The lumped tendon mass enters the constitutive rows as
//!   `F_si − m_eff·ℓ̈_i = k_w·Δℓ_i`, which adds (never removes) inertia.
//! * Gearbox efficiency scales the tendon reaction reflected onto the rotor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat6 = [[f64; 6]; 6];
pub type Vec6 = [f64; 6];

/// Index of each unknown in `z`.
pub mod z {
    pub const JAW_ACC: usize = 0;
    pub const MOTOR1_ACC: usize = 1;
    pub const MOTOR2_ACC: usize = 2;
    pub const TENDON1: usize = 3;
    pub const TENDON2: usize = 4;
    pub const GRASP: usize = 5;
}

/// Physical constants of the mechanism. Config keys use the short physical
/// symbols (`R`, `L`, `J_r`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantParams {
    /// Winding resistance, Ω.
    #[serde(rename = "R")]
    pub resistance: f64,
    /// Winding inductance, H.
    #[serde(rename = "L")]
    pub inductance: f64,
    /// Back-EMF constant, V·s/rad; also the torque constant in N·m/A.
    pub k_v: f64,
    /// Rotor plus gearbox inertia, kg·m².
    #[serde(rename = "J_r")]
    pub rotor_inertia: f64,
    pub b_m: f64,
    pub tau_cm: f64,
    pub gear_ratio: f64,
    pub eta: f64,
    /// Spool radius, m.
    pub r_s: f64,
    /// Jaw pulley radius, m.
    pub r_p: f64,
    /// Joint axis to jaw tip, m.
    pub r_tip: f64,
    #[serde(rename = "E")]
    pub youngs_modulus: f64,
    /// Effective (fill-factor adjusted) tendon cross-section, m².
    #[serde(rename = "A")]
    pub area: f64,
    pub alpha: f64,
    #[serde(rename = "L_w")]
    pub tendon_length: f64,
    pub rho: f64,
    #[serde(rename = "J_g")]
    pub jaw_inertia: f64,
    pub b_g: f64,
    pub tau_cg: f64,
    #[serde(rename = "V_max")]
    pub v_max: f64,
    /// Symmetric tendon tension at rest, N.
    pub pretension: f64,
    /// Half-width of the tanh surrogate for Coulomb friction, rad/s.
    pub eps_v: f64,
    /// Share of the tendon mass attached to each tendon's elongation.
    pub mass_share: f64,
    /// Clamp tendon forces at zero (wire ropes cannot push).
    pub clamp_slack: bool,
}

impl Default for PlantParams {
    /// Desk parameter set: a small 24 V-class DC motor on a 50:1 gearbox,
    /// a 0.45 mm stainless wire rope (≈60 % fill) over a 0.5 m shaft, and a
    /// millimetre-scale jaw. The pretension is pre-calibrated so the rest
    /// grasp force is 12.57 N.
    fn default() -> Self {
        PlantParams {
            resistance: 4.0,
            inductance: 2.0e-4,
            k_v: 0.02,
            rotor_inertia: 1.0e-6,
            b_m: 1.0e-6,
            tau_cm: 3.0e-4,
            gear_ratio: 50.0,
            eta: 0.85,
            r_s: 5.0e-3,
            r_p: 3.0e-3,
            r_tip: 1.2e-2,
            youngs_modulus: 193.0e9,
            area: 9.5e-8,
            alpha: 0.5,
            tendon_length: 0.5,
            rho: 8000.0,
            jaw_inertia: 2.0e-8,
            b_g: 2.0e-5,
            tau_cg: 5.0e-6,
            v_max: 6.0,
            pretension: 50.28,
            eps_v: 1.0e-3,
            mass_share: 1.0 / 3.0,
            clamp_slack: true,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("R", self.resistance),
            ("L", self.inductance),
            ("k_v", self.k_v),
            ("J_r", self.rotor_inertia),
            ("gear_ratio", self.gear_ratio),
            ("r_s", self.r_s),
            ("r_p", self.r_p),
            ("r_tip", self.r_tip),
            ("E", self.youngs_modulus),
            ("A", self.area),
            ("alpha", self.alpha),
            ("L_w", self.tendon_length),
            ("rho", self.rho),
            ("J_g", self.jaw_inertia),
            ("V_max", self.v_max),
            ("eps_v", self.eps_v),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::param(name, format!("must be finite and > 0, got {value}")));
            }
        }
        let non_negative = [
            ("b_m", self.b_m),
            ("tau_cm", self.tau_cm),
            ("b_g", self.b_g),
            ("tau_cg", self.tau_cg),
            ("pretension", self.pretension),
            ("mass_share", self.mass_share),
        ];
        for (name, value) in non_negative {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::param(name, format!("must be finite and >= 0, got {value}")));
            }
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::param("eta", format!("must lie in (0, 1], got {}", self.eta)));
        }
        Ok(())
    }

    /// Tendon-to-motor transmission ratio `r_s/τ`, m/rad.
    pub fn spool_ratio(&self) -> f64 {
        self.r_s / self.gear_ratio
    }

    /// `r_p / (2·r_tip)`: grasp force per unit of summed tendon tension.
    pub fn grasp_gain(&self) -> f64 {
        self.r_p / (2.0 * self.r_tip)
    }

    pub fn k_t(&self) -> f64 {
        self.k_v
    }

    /// Lumped tendon mass attached to each elongation coordinate.
    pub fn effective_tendon_mass(&self) -> f64 {
        self.rho * self.area * self.tendon_length * self.mass_share
    }
}

/// Tendon stiffness `k_w = E·A·α/L_w` and lumped mass `m_w = ρ·A·L_w`.
pub fn derived_tendon_constants(params: &PlantParams) -> Result<(f64, f64)> {
    let factors = [
        ("E", params.youngs_modulus),
        ("A", params.area),
        ("alpha", params.alpha),
        ("L_w", params.tendon_length),
        ("rho", params.rho),
    ];
    for (name, value) in factors {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::param(name, format!("must be finite and > 0, got {value}")));
        }
    }
    let k_w = params.youngs_modulus * params.area * params.alpha / params.tendon_length;
    let m_w = params.rho * params.area * params.tendon_length;
    Ok((k_w, m_w))
}

fn tendon_stiffness(params: &PlantParams) -> f64 {
    params.youngs_modulus * params.area * params.alpha / params.tendon_length
}

/// Full plant state: the eight dynamic states plus forces cached from the
/// most recent DAE solve.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantState {
    pub theta_m1: f64,
    pub dtheta_m1: f64,
    pub theta_m2: f64,
    pub dtheta_m2: f64,
    pub theta_g: f64,
    pub dtheta_g: f64,
    pub i1: f64,
    pub i2: f64,
    pub fs1: f64,
    pub fs2: f64,
    pub fg: f64,
}

impl PlantState {
    /// `[θ_m1, θ̇_m1, θ_m2, θ̇_m2, θ_g, θ̇_g, I_1, I_2]`.
    pub fn dynamic(&self) -> [f64; 8] {
        [
            self.theta_m1,
            self.dtheta_m1,
            self.theta_m2,
            self.dtheta_m2,
            self.theta_g,
            self.dtheta_g,
            self.i1,
            self.i2,
        ]
    }

    pub fn from_dynamic(x: [f64; 8]) -> Self {
        PlantState {
            theta_m1: x[0],
            dtheta_m1: x[1],
            theta_m2: x[2],
            dtheta_m2: x[3],
            theta_g: x[4],
            dtheta_g: x[5],
            i1: x[6],
            i2: x[7],
            ..Default::default()
        }
    }

    pub fn with_forces(mut self, sol: &DaeSolution) -> Self {
        self.fs1 = sol.fs1;
        self.fs2 = sol.fs2;
        self.fg = sol.fg;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.dynamic().iter().all(|v| v.is_finite())
            && self.fs1.is_finite()
            && self.fs2.is_finite()
            && self.fg.is_finite()
    }
}

/// Solution vector `z` of the coupled system.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DaeSolution {
    pub ddtheta_g: f64,
    pub ddtheta_m1: f64,
    pub ddtheta_m2: f64,
    pub fs1: f64,
    pub fs2: f64,
    pub fg: f64,
}

impl DaeSolution {
    pub fn from_vec(z: &Vec6) -> Self {
        DaeSolution {
            ddtheta_g: z[z::JAW_ACC],
            ddtheta_m1: z[z::MOTOR1_ACC],
            ddtheta_m2: z[z::MOTOR2_ACC],
            fs1: z[z::TENDON1],
            fs2: z[z::TENDON2],
            fg: z[z::GRASP],
        }
    }

    pub fn to_vec(&self) -> Vec6 {
        [
            self.ddtheta_g,
            self.ddtheta_m1,
            self.ddtheta_m2,
            self.fs1,
            self.fs2,
            self.fg,
        ]
    }
}

/// Smooth surrogate of `sgn(v)`.
#[inline]
pub fn smooth_sign(v: f64, eps: f64) -> f64 {
    let x = v / eps;
    // tanh saturates to exactly ±1.0 in f64 well before |x| = 22
    if x > 22.0 {
        1.0
    } else if x < -22.0 {
        -1.0
    } else {
        x.tanh()
    }
}

/// Tendon elongations including the pretension offset `P/k_w`.
pub fn tendon_elongations(state: &PlantState, params: &PlantParams) -> (f64, f64) {
    let c = params.spool_ratio();
    let offset = params.pretension / tendon_stiffness(params);
    (
        c * state.theta_m1 - params.r_p * state.theta_g + offset,
        c * state.theta_m2 + params.r_p * state.theta_g + offset,
    )
}

/// Coefficient matrix of the coupled system. Depends on parameters only.
pub fn dae_matrix(params: &PlantParams) -> Mat6 {
    let c = params.spool_ratio();
    let m = params.effective_tendon_mass();
    let rp = params.r_p;
    let reflect = params.eta * c;
    let k = params.grasp_gain();
    [
        // jaw: J_g·θ̈_g − r_p·(F_s1 − F_s2)
        [params.jaw_inertia, 0.0, 0.0, -rp, rp, 0.0],
        // motors: J_r·θ̈_mi + η·(r_s/τ)·F_si
        [0.0, params.rotor_inertia, 0.0, reflect, 0.0, 0.0],
        [0.0, 0.0, params.rotor_inertia, 0.0, reflect, 0.0],
        // tendons: F_si − m_eff·(r_s·θ̈_mi/τ ∓ r_p·θ̈_g)
        [m * rp, -m * c, 0.0, 1.0, 0.0, 0.0],
        [-m * rp, 0.0, -m * c, 0.0, 1.0, 0.0],
        // grasp: F_g − r_p/(2·r_tip)·(F_s1 + F_s2)
        [0.0, 0.0, 0.0, -k, -k, 1.0],
    ]
}

/// State-dependent right-hand side of the coupled system.
pub fn dae_rhs(state: &PlantState, params: &PlantParams) -> Vec6 {
    let k_w = tendon_stiffness(params);
    let preload = params.eta * params.spool_ratio() * params.pretension;
    let (dl1, dl2) = tendon_elongations(state, params);
    let motor = |current: f64, omega: f64| {
        params.k_t() * current - params.b_m * omega - params.tau_cm * smooth_sign(omega, params.eps_v)
            + preload
    };
    [
        -params.b_g * state.dtheta_g - params.tau_cg * smooth_sign(state.dtheta_g, params.eps_v),
        motor(state.i1, state.dtheta_m1),
        motor(state.i2, state.dtheta_m2),
        k_w * dl1,
        k_w * dl2,
        0.0,
    ]
}

/// Assemble `(A, b)` for the current state. Applied voltages do not enter:
/// they only drive the current derivatives.
pub fn assemble_dae(state: &PlantState, params: &PlantParams) -> (Mat6, Vec6) {
    (dae_matrix(params), dae_rhs(state, params))
}

/// Gaussian elimination with partial pivoting.
pub fn solve_dae(a: &Mat6, b: &Vec6) -> Result<DaeSolution> {
    solve6(a, b).map(|z| DaeSolution::from_vec(&z))
}

pub(crate) fn solve6(a: &Mat6, b: &Vec6) -> Result<Vec6> {
    let mut m = *a;
    let mut rhs = *b;
    let scale = a
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tol = f64::EPSILON * 64.0 * scale.max(f64::MIN_POSITIVE);
    for col in 0..6 {
        let (pivot_row, pivot) = (col..6)
            .map(|r| (r, m[r][col].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if !(pivot > tol) {
            return Err(Error::SingularSystem { column: col, pivot });
        }
        m.swap(col, pivot_row);
        rhs.swap(col, pivot_row);
        for r in col + 1..6 {
            let f = m[r][col] / m[col][col];
            if f != 0.0 {
                for c in col..6 {
                    m[r][c] -= f * m[col][c];
                }
                rhs[r] -= f * rhs[col];
            }
        }
    }
    let mut x = [0.0; 6];
    for r in (0..6).rev() {
        let mut acc = rhs[r];
        for c in r + 1..6 {
            acc -= m[r][c] * x[c];
        }
        x[r] = acc / m[r][r];
    }
    Ok(x)
}

/// Replace tendon row `which` (0 or 1) by the slack condition `F_si = 0`.
fn slacken(a: &mut Mat6, b: &mut Vec6, which: usize) {
    let row = z::TENDON1 + which;
    a[row] = [0.0; 6];
    a[row][row] = 1.0;
    b[row] = 0.0;
}

/// Solve with unilateral tendons when `clamp_slack` is set: any tendon whose
/// solved force is negative is re-solved as slack.
fn solve_clamped(state: &PlantState, params: &PlantParams) -> Result<DaeSolution> {
    let (mut a, mut b) = assemble_dae(state, params);
    let mut sol = solve_dae(&a, &b)?;
    if !params.clamp_slack {
        return Ok(sol);
    }
    let mut slack = [false; 2];
    for _ in 0..2 {
        let forces = [sol.fs1, sol.fs2];
        let mut changed = false;
        for i in 0..2 {
            if !slack[i] && forces[i] < 0.0 {
                slack[i] = true;
                slacken(&mut a, &mut b, i);
                changed = true;
            }
        }
        if !changed {
            break;
        }
        sol = solve_dae(&a, &b)?;
    }
    Ok(sol)
}

/// Time derivative of the eight dynamic states, `[θ̇_m1, θ̈_m1, θ̇_m2, θ̈_m2,
/// θ̇_g, θ̈_g, İ_1, İ_2]`, together with the solved internal forces.
pub fn state_derivative(
    state: &PlantState,
    v1: f64,
    v2: f64,
    params: &PlantParams,
) -> Result<([f64; 8], DaeSolution)> {
    let sol = solve_clamped(state, params)?;
    let di = |v: f64, omega: f64, current: f64| {
        (v - params.k_v * omega - params.resistance * current) / params.inductance
    };
    let dx = [
        state.dtheta_m1,
        sol.ddtheta_m1,
        state.dtheta_m2,
        sol.ddtheta_m2,
        state.dtheta_g,
        sol.ddtheta_g,
        di(v1, state.dtheta_m1, state.i1),
        di(v2, state.dtheta_m2, state.i2),
    ];
    Ok((dx, sol))
}

/// Pretension giving grasp force `f_ref` at rest, found by bisection on the
/// rest-state solve.
pub fn calibrate_pretension(params: &PlantParams, f_ref: f64) -> Result<f64> {
    const UPPER: f64 = 1.0e4;
    if !(f_ref.is_finite() && f_ref > 0.0) {
        return Err(Error::Config(format!(
            "reference force {f_ref} N is unreachable: tendons cannot push"
        )));
    }
    let grasp_at = |pretension: f64| -> Result<f64> {
        let p = PlantParams {
            pretension,
            ..params.clone()
        };
        Ok(solve_clamped(&PlantState::default(), &p)?.fg)
    };
    let (mut lo, mut hi) = (0.0, UPPER);
    if grasp_at(hi)? < f_ref {
        return Err(Error::Config(format!(
            "reference force {f_ref} N is unreachable below {UPPER} N pretension"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if grasp_at(mid)? < f_ref {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (f_lo, f_hi) = (grasp_at(lo)?, grasp_at(hi)?);
    Ok(if (f_lo - f_ref).abs() <= (f_hi - f_ref).abs() { lo } else { hi })
}

/// Pre-factored plant used by the integrators. `A` depends only on the
/// parameters, so its inverse is computed once for every tendon slack pattern.
#[derive(Debug, Clone)]
pub struct Plant {
    params: PlantParams,
    k_w: f64,
    spool: f64,
    preload: f64,
    /// Inverse of A for slack patterns `none`, `1`, `2`, `both` (bit i = tendon i+1).
    inverses: [Mat6; 4],
}

impl Plant {
    pub fn new(params: PlantParams) -> Result<Self> {
        params.validate()?;
        let (k_w, _) = derived_tendon_constants(&params)?;
        let base = dae_matrix(&params);
        let mut inverses = [[[0.0; 6]; 6]; 4];
        for (pattern, inv) in inverses.iter_mut().enumerate() {
            let mut a = base;
            let mut dummy = [0.0; 6];
            for i in 0..2 {
                if pattern & (1 << i) != 0 {
                    slacken(&mut a, &mut dummy, i);
                }
            }
            for col in 0..6 {
                let mut e = [0.0; 6];
                e[col] = 1.0;
                let x = solve6(&a, &e)?;
                for row in 0..6 {
                    inv[row][col] = x[row];
                }
            }
        }
        Ok(Plant {
            k_w,
            spool: params.spool_ratio(),
            preload: params.eta * params.spool_ratio() * params.pretension,
            params,
            inverses,
        })
    }

    pub fn params(&self) -> &PlantParams {
        &self.params
    }

    pub fn k_w(&self) -> f64 {
        self.k_w
    }

    #[inline]
    fn rhs(&self, s: &PlantState) -> Vec6 {
        let p = &self.params;
        let offset = p.pretension / self.k_w;
        let dl1 = self.spool * s.theta_m1 - p.r_p * s.theta_g + offset;
        let dl2 = self.spool * s.theta_m2 + p.r_p * s.theta_g + offset;
        let motor = |current: f64, omega: f64| {
            p.k_t() * current - p.b_m * omega - p.tau_cm * smooth_sign(omega, p.eps_v) + self.preload
        };
        [
            -p.b_g * s.dtheta_g - p.tau_cg * smooth_sign(s.dtheta_g, p.eps_v),
            motor(s.i1, s.dtheta_m1),
            motor(s.i2, s.dtheta_m2),
            self.k_w * dl1,
            self.k_w * dl2,
            0.0,
        ]
    }

    #[inline]
    fn apply(inv: &Mat6, b: &Vec6) -> Vec6 {
        let mut z = [0.0; 6];
        for (zr, row) in z.iter_mut().zip(inv.iter()) {
            // b[5] is always zero
            *zr = row[0] * b[0] + row[1] * b[1] + row[2] * b[2] + row[3] * b[3] + row[4] * b[4];
        }
        z
    }

    /// Accelerations and internal forces at `state`.
    #[inline]
    pub fn solve(&self, state: &PlantState) -> DaeSolution {
        let mut b = self.rhs(state);
        let mut z = Self::apply(&self.inverses[0], &b);
        if self.params.clamp_slack && (z[z::TENDON1] < 0.0 || z[z::TENDON2] < 0.0) {
            let mut pattern = 0;
            for _ in 0..2 {
                let next = pattern
                    | usize::from(z[z::TENDON1] < 0.0)
                    | (usize::from(z[z::TENDON2] < 0.0) << 1);
                if next == pattern {
                    break;
                }
                pattern = next;
                for i in 0..2 {
                    if pattern & (1 << i) != 0 {
                        b[z::TENDON1 + i] = 0.0;
                    }
                }
                z = Self::apply(&self.inverses[pattern], &b);
            }
        }
        DaeSolution::from_vec(&z)
    }

    /// Same contract as [`state_derivative`], through the pre-factored system.
    #[inline]
    pub fn derivative(&self, state: &PlantState, v1: f64, v2: f64) -> ([f64; 8], DaeSolution) {
        let sol = self.solve(state);
        let p = &self.params;
        let di = |v: f64, omega: f64, current: f64| (v - p.k_v * omega - p.resistance * current) / p.inductance;
        (
            [
                state.dtheta_m1,
                sol.ddtheta_m1,
                state.dtheta_m2,
                sol.ddtheta_m2,
                state.dtheta_g,
                sol.ddtheta_g,
                di(v1, state.dtheta_m1, state.i1),
                di(v2, state.dtheta_m2, state.i2),
            ],
            sol,
        )
    }

    /// Storage function that is non-increasing at zero voltage:
    /// `(½J_r·Σω_m² + ½L·ΣI²)/η + ½J_g·ω_g² + ½m_eff·Σℓ̇² + ½k_w·Σ[Δℓ]₊² − (r_s/τ)·P·Σθ_m`.
    /// With `clamp_slack` off the elastic term uses the signed elongation.
    pub fn energy(&self, s: &PlantState) -> f64 {
        let p = &self.params;
        let (dl1, dl2) = tendon_elongations(s, p);
        let elastic = |dl: f64| {
            let dl = if p.clamp_slack { dl.max(0.0) } else { dl };
            0.5 * self.k_w * dl * dl
        };
        let rate1 = self.spool * s.dtheta_m1 - p.r_p * s.dtheta_g;
        let rate2 = self.spool * s.dtheta_m2 + p.r_p * s.dtheta_g;
        let m = p.effective_tendon_mass();
        (0.5 * p.rotor_inertia * (s.dtheta_m1.powi(2) + s.dtheta_m2.powi(2))
            + 0.5 * p.inductance * (s.i1.powi(2) + s.i2.powi(2)))
            / p.eta
            + 0.5 * p.jaw_inertia * s.dtheta_g.powi(2)
            + 0.5 * m * (rate1 * rate1 + rate2 * rate2)
            + elastic(dl1)
            + elastic(dl2)
            - self.spool * p.pretension * (s.theta_m1 + s.theta_m2)
    }

    /// Rest configuration with forces filled in.
    pub fn rest_state(&self) -> PlantState {
        let s = PlantState::default();
        s.with_forces(&self.solve(&s))
    }
}
