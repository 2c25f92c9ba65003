//! Mixed-platoon longitudinal dynamics.
//!
//! A platoon of `n` following vehicles drives behind one head vehicle
//! (index 0). Each follower is either a human-driven vehicle obeying the
//! optimal velocity model (OVM) or a connected automated vehicle accepting an
//! external acceleration command. This module provides the nonlinear
//! simulation step, equilibrium computation, linearization around an
//! equilibrium, and zero-order-hold discretization of the resulting
//! state-space model.
//!
//! Conventions: vehicles are numbered 1..=n front to back; `s_i` is the
//! spacing between vehicle `i` and its predecessor; the error state stacks
//! `(s_i - s_i*, v_i - v*)` per vehicle.

use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;
use std::fmt;

/// Errors from dynamics and model construction.
#[derive(Debug, Clone, PartialEq)]
pub enum TrafficError {
    /// A scalar argument violated its documented range.
    BadParam { name: &'static str, value: f64 },
    /// Spacing passed to the desired-velocity profile must be nonnegative.
    NegativeSpacing { s: f64 },
    /// No interior equilibrium spacing exists for the requested velocity.
    DegenerateEquilibrium { v_star: f64, v_max: f64 },
    /// A slice had the wrong length for the platoon layout.
    Dimension { what: &'static str, expected: usize, got: usize },
    /// Invalid platoon layout.
    BadConfig(String),
}

impl fmt::Display for TrafficError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrafficError::BadParam { name, value } => {
                write!(f, "parameter {name} = {value} out of range")
            }
            TrafficError::NegativeSpacing { s } => {
                write!(f, "negative spacing {s} m")
            }
            TrafficError::DegenerateEquilibrium { v_star, v_max } => {
                write!(
                    f,
                    "no equilibrium spacing for v* = {v_star} m/s (must lie in (0, {v_max}))"
                )
            }
            TrafficError::Dimension { what, expected, got } => {
                write!(f, "{what}: expected length {expected}, got {got}")
            }
            TrafficError::BadConfig(msg) => write!(f, "invalid platoon config: {msg}"),
        }
    }
}

impl std::error::Error for TrafficError {}

/// Optimal-velocity-model parameters for one human driver.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HdvParams {
    /// Sensitivity gain on the desired-velocity error (1/s).
    pub alpha: f64,
    /// Gain on the relative velocity to the predecessor (1/s).
    pub beta: f64,
    /// Standstill spacing below which the desired velocity is zero (m).
    pub s_st: f64,
    /// Free-flow spacing above which the desired velocity saturates (m).
    pub s_go: f64,
    /// Maximum desired velocity (m/s).
    pub v_max: f64,
}

impl HdvParams {
    /// Nominal driver, also used to design CAV equilibrium spacing.
    pub fn nominal() -> Self {
        HdvParams { alpha: 0.6, beta: 0.9, s_st: 5.0, s_go: 35.0, v_max: 30.0 }
    }

    /// Checks the documented parameter ranges.
    pub fn validate(&self) -> Result<(), TrafficError> {
        if !(self.alpha > 0.0) {
            return Err(TrafficError::BadParam { name: "alpha", value: self.alpha });
        }
        if !(self.beta > 0.0) {
            return Err(TrafficError::BadParam { name: "beta", value: self.beta });
        }
        if !(self.v_max > 0.0) {
            return Err(TrafficError::BadParam { name: "v_max", value: self.v_max });
        }
        if !(self.s_st > 0.0 && self.s_st < self.s_go) {
            return Err(TrafficError::BadParam { name: "s_st", value: self.s_st });
        }
        Ok(())
    }
}

/// Acceleration limits applied to every vehicle, human or automated.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AccelLimits {
    pub a_min: f64,
    pub a_max: f64,
}

impl Default for AccelLimits {
    fn default() -> Self {
        AccelLimits { a_min: -5.0, a_max: 2.0 }
    }
}

/// Platoon layout: which followers are automated, and the OVM parameters of
/// the remaining human drivers.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MixedConfig {
    /// Total number of following vehicles.
    pub n: usize,
    /// Number of CAVs.
    pub m: usize,
    /// Strictly increasing CAV positions, 1-based.
    pub cav_indices: Vec<usize>,
    /// Parameters of the `n - m` human drivers, front to back.
    pub hdv_params: Vec<HdvParams>,
}

impl MixedConfig {
    pub fn new(
        n: usize,
        cav_indices: Vec<usize>,
        hdv_params: Vec<HdvParams>,
    ) -> Result<Self, TrafficError> {
        let m = cav_indices.len();
        if m == 0 || m > n {
            return Err(TrafficError::BadConfig(format!(
                "need 1 <= m <= n, got m = {m}, n = {n}"
            )));
        }
        if !cav_indices.windows(2).all(|w| w[0] < w[1]) {
            return Err(TrafficError::BadConfig(
                "cav_indices must be strictly increasing".into(),
            ));
        }
        if cav_indices[0] < 1 || cav_indices[m - 1] > n {
            return Err(TrafficError::BadConfig(format!(
                "cav_indices must lie in 1..={n}"
            )));
        }
        if hdv_params.len() != n - m {
            return Err(TrafficError::Dimension {
                what: "hdv_params",
                expected: n - m,
                got: hdv_params.len(),
            });
        }
        for p in &hdv_params {
            p.validate()?;
        }
        Ok(MixedConfig { n, m, cav_indices, hdv_params })
    }

    /// Layout in which every human driver shares one parameter set.
    pub fn homogeneous(
        n: usize,
        cav_indices: Vec<usize>,
        p: HdvParams,
    ) -> Result<Self, TrafficError> {
        let m = cav_indices.len();
        let params = vec![p; n.saturating_sub(m)];
        MixedConfig::new(n, cav_indices, params)
    }

    /// Whether vehicle `i` (1-based) is a CAV.
    pub fn is_cav(&self, i: usize) -> bool {
        self.cav_indices.binary_search(&i).is_ok()
    }

    /// OVM parameters of vehicle `i` (1-based); `None` when `i` is a CAV.
    pub fn hdv_param(&self, i: usize) -> Option<&HdvParams> {
        if self.is_cav(i) {
            return None;
        }
        let slot = (1..i).filter(|&j| !self.is_cav(j)).count();
        self.hdv_params.get(slot)
    }
}

/// Instantaneous platoon state.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrafficState {
    /// Spacing to the predecessor, per vehicle (m).
    pub spacing: Vec<f64>,
    /// Velocity per vehicle (m/s).
    pub velocity: Vec<f64>,
    /// Head-vehicle velocity (m/s).
    pub head_velocity: f64,
    /// Set when any spacing has reached zero; never cleared by the
    /// simulation so that safety violations stay visible.
    pub collision: bool,
}

impl TrafficState {
    /// The platoon at rest on an equilibrium: every vehicle (and the head)
    /// at `v*`, every spacing at its equilibrium value.
    pub fn at_equilibrium(eq: &Equilibrium) -> Self {
        TrafficState {
            spacing: eq.s_star.clone(),
            velocity: vec![eq.v_star; eq.s_star.len()],
            head_velocity: eq.v_star,
            collision: false,
        }
    }
}

/// An equilibrium flow: common velocity and per-vehicle spacing.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Equilibrium {
    pub v_star: f64,
    pub s_star: Vec<f64>,
}

impl Equilibrium {
    /// Equilibrium for a platoon: each HDV gets the spacing at which its own
    /// OVM desired velocity equals `v_star`; CAV spacing is designed from
    /// the nominal driver's closed form.
    pub fn for_config(cfg: &MixedConfig, v_star: f64) -> Result<Self, TrafficError> {
        let nominal = HdvParams::nominal();
        let mut s_star = Vec::with_capacity(cfg.n);
        for i in 1..=cfg.n {
            let p = cfg.hdv_param(i).unwrap_or(&nominal);
            s_star.push(solve_equilibrium_spacing(v_star, p)?);
        }
        Ok(Equilibrium { v_star, s_star })
    }
}

/// Linearized HDV gains around an equilibrium.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinearCoeffs {
    /// Spacing gain alpha1 = alpha * f_v'(s*) (1/s^2).
    pub alpha1: f64,
    /// Own-velocity gain alpha2 = alpha + beta (1/s).
    pub alpha2: f64,
    /// Predecessor-velocity gain alpha3 = beta (1/s).
    pub alpha3: f64,
}

/// Continuous-time linearized error-state model.
///
/// State `x` stacks `(spacing error, velocity error)` per vehicle; input `u`
/// holds the CAV accelerations; the scalar external input is the head
/// vehicle's velocity error; output `y` is every velocity error followed by
/// the CAV spacing errors.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub h: DVector<f64>,
    pub c: DMatrix<f64>,
}

/// Zero-order-hold discretization of a [`StateSpaceModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub ad: DMatrix<f64>,
    pub bd: DMatrix<f64>,
    pub hd: DVector<f64>,
    pub cd: DMatrix<f64>,
    pub dt: f64,
}

fn desired_velocity(s: f64, p: &HdvParams) -> f64 {
    if s <= p.s_st {
        0.0
    } else if s >= p.s_go {
        p.v_max
    } else {
        0.5 * p.v_max * (1.0 - (PI * (s - p.s_st) / (p.s_go - p.s_st)).cos())
    }
}

fn desired_velocity_slope(s: f64, p: &HdvParams) -> f64 {
    if s <= p.s_st || s >= p.s_go {
        0.0
    } else {
        let w = PI / (p.s_go - p.s_st);
        0.5 * p.v_max * w * (w * (s - p.s_st)).sin()
    }
}

/// Spacing-dependent desired velocity of the OVM: zero up to the standstill
/// spacing, `v_max` beyond the free-flow spacing, a raised-cosine ramp in
/// between.
pub fn ovm_desired_velocity(s: f64, p: &HdvParams) -> Result<f64, TrafficError> {
    if s < 0.0 {
        return Err(TrafficError::NegativeSpacing { s });
    }
    Ok(desired_velocity(s, p))
}

/// OVM commanded acceleration `alpha * (v_des(s) - v) + beta * s_dot`.
pub fn ovm_acceleration(s: f64, s_dot: f64, v: f64, p: &HdvParams) -> f64 {
    p.alpha * (desired_velocity(s, p) - v) + p.beta * s_dot
}

/// Spacing at which the OVM desired velocity equals `v_star`, from the
/// closed-form inverse of the raised-cosine ramp. The result lies strictly
/// between `s_st` and `s_go`.
pub fn solve_equilibrium_spacing(v_star: f64, p: &HdvParams) -> Result<f64, TrafficError> {
    if !(v_star > 0.0 && v_star < p.v_max) {
        return Err(TrafficError::DegenerateEquilibrium { v_star, v_max: p.v_max });
    }
    let frac = (1.0 - 2.0 * v_star / p.v_max).acos() / PI;
    Ok(p.s_st + frac * (p.s_go - p.s_st))
}

/// First-order gains of one HDV around the equilibrium at `v_star`.
pub fn linearize_hdv(p: &HdvParams, v_star: f64) -> Result<LinearCoeffs, TrafficError> {
    let s_star = solve_equilibrium_spacing(v_star, p)?;
    Ok(LinearCoeffs {
        alpha1: p.alpha * desired_velocity_slope(s_star, p),
        alpha2: p.alpha + p.beta,
        alpha3: p.beta,
    })
}

/// Linearizes every human driver of the platoon at `v_star`, front to back.
pub fn linearize_platoon(cfg: &MixedConfig, v_star: f64) -> Result<Vec<LinearCoeffs>, TrafficError> {
    cfg.hdv_params.iter().map(|p| linearize_hdv(p, v_star)).collect()
}

/// Assembles the linearized error-state model of the mixed platoon.
///
/// The system matrix is block lower bidiagonal. HDV `i` contributes
/// `[[0, -1], [a1, -a2]]` on the diagonal and `[[0, 1], [0, a3]]` coupling to
/// vehicle `i-1`; a CAV contributes the same blocks with the acceleration row
/// zeroed, and instead receives a unit input column on its velocity row.
pub fn build_continuous_model(
    cfg: &MixedConfig,
    coeffs: &[LinearCoeffs],
) -> Result<StateSpaceModel, TrafficError> {
    let (n, m) = (cfg.n, cfg.m);
    if coeffs.len() != n - m {
        return Err(TrafficError::Dimension {
            what: "coeffs",
            expected: n - m,
            got: coeffs.len(),
        });
    }

    let mut a = DMatrix::zeros(2 * n, 2 * n);
    let mut hdv_slot = 0;
    for i in 1..=n {
        let r = 2 * (i - 1);
        a[(r, r + 1)] = -1.0;
        if i > 1 {
            a[(r, r - 1)] = 1.0;
        }
        if !cfg.is_cav(i) {
            let c = &coeffs[hdv_slot];
            a[(r + 1, r)] = c.alpha1;
            a[(r + 1, r + 1)] = -c.alpha2;
            if i > 1 {
                a[(r + 1, r - 1)] = c.alpha3;
            }
            hdv_slot += 1;
        }
    }

    let mut b = DMatrix::zeros(2 * n, m);
    for (k, &ik) in cfg.cav_indices.iter().enumerate() {
        b[(2 * ik - 1, k)] = 1.0;
    }

    let mut h = DVector::zeros(2 * n);
    h[0] = 1.0;
    if !cfg.is_cav(1) {
        h[1] = coeffs[0].alpha3;
    }

    let mut c = DMatrix::zeros(n + m, 2 * n);
    for i in 0..n {
        c[(i, 2 * i + 1)] = 1.0;
    }
    for (k, &ik) in cfg.cav_indices.iter().enumerate() {
        c[(n + k, 2 * (ik - 1))] = 1.0;
    }

    Ok(StateSpaceModel { a, b, h, c })
}

/// Zero-order-hold discretization via the augmented matrix exponential:
/// exponentiate `[[A, B H], [0, 0]] * dt` and read off `Ad`, `Bd`, `Hd`.
pub fn discretize(model: &StateSpaceModel, dt: f64) -> Result<DiscreteModel, TrafficError> {
    if !(dt > 0.0) {
        return Err(TrafficError::BadParam { name: "dt", value: dt });
    }
    let nx = model.a.nrows();
    let m = model.b.ncols();
    let dim = nx + m + 1;

    let mut aug = DMatrix::zeros(dim, dim);
    aug.view_mut((0, 0), (nx, nx)).copy_from(&model.a);
    aug.view_mut((0, nx), (nx, m)).copy_from(&model.b);
    aug.view_mut((0, nx + m), (nx, 1)).copy_from(&model.h);
    let md = (aug * dt).exp();

    Ok(DiscreteModel {
        ad: md.view((0, 0), (nx, nx)).into_owned(),
        bd: md.view((0, nx), (nx, m)).into_owned(),
        hd: md.column(nx + m).rows(0, nx).into_owned(),
        cd: model.c.clone(),
        dt,
    })
}

/// One explicit-Euler step of the nonlinear platoon.
///
/// HDV acceleration is the OVM command plus its noise term; CAV acceleration
/// is the corresponding entry of `u`. All accelerations are saturated to the
/// limits before integration. Spacings integrate the current velocity
/// differences; the head velocity is then replaced by `v0_next`. A spacing
/// reaching zero sets the collision flag (sticky) — the state is returned
/// unclamped so the caller decides whether to continue.
pub fn step_nonlinear(
    state: &TrafficState,
    u: &[f64],
    v0_next: f64,
    noise: &[f64],
    dt: f64,
    cfg: &MixedConfig,
    limits: &AccelLimits,
) -> TrafficState {
    assert_eq!(u.len(), cfg.m, "u must hold one acceleration per CAV");
    assert_eq!(noise.len(), cfg.n - cfg.m, "noise must hold one entry per HDV");

    let n = cfg.n;
    let mut accel = vec![0.0; n];
    let mut hdv_slot = 0;
    let mut cav_slot = 0;
    for i in 1..=n {
        let idx = i - 1;
        let v_pred = if i == 1 { state.head_velocity } else { state.velocity[idx - 1] };
        let s_dot = v_pred - state.velocity[idx];
        let raw = if cfg.is_cav(i) {
            cav_slot += 1;
            u[cav_slot - 1]
        } else {
            hdv_slot += 1;
            ovm_acceleration(state.spacing[idx], s_dot, state.velocity[idx], &cfg.hdv_params[hdv_slot - 1])
                + noise[hdv_slot - 1]
        };
        accel[idx] = raw.clamp(limits.a_min, limits.a_max);
    }

    let mut spacing = state.spacing.clone();
    let mut velocity = state.velocity.clone();
    let mut collision = state.collision;
    for i in 0..n {
        let v_pred = if i == 0 { state.head_velocity } else { state.velocity[i - 1] };
        spacing[i] += dt * (v_pred - state.velocity[i]);
        velocity[i] += dt * accel[i];
        if spacing[i] <= 0.0 {
            collision = true;
        }
    }

    TrafficState { spacing, velocity, head_velocity: v0_next, collision }
}
