//! Closed-loop scenarios, traffic metrics, and seeded batch campaigns.
//!
//! A scenario prescribes the head vehicle's velocity over time; an arm picks
//! who drives the would-be CAV slots (plain human models, the data-driven
//! controller, or the model-based one). Every run starts with a quiet
//! equilibrium segment long enough to warm the measurement buffer, then
//! hands the loop over: observe, decide, record, step. Process noise is
//! drawn once per step as a full-platoon vector from a named stream, so runs
//! with the same seed are exactly paired across arms — human-driven slots
//! consume the same entries everywhere, and the controller arms simply leave
//! the automated slots' entries unused by the plant.

use std::fmt;

use rand::Rng;

use crate::data::{collect_offline_opts, CollectOptions, DataError, TrajectoryDataset};
use crate::deepc::{
    estimate_equilibrium, nominal_operating_point, ControlStep, DecisionRecord, DeepLccConfig,
    DeepcController, DeepcError, PastBuffer, DEFAULT_SOLVER_TOL,
};
use crate::mpc::{MpcConfig, MpcController, MpcError};
use crate::seeded_stream;
use crate::traffic::{
    build_continuous_model, discretize, linearize_platoon, ovm_acceleration, step_nonlinear,
    AccelLimits, Equilibrium, HdvParams, MixedConfig, TrafficError, TrafficState,
};

#[derive(Debug)]
pub enum ExperimentError {
    Scenario(String),
    /// The data-driven arm was requested without a dataset to drive it.
    MissingDataset,
    NeedMoreSeeds { have: usize },
    Data(DataError),
    Deepc(DeepcError),
    Mpc(MpcError),
    Traffic(TrafficError),
    /// A batch observer refused a finished run (e.g. an artifact write failed).
    Sink(String),
}

impl fmt::Display for ExperimentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExperimentError::Scenario(msg) => write!(f, "bad scenario: {msg}"),
            ExperimentError::MissingDataset => {
                write!(f, "the data-driven arm needs a pre-collected dataset")
            }
            ExperimentError::NeedMoreSeeds { have } => {
                write!(f, "batch statistics need at least 2 seeds, got {have}")
            }
            ExperimentError::Data(e) => write!(f, "{e}"),
            ExperimentError::Deepc(e) => write!(f, "{e}"),
            ExperimentError::Mpc(e) => write!(f, "{e}"),
            ExperimentError::Traffic(e) => write!(f, "{e}"),
            ExperimentError::Sink(msg) => write!(f, "batch sink failed: {msg}"),
        }
    }
}

impl std::error::Error for ExperimentError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            ExperimentError::Data(e) => Some(e),
            ExperimentError::Deepc(e) => Some(e),
            ExperimentError::Mpc(e) => Some(e),
            ExperimentError::Traffic(e) => Some(e),
            _ => None,
        }
    }
}

impl From<DataError> for ExperimentError {
    fn from(e: DataError) -> Self {
        ExperimentError::Data(e)
    }
}

impl From<DeepcError> for ExperimentError {
    fn from(e: DeepcError) -> Self {
        ExperimentError::Deepc(e)
    }
}

impl From<MpcError> for ExperimentError {
    fn from(e: MpcError) -> Self {
        ExperimentError::Mpc(e)
    }
}

impl From<TrafficError> for ExperimentError {
    fn from(e: TrafficError) -> Self {
        ExperimentError::Traffic(e)
    }
}

/// One cruise target of a driving-cycle profile: ramp to `v_target` (bounded
/// slope), then hold it for `cruise` seconds.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CyclePhase {
    pub v_target: f64,
    pub cruise: f64,
}

/// Head-vehicle velocity as a function of time. Evaluation outside the
/// declared span clamps to the nearest endpoint, which also covers the
/// warm-up segment before t = 0.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadProfile {
    Sinusoid {
        v_star: f64,
        amplitude: f64,
        period: f64,
    },
    Brake {
        v_high: f64,
        v_low: f64,
        a_brake: f64,
        hold: f64,
        a_recover: f64,
        /// Cruise time before the brake hits.
        t_brake: f64,
    },
    Cycle {
        phases: Vec<CyclePhase>,
        a_min: f64,
        a_max: f64,
    },
}

impl HeadProfile {
    pub fn velocity(&self, t: f64) -> f64 {
        let t = t.max(0.0);
        match self {
            HeadProfile::Sinusoid { v_star, amplitude, period } => {
                v_star + amplitude * (2.0 * std::f64::consts::PI * t / period).sin()
            }
            HeadProfile::Brake { v_high, v_low, a_brake, hold, a_recover, t_brake } => {
                let t_ramp = (v_high - v_low) / a_brake.abs();
                let t_rec = (v_high - v_low) / a_recover;
                if t < *t_brake {
                    *v_high
                } else if t < t_brake + t_ramp {
                    v_high - a_brake.abs() * (t - t_brake)
                } else if t < t_brake + t_ramp + hold {
                    *v_low
                } else if t < t_brake + t_ramp + hold + t_rec {
                    v_low + a_recover * (t - t_brake - t_ramp - hold)
                } else {
                    *v_high
                }
            }
            HeadProfile::Cycle { phases, a_min, a_max } => {
                let mut v_from = phases[0].v_target;
                let mut clock = 0.0;
                for phase in phases {
                    let dv = phase.v_target - v_from;
                    let slope = if dv >= 0.0 { *a_max } else { *a_min };
                    let t_ramp = if dv == 0.0 { 0.0 } else { dv / slope };
                    if t < clock + t_ramp {
                        return v_from + slope * (t - clock);
                    }
                    clock += t_ramp;
                    if t < clock + phase.cruise {
                        return phase.v_target;
                    }
                    clock += phase.cruise;
                    v_from = phase.v_target;
                }
                v_from
            }
        }
    }

    /// Velocity the scenario idles at before t = 0; doubles as the metric
    /// reference.
    pub fn base_velocity(&self) -> f64 {
        match self {
            HeadProfile::Sinusoid { v_star, .. } => *v_star,
            HeadProfile::Brake { v_high, .. } => *v_high,
            HeadProfile::Cycle { phases, .. } => phases[0].v_target,
        }
    }
}

/// How the controllers pick the operating point they regulate around.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum EquilibriumPolicy {
    Fixed { v_star: f64 },
    /// Re-estimate each step from the buffered head velocities.
    RollingMean,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub head_profile: HeadProfile,
    pub duration: f64,
    pub noise_seed: u64,
    pub equilibrium_policy: EquilibriumPolicy,
}

impl ScenarioSpec {
    /// Checks the profile stays drivable: inside `[0, v_max]` over the whole
    /// span, with a positive duration.
    pub fn validate(&self, v_max: f64) -> Result<(), ExperimentError> {
        if !(self.duration > 0.0) {
            return Err(ExperimentError::Scenario("duration must be positive".into()));
        }
        let check = |v: f64, what: &str| {
            if v < 0.0 || v > v_max {
                Err(ExperimentError::Scenario(format!(
                    "{what} {v} m/s leaves the drivable range [0, {v_max}]"
                )))
            } else {
                Ok(())
            }
        };
        match &self.head_profile {
            HeadProfile::Sinusoid { v_star, amplitude, period } => {
                if !(*period > 0.0) {
                    return Err(ExperimentError::Scenario("period must be positive".into()));
                }
                check(v_star - amplitude, "trough velocity")?;
                check(v_star + amplitude, "crest velocity")
            }
            HeadProfile::Brake { v_high, v_low, .. } => {
                check(*v_high, "cruise velocity")?;
                check(*v_low, "braked velocity")
            }
            HeadProfile::Cycle { phases, .. } => {
                for p in phases {
                    check(p.v_target, "cycle target")?;
                }
                Ok(())
            }
        }
    }
}

/// Sinusoidal head-vehicle perturbation around a cruise velocity.
pub fn scenario_sinusoid(
    amplitude: f64,
    period: f64,
    v_star: f64,
    duration: f64,
) -> Result<ScenarioSpec, ExperimentError> {
    if !(amplitude < v_star) {
        return Err(ExperimentError::Scenario(format!(
            "amplitude {amplitude} must stay below the cruise velocity {v_star}"
        )));
    }
    Ok(ScenarioSpec {
        name: "sinusoid".into(),
        head_profile: HeadProfile::Sinusoid { v_star, amplitude, period },
        duration,
        noise_seed: 0,
        equilibrium_policy: EquilibriumPolicy::Fixed { v_star },
    })
}

pub fn default_sinusoid() -> ScenarioSpec {
    scenario_sinusoid(3.0, 10.0, 15.0, 40.0).expect("defaults are valid")
}

/// Emergency braking: cruise, full deceleration to a crawl, hold, recover.
/// The duration leaves an 11-second settling cruise after recovery.
pub fn scenario_brake(
    v_high: f64,
    v_low: f64,
    a_brake: f64,
    hold: f64,
    a_recover: f64,
) -> Result<ScenarioSpec, ExperimentError> {
    if !(v_low < v_high) {
        return Err(ExperimentError::Scenario(format!(
            "need v_low < v_high, got {v_low} and {v_high}"
        )));
    }
    if !(a_brake < 0.0) || !(a_recover > 0.0) {
        return Err(ExperimentError::Scenario(
            "braking needs a_brake < 0 and a_recover > 0".into(),
        ));
    }
    let t_brake = 2.0;
    let t_ramp = (v_high - v_low) / a_brake.abs();
    let t_rec = (v_high - v_low) / a_recover;
    Ok(ScenarioSpec {
        name: "brake".into(),
        head_profile: HeadProfile::Brake { v_high, v_low, a_brake, hold, a_recover, t_brake },
        duration: t_brake + t_ramp + hold + t_rec + 11.0,
        noise_seed: 0,
        equilibrium_policy: EquilibriumPolicy::RollingMean,
    })
}

pub fn default_brake() -> ScenarioSpec {
    scenario_brake(15.0, 5.0, -5.0, 5.0, 2.0).expect("defaults are valid")
}

/// Piecewise cruise targets joined by constant-acceleration ramps.
pub fn scenario_cycle(
    phases: &[CyclePhase],
    limits: &AccelLimits,
) -> Result<ScenarioSpec, ExperimentError> {
    if phases.is_empty() {
        return Err(ExperimentError::Scenario("cycle needs at least one phase".into()));
    }
    let mut duration = phases[0].cruise;
    let mut v_from = phases[0].v_target;
    for phase in &phases[1..] {
        let dv = phase.v_target - v_from;
        if dv > 0.0 && limits.a_max <= 0.0 {
            return Err(ExperimentError::Scenario(format!(
                "cannot ramp up to {} with a_max = {}",
                phase.v_target, limits.a_max
            )));
        }
        if dv < 0.0 && limits.a_min >= 0.0 {
            return Err(ExperimentError::Scenario(format!(
                "cannot ramp down to {} with a_min = {}",
                phase.v_target, limits.a_min
            )));
        }
        let slope = if dv >= 0.0 { limits.a_max } else { limits.a_min };
        duration += if dv == 0.0 { 0.0 } else { dv / slope } + phase.cruise;
        v_from = phase.v_target;
    }
    Ok(ScenarioSpec {
        name: "cycle".into(),
        head_profile: HeadProfile::Cycle {
            phases: phases.to_vec(),
            a_min: limits.a_min,
            a_max: limits.a_max,
        },
        duration,
        noise_seed: 0,
        equilibrium_policy: EquilibriumPolicy::RollingMean,
    })
}

/// An urban-flavored stop-and-go phase list for the cycle profile. Purely a
/// reconstruction for experimentation, not a standardized drive cycle.
pub fn urban_cycle_phases() -> Vec<CyclePhase> {
    vec![
        CyclePhase { v_target: 15.0, cruise: 6.0 },
        CyclePhase { v_target: 9.0, cruise: 8.0 },
        CyclePhase { v_target: 13.0, cruise: 6.0 },
        CyclePhase { v_target: 6.0, cruise: 8.0 },
        CyclePhase { v_target: 15.0, cruise: 10.0 },
    ]
}

/// Six distinct driver parameter sets for the human-driven slots of the
/// standard eight-vehicle layout — a reproducible heterogeneous fleet.
pub fn heterogeneous_drivers() -> Vec<HdvParams> {
    [
        (0.45, 0.60, 38.0),
        (0.75, 0.95, 31.0),
        (0.70, 0.95, 33.0),
        (0.50, 0.75, 37.0),
        (0.40, 0.80, 39.0),
        (0.80, 1.00, 34.0),
    ]
    .iter()
    .map(|&(alpha, beta, s_go)| HdvParams { alpha, beta, s_st: 5.0, s_go, v_max: 30.0 })
    .collect()
}

/// Who controls the automated slots during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerArm {
    /// Every vehicle human-driven; the baseline traffic behaves as if no
    /// automation were present.
    AllHdv,
    Deepc,
    Mpc,
}

impl fmt::Display for ControllerArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ControllerArm::AllHdv => "all-hdv",
            ControllerArm::Deepc => "deepc",
            ControllerArm::Mpc => "mpc",
        };
        f.write_str(s)
    }
}

/// Instantaneous fuel consumption (mL/s) of one vehicle.
pub fn fuel_rate(v: f64, a: f64) -> f64 {
    let r = 0.333 + 0.00108 * v * v + 1.2 * a;
    if r <= 0.0 {
        0.444
    } else {
        0.444 + 0.090 * r * v + if a > 0.0 { 0.054 * a * a * v } else { 0.0 }
    }
}

/// Per-step trajectory record of one run. Row `k` holds the state measured
/// at `t[k]` together with the input applied over the following interval;
/// `final_velocity` closes the last difference quotient.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub dt: f64,
    pub t: Vec<f64>,
    pub v0: Vec<f64>,
    pub spacing: Vec<Vec<f64>>,
    pub velocity: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub final_velocity: Vec<f64>,
    pub collision: bool,
}

impl RunLog {
    pub fn steps(&self) -> usize {
        self.t.len()
    }

    /// Realized acceleration of vehicle `i` (1-based) over step `k`, exact
    /// for the forward-Euler plant including its saturation.
    pub fn accel(&self, k: usize, i: usize) -> f64 {
        let v_now = self.velocity[k][i - 1];
        let v_next = if k + 1 < self.velocity.len() {
            self.velocity[k + 1][i - 1]
        } else {
            self.final_velocity[i - 1]
        };
        (v_next - v_now) / self.dt
    }
}

/// Aggregate measures of one run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunMetrics {
    /// Fuel burned per vehicle over the run (mL), vehicle `i` at `[i-1]`.
    pub total_fuel: Vec<f64>,
    /// Fuel summed over vehicles 3..n — the slots automation can influence.
    pub fuel_tail: f64,
    pub msve: f64,
    pub realized_cost: f64,
    pub min_cav_spacing: f64,
    /// Largest deviation from the reference velocity, per vehicle.
    pub peak_velocity_error: Vec<f64>,
    pub collision: bool,
    pub infeasible_steps: usize,
}

/// Mean squared velocity error of the followers against the head vehicle
/// over `[t0, tf)`.
pub fn msve(log: &RunLog, t0: f64, tf: f64) -> f64 {
    assert!(t0 < tf, "need t0 < tf");
    let n = log.velocity.first().map_or(0, |v| v.len());
    if n == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for k in 0..log.steps() {
        if log.t[k] < t0 || log.t[k] >= tf {
            continue;
        }
        for i in 0..n {
            let e = log.velocity[k][i] - log.v0[k];
            sum += e * e;
        }
    }
    log.dt * sum / (n as f64 * (tf - t0))
}

/// Folds a finished log into [`RunMetrics`]. The reference velocity is the
/// scenario's base cruise; the reference spacing is the nominal driver's
/// equilibrium at that velocity.
pub fn compute_metrics(
    log: &RunLog,
    plant: &MixedConfig,
    tuning: &DeepLccConfig,
    v_ref: f64,
    infeasible_steps: usize,
) -> Result<RunMetrics, ExperimentError> {
    let n = plant.n;
    let eq = nominal_operating_point(v_ref, plant.m)?;
    let steps = log.steps();

    let mut total_fuel = vec![0.0; n];
    let mut peak = vec![0.0f64; n];
    let mut cost = 0.0;
    let mut min_sp = f64::INFINITY;
    for k in 0..steps {
        for i in 0..n {
            let v = log.velocity[k][i];
            let a = log.accel(k, i + 1);
            total_fuel[i] += fuel_rate(v, a) * log.dt;
            peak[i] = peak[i].max((v - v_ref).abs());
            cost += tuning.w_v * (v - v_ref) * (v - v_ref);
        }
        for (j, &idx) in plant.cav_indices.iter().enumerate() {
            let s = log.spacing[k][idx - 1];
            min_sp = min_sp.min(s);
            let e = s - eq.s_star[j];
            cost += tuning.w_s * e * e;
        }
        for &u in &log.u[k] {
            cost += tuning.w_u * u * u;
        }
    }
    let fuel_tail: f64 = total_fuel.iter().skip(2).sum();
    let msve_val = if steps == 0 {
        0.0
    } else {
        msve(log, log.t[0], log.t[0] + steps as f64 * log.dt)
    };
    Ok(RunMetrics {
        total_fuel,
        fuel_tail,
        msve: msve_val,
        realized_cost: cost,
        min_cav_spacing: if min_sp.is_finite() { min_sp } else { 0.0 },
        peak_velocity_error: peak,
        collision: log.collision,
        infeasible_steps,
    })
}

pub struct ExperimentRun {
    pub log: RunLog,
    pub metrics: RunMetrics,
    pub decisions: Vec<DecisionRecord>,
}

enum ArmState {
    AllHdv,
    Deepc(Box<DeepcController>),
    Mpc(Box<MpcController>),
}

/// Runs one closed-loop scenario. The plant is the nonlinear car-following
/// model with saturated accelerations and per-step process noise; collisions
/// abort the loop, returning whatever was measured up to that point with the
/// flag set.
pub fn run_experiment(
    plant: &MixedConfig,
    scenario: &ScenarioSpec,
    arm: ControllerArm,
    tuning: &DeepLccConfig,
    dataset: Option<&TrajectoryDataset>,
    dt: f64,
    seed: u64,
) -> Result<ExperimentRun, ExperimentError> {
    let nominal = HdvParams::nominal();
    scenario.validate(nominal.v_max)?;
    let n = plant.n;
    let m = plant.m;
    let v_base = scenario.head_profile.base_velocity();
    let eq_true = Equilibrium::for_config(plant, v_base)?;
    let limits = AccelLimits::default();

    let mut arm_state = match arm {
        ControllerArm::AllHdv => ArmState::AllHdv,
        ControllerArm::Deepc => {
            let ds = dataset.ok_or(ExperimentError::MissingDataset)?;
            ArmState::Deepc(Box::new(DeepcController::from_dataset(ds, tuning.clone())?))
        }
        ControllerArm::Mpc => {
            // The benchmark predicts with the nominal driver model even when
            // the actual fleet is heterogeneous — a deliberate mismatch that
            // matches how such a controller would be deployed.
            let nominal_layout = MixedConfig::homogeneous(n, plant.cav_indices.clone(), nominal)?;
            let coeffs = linearize_platoon(&nominal_layout, v_base)?;
            let css = build_continuous_model(&nominal_layout, &coeffs)?;
            let model = discretize(&css, dt)?;
            ArmState::Mpc(Box::new(MpcController::new(MpcConfig::from_tuning(tuning, model))?))
        }
    };

    let fixed_eq = match scenario.equilibrium_policy {
        EquilibriumPolicy::Fixed { v_star } => Some(nominal_operating_point(v_star, m)?),
        EquilibriumPolicy::RollingMean => None,
    };

    let profile = |t: f64| scenario.head_profile.velocity(t.min(scenario.duration));
    let steps = (scenario.duration / dt).round() as usize;
    let warm = tuning.t_ini;

    let mut state = TrafficState {
        spacing: eq_true.s_star.clone(),
        velocity: vec![v_base; n],
        head_velocity: profile(0.0),
        collision: false,
    };
    let mut past = PastBuffer::new(tuning.t_ini);
    let mut rng = seeded_stream(seed, "plant.noise");

    let mut log = RunLog {
        dt,
        t: Vec::with_capacity(steps),
        v0: Vec::with_capacity(steps),
        spacing: Vec::with_capacity(steps),
        velocity: Vec::with_capacity(steps),
        u: Vec::with_capacity(steps),
        final_velocity: Vec::new(),
        collision: false,
    };
    let mut decisions = Vec::new();
    let mut infeasible = 0usize;

    for step in 0..warm + steps {
        let k = step as i64 - warm as i64;
        let t = k as f64 * dt;
        let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();

        let u: Vec<f64> = if k < 0 {
            vec![0.0; m]
        } else {
            match &mut arm_state {
                ArmState::AllHdv => plant
                    .cav_indices
                    .iter()
                    .map(|&idx| {
                        let s = state.spacing[idx - 1];
                        let v = state.velocity[idx - 1];
                        let v_pred = if idx == 1 {
                            state.head_velocity
                        } else {
                            state.velocity[idx - 2]
                        };
                        ovm_acceleration(s, v_pred - v, v, &nominal) + noise[idx - 1]
                    })
                    .collect(),
                ArmState::Deepc(ctrl) => {
                    let eq_now = operating_point(&fixed_eq, &past, &nominal, m);
                    let cs = ctrl.control_step(&past, &eq_now, DEFAULT_SOLVER_TOL)?;
                    decisions.push(deepc_record(t, &cs));
                    if !cs.feasible {
                        infeasible += 1;
                    }
                    cs.u
                }
                ArmState::Mpc(ctrl) => {
                    let eq_now = operating_point(&fixed_eq, &past, &nominal, m);
                    let cs = ctrl.control_step(&past, &eq_now, DEFAULT_SOLVER_TOL)?;
                    decisions.push(DecisionRecord {
                        t,
                        u: cs.u.clone(),
                        objective: cs.decision.as_ref().map_or(f64::NAN, |d| d.objective),
                        sigma_y_norm: 0.0,
                        feasible: cs.feasible,
                    });
                    if !cs.feasible {
                        infeasible += 1;
                    }
                    cs.u
                }
            }
        };

        if k >= 0 {
            log.t.push(t);
            log.v0.push(state.head_velocity);
            log.spacing.push(state.spacing.clone());
            log.velocity.push(state.velocity.clone());
            log.u.push(u.clone());
        }

        let cav_spacing: Vec<f64> =
            plant.cav_indices.iter().map(|&i| state.spacing[i - 1]).collect();
        past.push(&u, state.head_velocity, &state.velocity, &cav_spacing);

        let hdv_noise: Vec<f64> = (1..=n)
            .filter(|&i| !plant.is_cav(i))
            .map(|i| noise[i - 1])
            .collect();
        state = step_nonlinear(&state, &u, profile(t + dt), &hdv_noise, dt, plant, &limits);
        if state.collision {
            log.collision = true;
            break;
        }
    }
    log.final_velocity = state.velocity.clone();

    let metrics = compute_metrics(&log, plant, tuning, v_base, infeasible)?;
    Ok(ExperimentRun { log, metrics, decisions })
}

fn operating_point(
    fixed: &Option<Equilibrium>,
    past: &PastBuffer,
    nominal: &HdvParams,
    m: usize,
) -> Equilibrium {
    match fixed {
        Some(eq) => eq.clone(),
        None => estimate_equilibrium(&past.head_velocity_history(), nominal, m).0,
    }
}

fn deepc_record(t: f64, cs: &ControlStep) -> DecisionRecord {
    DecisionRecord {
        t,
        u: cs.u.clone(),
        objective: cs.decision.as_ref().map_or(f64::NAN, |d| d.objective),
        sigma_y_norm: cs.decision.as_ref().map_or(f64::NAN, |d| d.sigma_y.amax()),
        feasible: cs.feasible,
    }
}

/// Renders the trajectory log in the documented CSV schema:
/// `t, v0, s_1..s_n, v_1..v_n, u_1..u_m, fuel_rate_3..fuel_rate_n`.
pub fn trajectory_csv(log: &RunLog) -> String {
    let n = log.velocity.first().map_or(0, |v| v.len());
    let m = log.u.first().map_or(0, |u| u.len());
    let mut out = String::new();
    out.push('t');
    out.push_str(",v0");
    for i in 1..=n {
        out.push_str(&format!(",s_{i}"));
    }
    for i in 1..=n {
        out.push_str(&format!(",v_{i}"));
    }
    for j in 1..=m {
        out.push_str(&format!(",u_{j}"));
    }
    for i in 3..=n {
        out.push_str(&format!(",fuel_rate_{i}"));
    }
    out.push('\n');
    for k in 0..log.steps() {
        out.push_str(&format!("{}", log.t[k]));
        out.push_str(&format!(",{}", log.v0[k]));
        for s in &log.spacing[k] {
            out.push_str(&format!(",{s}"));
        }
        for v in &log.velocity[k] {
            out.push_str(&format!(",{v}"));
        }
        for u in &log.u[k] {
            out.push_str(&format!(",{u}"));
        }
        for i in 3..=n {
            let f = fuel_rate(log.velocity[k][i - 1], log.accel(k, i));
            out.push_str(&format!(",{f}"));
        }
        out.push('\n');
    }
    out
}

/// Renders the per-step decision log; shared schema across controllers.
pub fn decisions_csv(records: &[DecisionRecord], m: usize) -> String {
    let mut out = DecisionRecord::csv_header(m);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Per-arm aggregate over a seeded batch.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ArmSummary {
    pub arm: ControllerArm,
    pub mean_realized_cost: f64,
    pub std_realized_cost: f64,
    pub mean_fuel_tail: f64,
    pub std_fuel_tail: f64,
    pub mean_msve: f64,
    pub std_msve: f64,
    pub worst_min_cav_spacing: f64,
    pub collisions: usize,
    pub infeasible_steps: usize,
    /// Per-seed metrics in seed order.
    pub metrics: Vec<RunMetrics>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BatchSummary {
    pub scenario: String,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmSummary>,
}

/// Sample mean and standard deviation (n−1 denominator).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Runs every arm on every seed and aggregates. Within a seed all arms share
/// one noise stream (paired comparison); the data-driven arm gets a fresh
/// dataset per seed, collected on the true plant. Seeds fan out across up to
/// `jobs` threads; the merge order is fixed by the seed list, so the summary
/// is identical regardless of scheduling.
#[allow(clippy::too_many_arguments)]
pub fn batch(
    plant: &MixedConfig,
    scenario: &ScenarioSpec,
    arms: &[ControllerArm],
    tuning: &DeepLccConfig,
    dt: f64,
    seeds: &[u64],
    collect_len: usize,
    jobs: usize,
) -> Result<BatchSummary, ExperimentError> {
    batch_with(
        plant,
        scenario,
        arms,
        tuning,
        dt,
        seeds,
        collect_len,
        jobs,
        &|_, _, _| Ok(()),
    )
}

/// [`batch`] with a hook that sees every finished run before its trajectory
/// log is dropped — the summary only keeps metrics, so this is the one chance
/// to persist logs. The observer is called from worker threads, one run at a
/// time per thread; an `Err` aborts the whole batch.
#[allow(clippy::too_many_arguments)]
pub fn batch_with(
    plant: &MixedConfig,
    scenario: &ScenarioSpec,
    arms: &[ControllerArm],
    tuning: &DeepLccConfig,
    dt: f64,
    seeds: &[u64],
    collect_len: usize,
    jobs: usize,
    observer: &(dyn Fn(u64, ControllerArm, &ExperimentRun) -> Result<(), String> + Sync),
) -> Result<BatchSummary, ExperimentError> {
    if seeds.len() < 2 {
        return Err(ExperimentError::NeedMoreSeeds { have: seeds.len() });
    }
    let v_base = scenario.head_profile.base_velocity();
    let needs_data = arms.contains(&ControllerArm::Deepc);

    let run_seed = |seed: u64| -> Result<Vec<RunMetrics>, ExperimentError> {
        let dataset = if needs_data {
            Some(collect_offline_opts(
                plant,
                v_base,
                collect_len,
                seed,
                dt,
                &CollectOptions::default(),
            )?)
        } else {
            None
        };
        arms.iter()
            .map(|&arm| {
                let run =
                    run_experiment(plant, scenario, arm, tuning, dataset.as_ref(), dt, seed)?;
                observer(seed, arm, &run).map_err(ExperimentError::Sink)?;
                Ok(run.metrics)
            })
            .collect()
    };

    let mut slots: Vec<Option<Result<Vec<RunMetrics>, ExperimentError>>> =
        (0..seeds.len()).map(|_| None).collect();
    let jobs = jobs.clamp(1, seeds.len());
    let chunk = seeds.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        for (seed_chunk, slot_chunk) in seeds.chunks(chunk).zip(slots.chunks_mut(chunk)) {
            scope.spawn(|| {
                for (&seed, slot) in seed_chunk.iter().zip(slot_chunk.iter_mut()) {
                    *slot = Some(run_seed(seed));
                }
            });
        }
    });

    let mut per_seed = Vec::with_capacity(seeds.len());
    for slot in slots {
        per_seed.push(slot.expect("every seed slot is written")?);
    }

    let arms_out = arms
        .iter()
        .enumerate()
        .map(|(a, &arm)| {
            let metrics: Vec<RunMetrics> =
                per_seed.iter().map(|row| row[a].clone()).collect();
            let costs: Vec<f64> = metrics.iter().map(|m| m.realized_cost).collect();
            let fuels: Vec<f64> = metrics.iter().map(|m| m.fuel_tail).collect();
            let msves: Vec<f64> = metrics.iter().map(|m| m.msve).collect();
            let (mean_realized_cost, std_realized_cost) = mean_std(&costs);
            let (mean_fuel_tail, std_fuel_tail) = mean_std(&fuels);
            let (mean_msve, std_msve) = mean_std(&msves);
            ArmSummary {
                arm,
                mean_realized_cost,
                std_realized_cost,
                mean_fuel_tail,
                std_fuel_tail,
                mean_msve,
                std_msve,
                worst_min_cav_spacing: metrics
                    .iter()
                    .map(|m| m.min_cav_spacing)
                    .fold(f64::INFINITY, f64::min),
                collisions: metrics.iter().filter(|m| m.collision).count(),
                infeasible_steps: metrics.iter().map(|m| m.infeasible_steps).sum(),
                metrics,
            }
        })
        .collect();

    Ok(BatchSummary {
        scenario: scenario.name.clone(),
        seeds: seeds.to_vec(),
        arms: arms_out,
    })
}
