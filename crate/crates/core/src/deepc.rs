//! Data-driven predictive control of the mixed platoon.
//!
//! The controller never identifies a model. It holds the six Hankel blocks of
//! one pre-collected trajectory and, every step, solves for a column
//! combination `g` that (i) reproduces the buffered past window, (ii) keeps
//! the head-vehicle forecast at a fixed value (zero by default), and (iii)
//! minimizes the weighted output/input cost over the prediction horizon
//! plus regularization `lambda_g |g|^2 + lambda_y |sigma_y|^2`, where
//! `sigma_y` relaxes only the past-output consistency rows. Spacing and
//! acceleration limits enter as two-sided inequalities on the predicted
//! future. The first planned input block is applied; the rest is discarded
//! and the horizon recedes.
//!
//! Everything static — cost, equality structure, inequality rows — is
//! factorized once at construction through [`PreparedQp`]; a step only
//! refreshes the right-hand sides. The online buffer stores *raw*
//! measurements and is converted to deviations against whatever equilibrium
//! the caller currently believes in, so a drifting operating point re-bases
//! the past window without touching the Hankel data.

use nalgebra::{DMatrix, DVector};
use std::collections::VecDeque;
use std::fmt;

use crate::data::{build_hankel_set, DataError, HankelSet, TrajectoryDataset};
use crate::qp::{PreparedQp, QpError, QpStatus, QuadProgram};
use crate::traffic::{solve_equilibrium_spacing, Equilibrium, HdvParams, TrafficError};

/// KKT tolerance used when the caller has no reason to pick another.
pub const DEFAULT_SOLVER_TOL: f64 = 1e-6;

/// Active-set iteration cap per solve.
pub const MAX_SOLVER_ITERS: usize = 200;

#[derive(Debug)]
pub enum DeepcError {
    Config(String),
    /// The collected excitation signal fails the persistence check at the
    /// order the behavioral representation needs. Controller construction
    /// refuses such data outright.
    NotPersistentlyExciting,
    BufferNotWarm { have: usize, need: usize },
    Dimension { what: &'static str, expected: usize, got: usize },
    Data(DataError),
    Qp(QpError),
    Traffic(TrafficError),
}

impl fmt::Display for DeepcError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeepcError::Config(msg) => write!(f, "bad controller config: {msg}"),
            DeepcError::NotPersistentlyExciting => {
                write!(f, "excitation data not persistently exciting at the required order")
            }
            DeepcError::BufferNotWarm { have, need } => {
                write!(f, "past buffer holds {have} samples, controller needs {need}")
            }
            DeepcError::Dimension { what, expected, got } => {
                write!(f, "{what}: expected {expected}, got {got}")
            }
            DeepcError::Data(e) => write!(f, "{e}"),
            DeepcError::Qp(e) => write!(f, "{e}"),
            DeepcError::Traffic(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for DeepcError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DeepcError::Data(e) => Some(e),
            DeepcError::Qp(e) => Some(e),
            DeepcError::Traffic(e) => Some(e),
            _ => None,
        }
    }
}

impl From<DataError> for DeepcError {
    fn from(e: DataError) -> Self {
        DeepcError::Data(e)
    }
}

impl From<QpError> for DeepcError {
    fn from(e: QpError) -> Self {
        DeepcError::Qp(e)
    }
}

impl From<TrafficError> for DeepcError {
    fn from(e: TrafficError) -> Self {
        DeepcError::Traffic(e)
    }
}

/// Horizon lengths, cost weights, regularization, and hard limits.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DeepLccConfig {
    /// Past-window length (steps).
    pub t_ini: usize,
    /// Prediction-horizon length (steps).
    pub horizon: usize,
    /// Weight on each velocity-error output.
    pub w_v: f64,
    /// Weight on each CAV spacing-error output.
    pub w_s: f64,
    /// Weight on each CAV acceleration input.
    pub w_u: f64,
    pub lambda_g: f64,
    pub lambda_y: f64,
    /// Absolute CAV spacing window (m).
    pub s_min: f64,
    pub s_max: f64,
    /// CAV acceleration window (m/s^2).
    pub a_min: f64,
    pub a_max: f64,
    /// Assumed future head-vehicle velocity error (m/s); zero reflects that
    /// the future disturbance is unknown.
    pub eps_forecast: f64,
}

impl Default for DeepLccConfig {
    fn default() -> Self {
        DeepLccConfig {
            t_ini: 20,
            horizon: 50,
            w_v: 1.0,
            w_s: 0.5,
            w_u: 0.1,
            lambda_g: 10.0,
            lambda_y: 1e4,
            s_min: 5.0,
            s_max: 40.0,
            a_min: -5.0,
            a_max: 2.0,
            eps_forecast: 0.0,
        }
    }
}

impl DeepLccConfig {
    pub fn validate(&self) -> Result<(), DeepcError> {
        if self.t_ini == 0 || self.horizon == 0 {
            return Err(DeepcError::Config("horizons must be positive".into()));
        }
        if self.w_v < 0.0 || self.w_s < 0.0 || self.w_u < 0.0 || self.lambda_g < 0.0 {
            return Err(DeepcError::Config("weights must be nonnegative".into()));
        }
        if !(self.lambda_y > 0.0) {
            return Err(DeepcError::Config("lambda_y must be positive".into()));
        }
        if !(self.s_min < self.s_max) {
            return Err(DeepcError::Config("need s_min < s_max".into()));
        }
        if !(self.a_min < self.a_max) {
            return Err(DeepcError::Config("need a_min < a_max".into()));
        }
        Ok(())
    }

    /// Whether the past window is shorter than twice the state dimension —
    /// the uniqueness argument for the reconstructed initial condition then
    /// no longer applies. Worth a warning, not a refusal.
    pub fn short_past(&self, n: usize) -> bool {
        self.t_ini < 2 * n
    }
}

/// Ring buffer of the last `t_ini` raw measurements.
///
/// Raw means pre-deviation: absolute CAV inputs, the head velocity itself,
/// absolute follower velocities and CAV spacings. Deviations are formed at
/// read time against a caller-supplied equilibrium, whose `s_star` holds one
/// spacing per CAV.
#[derive(Debug, Clone, PartialEq)]
pub struct PastBuffer {
    capacity: usize,
    u: VecDeque<Vec<f64>>,
    v0: VecDeque<f64>,
    velocity: VecDeque<Vec<f64>>,
    cav_spacing: VecDeque<Vec<f64>>,
}

impl PastBuffer {
    pub fn new(t_ini: usize) -> Self {
        PastBuffer {
            capacity: t_ini,
            u: VecDeque::with_capacity(t_ini + 1),
            v0: VecDeque::with_capacity(t_ini + 1),
            velocity: VecDeque::with_capacity(t_ini + 1),
            cav_spacing: VecDeque::with_capacity(t_ini + 1),
        }
    }

    /// Appends one measurement, dropping the oldest once full.
    pub fn push(&mut self, u: &[f64], v0: f64, velocity: &[f64], cav_spacing: &[f64]) {
        self.u.push_back(u.to_vec());
        self.v0.push_back(v0);
        self.velocity.push_back(velocity.to_vec());
        self.cav_spacing.push_back(cav_spacing.to_vec());
        if self.u.len() > self.capacity {
            self.u.pop_front();
            self.v0.pop_front();
            self.velocity.pop_front();
            self.cav_spacing.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn is_warm(&self) -> bool {
        self.u.len() == self.capacity
    }

    /// Buffered inputs, oldest first, flattened step-major. Equilibrium CAV
    /// input is zero acceleration, so raw inputs are already deviations.
    pub fn u_ini(&self) -> Vec<f64> {
        self.u.iter().flatten().copied().collect()
    }

    /// Head-vehicle velocity errors around `v_star`, oldest first.
    pub fn eps_ini(&self, v_star: f64) -> Vec<f64> {
        self.v0.iter().map(|v| v - v_star).collect()
    }

    /// Output deviations, oldest first: per step the follower velocity
    /// errors, then the CAV spacing errors against `eq.s_star`.
    pub fn y_ini(&self, eq: &Equilibrium) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * (self.width_y()));
        for (vel, sp) in self.velocity.iter().zip(self.cav_spacing.iter()) {
            out.extend(vel.iter().map(|v| v - eq.v_star));
            out.extend(sp.iter().zip(eq.s_star.iter()).map(|(s, s_eq)| s - s_eq));
        }
        out
    }

    /// Raw head velocities, oldest first — the input to equilibrium
    /// estimation.
    pub fn head_velocity_history(&self) -> Vec<f64> {
        self.v0.iter().copied().collect()
    }

    fn width_y(&self) -> usize {
        self.velocity.front().map_or(0, |v| v.len())
            + self.cav_spacing.front().map_or(0, |s| s.len())
    }
}

/// Operating point with all CAV spacings at the nominal driver's equilibrium
/// for `v_star`; the representation consumed by the controller (`s_star` has
/// one entry per CAV).
pub fn nominal_operating_point(v_star: f64, m: usize) -> Result<Equilibrium, TrafficError> {
    let s = solve_equilibrium_spacing(v_star, &HdvParams::nominal())?;
    Ok(Equilibrium { v_star, s_star: vec![s; m] })
}

/// Equilibrium estimate from recent head-vehicle velocities: `v*` is the
/// arithmetic mean, clamped into `[0.05, 0.95] * v_max` when it falls outside
/// the drivable range `(0, v_max)`; the flag reports that a clamp happened.
/// CAV spacings come from the nominal driver's closed form.
pub fn estimate_equilibrium(
    history: &[f64],
    nominal: &HdvParams,
    m: usize,
) -> (Equilibrium, bool) {
    assert!(!history.is_empty(), "need at least one velocity sample");
    let mean = history.iter().sum::<f64>() / history.len() as f64;
    let (v_star, clamped) = if mean <= 0.0 {
        (0.05 * nominal.v_max, true)
    } else if mean >= nominal.v_max {
        (0.95 * nominal.v_max, true)
    } else {
        (mean, false)
    };
    let s = solve_equilibrium_spacing(v_star, nominal)
        .expect("clamped velocity is strictly inside (0, v_max)");
    (Equilibrium { v_star, s_star: vec![s; m] }, clamped)
}

/// One solved receding-horizon problem.
#[derive(Debug, Clone)]
pub struct DeepcDecision {
    /// Planned inputs, one row per horizon step.
    pub u_star: DMatrix<f64>,
    /// Predicted outputs, one row per horizon step.
    pub y_star: DMatrix<f64>,
    /// Hankel combination vector.
    pub g_star: DVector<f64>,
    /// Slack on the past-output consistency rows.
    pub sigma_y: DVector<f64>,
    pub objective: f64,
}

/// Outcome of one control step: the input to apply now, the full decision
/// when the solve succeeded, and whether the fallback policy fired instead.
#[derive(Debug, Clone)]
pub struct ControlStep {
    pub u: Vec<f64>,
    pub decision: Option<DeepcDecision>,
    pub feasible: bool,
}

/// One CSV row of the per-step decision log shared by both controllers.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionRecord {
    pub t: f64,
    pub u: Vec<f64>,
    pub objective: f64,
    /// Largest slack magnitude; zero for the model-based controller, which
    /// has no slack.
    pub sigma_y_norm: f64,
    pub feasible: bool,
}

impl DecisionRecord {
    pub fn csv_header(m: usize) -> String {
        let mut cols = vec!["t".to_string()];
        cols.extend((1..=m).map(|j| format!("u_{j}")));
        cols.extend(["objective".into(), "sigma_y_norm".into(), "feasible".into()]);
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![format!("{}", self.t)];
        cols.extend(self.u.iter().map(|v| format!("{v}")));
        cols.push(format!("{}", self.objective));
        cols.push(format!("{}", self.sigma_y_norm));
        cols.push(format!("{}", u8::from(self.feasible)));
        cols.join(",")
    }
}

/// Fallback when the step problem cannot be solved: decay the previously
/// applied input and keep it inside the actuation window.
pub(crate) fn fallback_input(u_prev: &[f64], a_min: f64, a_max: f64) -> Vec<f64> {
    u_prev.iter().map(|u| (0.5 * u).clamp(a_min, a_max)).collect()
}

struct QpBlocks {
    p: DMatrix<f64>,
    aeq: DMatrix<f64>,
    aineq: DMatrix<f64>,
}

fn dims_from_hankel(h: &HankelSet) -> Result<(usize, usize), DeepcError> {
    if h.t_ini == 0 || h.horizon == 0 {
        return Err(DeepcError::Config("hankel blocks have empty windows".into()));
    }
    let m = h.up.nrows() / h.t_ini;
    let ny = h.yp.nrows() / h.t_ini;
    if m == 0 || ny <= m {
        return Err(DeepcError::Dimension {
            what: "hankel output width",
            expected: m + 1,
            got: ny,
        });
    }
    Ok((ny - m, m))
}

/// Cost, equality, and inequality matrices; everything independent of the
/// measured past.
fn build_blocks(h: &HankelSet, cfg: &DeepLccConfig) -> Result<QpBlocks, DeepcError> {
    let (n, m) = dims_from_hankel(h)?;
    let ny = n + m;
    let cols = h.cols;
    let n_sigma = cfg.t_ini * ny;
    let d = cols + n_sigma;

    // Output rows cycle velocity weights then spacing weights per step.
    let out_weight = |row: usize| if row % ny < n { cfg.w_v } else { cfg.w_s };
    let mut qyf = h.yf.clone();
    for r in 0..qyf.nrows() {
        let w = out_weight(r);
        for c in 0..cols {
            qyf[(r, c)] *= w;
        }
    }
    let mut hg = h.yf.tr_mul(&qyf) + h.uf.tr_mul(&h.uf) * cfg.w_u;
    for i in 0..cols {
        hg[(i, i)] += cfg.lambda_g;
    }
    let mut p = DMatrix::zeros(d, d);
    p.view_mut((0, 0), (cols, cols)).copy_from(&hg);
    for i in cols..d {
        p[(i, i)] = cfg.lambda_y;
    }

    // Equalities: past-input, past-disturbance, past-output (relaxed by the
    // slack), and the future-disturbance pin.
    let (ru, re, ry, rf) = (cfg.t_ini * m, cfg.t_ini, n_sigma, cfg.horizon);
    let mut aeq = DMatrix::zeros(ru + re + ry + rf, d);
    aeq.view_mut((0, 0), (ru, cols)).copy_from(&h.up);
    aeq.view_mut((ru, 0), (re, cols)).copy_from(&h.ep);
    aeq.view_mut((ru + re, 0), (ry, cols)).copy_from(&h.yp);
    for i in 0..n_sigma {
        aeq[(ru + re + i, cols + i)] = -1.0;
    }
    aeq.view_mut((ru + re + ry, 0), (rf, cols)).copy_from(&h.ef);

    // Inequalities: predicted CAV spacing errors, then planned inputs.
    let n_sp = cfg.horizon * m;
    let mut aineq = DMatrix::zeros(2 * n_sp, d);
    for k in 0..cfg.horizon {
        for j in 0..m {
            let yf_row = k * ny + n + j;
            for c in 0..cols {
                aineq[(k * m + j, c)] = h.yf[(yf_row, c)];
            }
        }
    }
    aineq
        .view_mut((n_sp, 0), (n_sp, cols))
        .copy_from(&h.uf);

    Ok(QpBlocks { p, aeq, aineq })
}

fn build_beq(
    h: &HankelSet,
    past: &PastBuffer,
    cfg: &DeepLccConfig,
    eq: &Equilibrium,
) -> Result<DVector<f64>, DeepcError> {
    let (n, m) = dims_from_hankel(h)?;
    if !past.is_warm() || past.len() != cfg.t_ini {
        return Err(DeepcError::BufferNotWarm { have: past.len(), need: cfg.t_ini });
    }
    if eq.s_star.len() != m {
        return Err(DeepcError::Dimension {
            what: "equilibrium CAV spacings",
            expected: m,
            got: eq.s_star.len(),
        });
    }
    let u_ini = past.u_ini();
    let eps_ini = past.eps_ini(eq.v_star);
    let y_ini = past.y_ini(eq);
    if y_ini.len() != cfg.t_ini * (n + m) {
        return Err(DeepcError::Dimension {
            what: "buffered outputs",
            expected: cfg.t_ini * (n + m),
            got: y_ini.len(),
        });
    }

    let mut beq = Vec::with_capacity(u_ini.len() + eps_ini.len() + y_ini.len() + cfg.horizon);
    beq.extend_from_slice(&u_ini);
    beq.extend_from_slice(&eps_ini);
    beq.extend_from_slice(&y_ini);
    beq.extend(std::iter::repeat_n(cfg.eps_forecast, cfg.horizon));
    Ok(DVector::from_vec(beq))
}

fn build_bounds(
    m: usize,
    cfg: &DeepLccConfig,
    eq: &Equilibrium,
) -> (DVector<f64>, DVector<f64>) {
    let n_sp = cfg.horizon * m;
    let mut lower = DVector::zeros(2 * n_sp);
    let mut upper = DVector::zeros(2 * n_sp);
    for k in 0..cfg.horizon {
        for j in 0..m {
            lower[k * m + j] = cfg.s_min - eq.s_star[j];
            upper[k * m + j] = cfg.s_max - eq.s_star[j];
        }
    }
    for i in 0..n_sp {
        lower[n_sp + i] = cfg.a_min;
        upper[n_sp + i] = cfg.a_max;
    }
    (lower, upper)
}

/// Assembles the full step problem as a standalone [`QuadProgram`] — the
/// one-shot form of what the controller keeps factorized.
pub fn assemble_qp(
    h: &HankelSet,
    past: &PastBuffer,
    cfg: &DeepLccConfig,
    eq: &Equilibrium,
) -> Result<QuadProgram, DeepcError> {
    cfg.validate()?;
    if h.t_ini != cfg.t_ini || h.horizon != cfg.horizon {
        return Err(DeepcError::Config(format!(
            "hankel windows ({}, {}) disagree with config ({}, {})",
            h.t_ini, h.horizon, cfg.t_ini, cfg.horizon
        )));
    }
    if !h.pe_satisfied {
        return Err(DeepcError::NotPersistentlyExciting);
    }
    let (_, m) = dims_from_hankel(h)?;
    let blocks = build_blocks(h, cfg)?;
    let beq = build_beq(h, past, cfg, eq)?;
    let (lower, upper) = build_bounds(m, cfg, eq);
    let d = blocks.p.nrows();
    Ok(QuadProgram {
        p: blocks.p,
        q: DVector::zeros(d),
        aeq: blocks.aeq,
        beq,
        aineq: blocks.aineq,
        lower,
        upper,
    })
}

/// The receding-horizon controller. One instance per platoon; strictly
/// sequential because the fallback path depends on the previously applied
/// input.
pub struct DeepcController {
    cfg: DeepLccConfig,
    n: usize,
    m: usize,
    uf: DMatrix<f64>,
    yf: DMatrix<f64>,
    cols: usize,
    prepared: PreparedQp,
    u_prev: Vec<f64>,
    infeasible_steps: usize,
    short_past: bool,
}

impl DeepcController {
    /// Builds the controller from prepared Hankel blocks. Fails hard when
    /// the excitation was not persistent — a silent fit to deficient data is
    /// worse than no controller.
    pub fn new(h: &HankelSet, cfg: DeepLccConfig) -> Result<Self, DeepcError> {
        cfg.validate()?;
        if h.t_ini != cfg.t_ini || h.horizon != cfg.horizon {
            return Err(DeepcError::Config(format!(
                "hankel windows ({}, {}) disagree with config ({}, {})",
                h.t_ini, h.horizon, cfg.t_ini, cfg.horizon
            )));
        }
        if !h.pe_satisfied {
            return Err(DeepcError::NotPersistentlyExciting);
        }
        let (n, m) = dims_from_hankel(h)?;
        let blocks = build_blocks(h, &cfg)?;
        let prepared = PreparedQp::new(blocks.p, blocks.aeq, blocks.aineq)?;
        Ok(DeepcController {
            short_past: cfg.short_past(n),
            cfg,
            n,
            m,
            uf: h.uf.clone(),
            yf: h.yf.clone(),
            cols: h.cols,
            prepared,
            u_prev: vec![0.0; m],
            infeasible_steps: 0,
        })
    }

    /// Convenience path from a stored dataset.
    pub fn from_dataset(ds: &TrajectoryDataset, cfg: DeepLccConfig) -> Result<Self, DeepcError> {
        let h = build_hankel_set(ds, cfg.t_ini, cfg.horizon)?;
        Self::new(&h, cfg)
    }

    pub fn config(&self) -> &DeepLccConfig {
        &self.cfg
    }

    pub fn input_count(&self) -> usize {
        self.m
    }

    /// True when `t_ini < 2n`; see [`DeepLccConfig::short_past`].
    pub fn short_past(&self) -> bool {
        self.short_past
    }

    /// Steps on which the fallback policy replaced the solver output.
    pub fn infeasible_steps(&self) -> usize {
        self.infeasible_steps
    }

    /// Solves one receding-horizon problem and returns the input to apply.
    /// On any solver failure the decayed previous input is applied instead
    /// and the step is flagged.
    pub fn control_step(
        &mut self,
        past: &PastBuffer,
        eq: &Equilibrium,
        tol: f64,
    ) -> Result<ControlStep, DeepcError> {
        let beq = build_beq_for(self, past, eq)?;
        let (lower, upper) = build_bounds(self.m, &self.cfg, eq);
        let q = DVector::zeros(self.cols + self.cfg.t_ini * (self.n + self.m));
        let sol = self.prepared.solve(&beq, &q, &lower, &upper, tol, MAX_SOLVER_ITERS)?;

        if sol.status != QpStatus::Optimal {
            self.infeasible_steps += 1;
            let u = fallback_input(&self.u_prev, self.cfg.a_min, self.cfg.a_max);
            self.u_prev = u.clone();
            return Ok(ControlStep { u, decision: None, feasible: false });
        }

        let g = sol.x.rows(0, self.cols).into_owned();
        let sigma_y = sol.x.rows(self.cols, sol.x.len() - self.cols).into_owned();
        let u_flat = &self.uf * &g;
        let y_flat = &self.yf * &g;
        let ny = self.n + self.m;
        let horizon = self.cfg.horizon;
        let m = self.m;
        let u_star = DMatrix::from_fn(horizon, m, |k, j| u_flat[k * m + j]);
        let y_star = DMatrix::from_fn(horizon, ny, |k, j| y_flat[k * ny + j]);

        let u: Vec<f64> = (0..m)
            .map(|j| u_star[(0, j)].clamp(self.cfg.a_min, self.cfg.a_max))
            .collect();
        self.u_prev = u.clone();
        Ok(ControlStep {
            u,
            decision: Some(DeepcDecision {
                u_star,
                y_star,
                g_star: g,
                sigma_y,
                objective: sol.objective,
            }),
            feasible: true,
        })
    }
}

fn build_beq_for(
    ctrl: &DeepcController,
    past: &PastBuffer,
    eq: &Equilibrium,
) -> Result<DVector<f64>, DeepcError> {
    if !past.is_warm() || past.len() != ctrl.cfg.t_ini {
        return Err(DeepcError::BufferNotWarm { have: past.len(), need: ctrl.cfg.t_ini });
    }
    if eq.s_star.len() != ctrl.m {
        return Err(DeepcError::Dimension {
            what: "equilibrium CAV spacings",
            expected: ctrl.m,
            got: eq.s_star.len(),
        });
    }
    let u_ini = past.u_ini();
    if u_ini.len() != ctrl.cfg.t_ini * ctrl.m {
        return Err(DeepcError::Dimension {
            what: "buffered inputs",
            expected: ctrl.cfg.t_ini * ctrl.m,
            got: u_ini.len(),
        });
    }
    let eps_ini = past.eps_ini(eq.v_star);
    let y_ini = past.y_ini(eq);
    if y_ini.len() != ctrl.cfg.t_ini * (ctrl.n + ctrl.m) {
        return Err(DeepcError::Dimension {
            what: "buffered outputs",
            expected: ctrl.cfg.t_ini * (ctrl.n + ctrl.m),
            got: y_ini.len(),
        });
    }
    let mut beq =
        Vec::with_capacity(u_ini.len() + eps_ini.len() + y_ini.len() + ctrl.cfg.horizon);
    beq.extend_from_slice(&u_ini);
    beq.extend_from_slice(&eps_ini);
    beq.extend_from_slice(&y_ini);
    beq.extend(std::iter::repeat_n(ctrl.cfg.eps_forecast, ctrl.cfg.horizon));
    Ok(DVector::from_vec(beq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collect_linear, collect_offline_opts, CollectOptions, DEFAULT_DT};
    use crate::traffic::MixedConfig;
    use approx::assert_abs_diff_eq;

    fn benchmark_layout() -> MixedConfig {
        MixedConfig::homogeneous(8, vec![3, 6], HdvParams::nominal()).unwrap()
    }

    fn warm_buffer_at_rest(cfg: &DeepLccConfig, n: usize, m: usize, v_star: f64) -> PastBuffer {
        let s = solve_equilibrium_spacing(v_star, &HdvParams::nominal()).unwrap();
        let mut past = PastBuffer::new(cfg.t_ini);
        for _ in 0..cfg.t_ini {
            past.push(&vec![0.0; m], v_star, &vec![v_star; n], &vec![s; m]);
        }
        past
    }

    #[test]
    fn equilibrium_estimate_examples() {
        let nominal = HdvParams::nominal();
        let (eq, clamped) = estimate_equilibrium(&[15.0; 20], &nominal, 2);
        assert!(!clamped);
        assert_abs_diff_eq!(eq.v_star, 15.0, epsilon = 1e-12);
        assert_eq!(eq.s_star.len(), 2);
        assert_abs_diff_eq!(eq.s_star[0], 20.0, epsilon = 1e-12);

        // Symmetric ramp 14..16 averages to 15 exactly.
        let ramp: Vec<f64> = (0..21).map(|k| 14.0 + 0.1 * k as f64).collect();
        let (eq, clamped) = estimate_equilibrium(&ramp, &nominal, 1);
        assert!(!clamped);
        assert_abs_diff_eq!(eq.v_star, 15.0, epsilon = 1e-12);

        let (eq, clamped) = estimate_equilibrium(&[30.0; 20], &nominal, 1);
        assert!(clamped);
        assert_abs_diff_eq!(eq.v_star, 28.5, epsilon = 1e-12);

        let (eq, clamped) = estimate_equilibrium(&[-2.0; 20], &nominal, 1);
        assert!(clamped);
        assert_abs_diff_eq!(eq.v_star, 1.5, epsilon = 1e-12);
    }

    #[test]
    fn past_buffer_ring_semantics() {
        let mut past = PastBuffer::new(4);
        assert!(!past.is_warm());
        for k in 0..7 {
            let kf = k as f64;
            past.push(&[kf], 10.0 + kf, &[kf, 2.0 * kf], &[30.0 + kf]);
        }
        assert!(past.is_warm());
        assert_eq!(past.len(), 4);
        // Pushed 0..7, so the window holds steps 3..7 in order.
        assert_eq!(past.u_ini(), vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(past.head_velocity_history(), vec![13.0, 14.0, 15.0, 16.0]);
    }

    #[test]
    fn past_buffer_rebases_against_given_equilibrium() {
        let mut past = PastBuffer::new(2);
        past.push(&[0.5], 15.5, &[15.1, 14.9], &[20.3]);
        past.push(&[-0.5], 14.5, &[15.2, 15.0], &[19.8]);

        let eq = Equilibrium { v_star: 15.0, s_star: vec![20.0] };
        let eps = past.eps_ini(eq.v_star);
        assert_abs_diff_eq!(eps[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(eps[1], -0.5, epsilon = 1e-12);
        let y = past.y_ini(&eq);
        let expected = [0.1, -0.1, 0.3, 0.2, 0.0, -0.2];
        for (a, b) in y.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }

        // Same raw data, different operating point: deviations shift.
        let eq2 = Equilibrium { v_star: 14.0, s_star: vec![19.0] };
        let y2 = past.y_ini(&eq2);
        assert_abs_diff_eq!(y2[0], 1.1, epsilon = 1e-12);
        assert_abs_diff_eq!(y2[2], 1.3, epsilon = 1e-12);
    }

    #[test]
    fn qp_assembly_dimensions_and_regularization() {
        let plant = benchmark_layout();
        let ds = collect_offline_opts(
            &plant,
            15.0,
            800,
            7,
            DEFAULT_DT,
            &CollectOptions::default(),
        )
        .unwrap();
        let h = build_hankel_set(&ds, 20, 50).unwrap();
        let cfg = DeepLccConfig::default();
        let past = warm_buffer_at_rest(&cfg, 8, 2, 15.0);
        let eq = nominal_operating_point(15.0, 2).unwrap();
        let prog = assemble_qp(&h, &past, &cfg, &eq).unwrap();

        // 731 Hankel columns plus 20 * 10 slack entries.
        assert_eq!(prog.dim(), 931);
        assert_eq!(prog.aeq.nrows(), 40 + 20 + 200 + 50);
        assert_eq!(prog.aineq.nrows(), 200);
        prog.validate().unwrap();

        // Slack block diagonal carries lambda_y exactly.
        for i in 731..931 {
            assert_eq!(prog.p[(i, i)], 1e4);
            assert_eq!(prog.q[i], 0.0);
        }
        // The g block gains exactly lambda_g on its diagonal.
        let mut cfg0 = cfg.clone();
        cfg0.lambda_g = 0.0;
        let prog0 = assemble_qp(&h, &past, &cfg0, &eq).unwrap();
        for i in 0..731 {
            assert_abs_diff_eq!(prog.p[(i, i)] - prog0.p[(i, i)], 10.0, epsilon = 1e-12);
        }

        // Resting buffer: every past right-hand side is zero, the forecast
        // rows too; spacing bounds sit at +-15 around the 20 m equilibrium.
        assert!(prog.beq.iter().all(|v| v.abs() < 1e-12));
        assert_abs_diff_eq!(prog.lower[0], 5.0 - 20.0, epsilon = 1e-12);
        assert_abs_diff_eq!(prog.upper[0], 40.0 - 20.0, epsilon = 1e-12);
        assert_eq!(prog.lower[100], -5.0);
        assert_eq!(prog.upper[100], 2.0);
    }

    #[test]
    fn resting_controller_stays_quiet() {
        let plant = benchmark_layout();
        let ds = collect_linear(&plant, 15.0, DEFAULT_DT, 800, 21, &CollectOptions::default())
            .unwrap();
        let cfg = DeepLccConfig::default();
        let mut ctrl = DeepcController::from_dataset(&ds, cfg.clone()).unwrap();
        assert!(!ctrl.short_past());

        let past = warm_buffer_at_rest(&cfg, 8, 2, 15.0);
        let eq = nominal_operating_point(15.0, 2).unwrap();
        let step = ctrl.control_step(&past, &eq, DEFAULT_SOLVER_TOL).unwrap();
        assert!(step.feasible);
        let decision = step.decision.unwrap();
        for &u in &step.u {
            assert!(u.abs() < 1e-3, "resting input {u}");
        }
        assert!(decision.sigma_y.amax() < 1e-6, "slack should stay inactive");
        // The planned spacing path respects the hard window.
        for k in 0..50 {
            for j in 0..2 {
                let s_err = decision.y_star[(k, 8 + j)];
                assert!((5.0 - 20.0 - 1e-6..=40.0 - 20.0 + 1e-6).contains(&s_err));
            }
            for j in 0..2 {
                let u = decision.u_star[(k, j)];
                assert!((-5.0 - 1e-6..=2.0 + 1e-6).contains(&u));
            }
        }
    }

    #[test]
    fn excitation_gate_and_short_past_warning() {
        let plant = benchmark_layout();
        let dead = CollectOptions { du_amp: 0.0, deps_amp: 0.0, eps_hold: 10 };
        let ds = collect_offline_opts(&plant, 15.0, 300, 5, DEFAULT_DT, &dead).unwrap();
        let err = DeepcController::from_dataset(&ds, DeepLccConfig::default());
        assert!(matches!(err, Err(DeepcError::NotPersistentlyExciting)));

        let live = collect_offline_opts(
            &plant,
            15.0,
            800,
            5,
            DEFAULT_DT,
            &CollectOptions::default(),
        )
        .unwrap();
        let cfg = DeepLccConfig { t_ini: 10, ..DeepLccConfig::default() };
        cfg.validate().unwrap();
        let ctrl = DeepcController::from_dataset(&live, cfg).unwrap();
        assert!(ctrl.short_past(), "t_ini = 10 < 2n = 16 should warn");
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let base = DeepLccConfig::default();
        let bad = [
            DeepLccConfig { lambda_y: 0.0, ..base.clone() },
            DeepLccConfig { s_min: base.s_max, ..base.clone() },
            DeepLccConfig { horizon: 0, ..base.clone() },
            DeepLccConfig { w_u: -0.1, ..base },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn cold_buffer_is_rejected() {
        let plant = benchmark_layout();
        let ds = collect_offline_opts(
            &plant,
            15.0,
            800,
            5,
            DEFAULT_DT,
            &CollectOptions::default(),
        )
        .unwrap();
        let cfg = DeepLccConfig::default();
        let mut ctrl = DeepcController::from_dataset(&ds, cfg.clone()).unwrap();
        let mut past = PastBuffer::new(cfg.t_ini);
        past.push(&[0.0, 0.0], 15.0, &[15.0; 8], &[20.0, 20.0]);
        let eq = nominal_operating_point(15.0, 2).unwrap();
        let err = ctrl.control_step(&past, &eq, DEFAULT_SOLVER_TOL);
        assert!(matches!(err, Err(DeepcError::BufferNotWarm { have: 1, need: 20 })));
    }

    #[test]
    fn fallback_decays_and_saturates_previous_input() {
        assert_eq!(fallback_input(&[1.0, -3.0], -5.0, 2.0), vec![0.5, -1.5]);
        assert_eq!(fallback_input(&[8.0], -5.0, 2.0), vec![2.0]);
        assert_eq!(fallback_input(&[-14.0], -5.0, 2.0), vec![-5.0]);
    }

    #[test]
    fn impossible_bounds_trigger_the_fallback_path() {
        let plant = benchmark_layout();
        let ds = collect_linear(&plant, 15.0, DEFAULT_DT, 800, 33, &CollectOptions::default())
            .unwrap();
        // A 2 cm spacing corridor with microscopic actuation: the buffered
        // spacing error of 3 m cannot be brought inside, the solver stalls
        // or exhausts, and the fallback fires.
        let cfg = DeepLccConfig {
            s_min: 19.99,
            s_max: 20.01,
            a_min: -1e-6,
            a_max: 1e-6,
            ..DeepLccConfig::default()
        };
        let mut ctrl = DeepcController::from_dataset(&ds, cfg.clone()).unwrap();
        let mut past = PastBuffer::new(cfg.t_ini);
        for _ in 0..cfg.t_ini {
            past.push(&[0.0, 0.0], 15.0, &[15.0; 8], &[23.0, 23.0]);
        }
        let eq = nominal_operating_point(15.0, 2).unwrap();
        let step = ctrl.control_step(&past, &eq, DEFAULT_SOLVER_TOL).unwrap();
        assert!(!step.feasible);
        assert!(step.decision.is_none());
        assert_eq!(step.u, vec![0.0, 0.0], "fallback from a zero previous input");
        assert_eq!(ctrl.infeasible_steps(), 1);
    }

    #[test]
    fn identical_streams_give_bitwise_identical_inputs() {
        let plant = benchmark_layout();
        let ds = collect_linear(&plant, 15.0, DEFAULT_DT, 800, 55, &CollectOptions::default())
            .unwrap();
        let cfg = DeepLccConfig::default();
        let eq = nominal_operating_point(15.0, 2).unwrap();

        let run = || -> Vec<Vec<f64>> {
            let mut ctrl = DeepcController::from_dataset(&ds, cfg.clone()).unwrap();
            let mut past = warm_buffer_at_rest(&cfg, 8, 2, 15.0);
            let mut inputs = Vec::new();
            for k in 0..10 {
                let v0 = 15.0 + 0.5 * (0.3 * k as f64).sin();
                let step = ctrl.control_step(&past, &eq, DEFAULT_SOLVER_TOL).unwrap();
                // Scripted measurements: the exact plant does not matter for
                // determinism, only that both runs see the same stream.
                let vel: Vec<f64> = (0..8).map(|i| 15.0 + 0.01 * (i as f64) * v0.sin()).collect();
                past.push(&step.u, v0, &vel, &[20.0 + 0.1 * v0.cos(), 20.0]);
                inputs.push(step.u);
            }
            inputs
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn decision_record_csv_shape() {
        let rec = DecisionRecord {
            t: 1.25,
            u: vec![0.5, -0.25],
            objective: 12.0,
            sigma_y_norm: 1e-9,
            feasible: true,
        };
        assert_eq!(DecisionRecord::csv_header(2), "t,u_1,u_2,objective,sigma_y_norm,feasible");
        assert_eq!(rec.csv_row(), "1.25,0.5,-0.25,12,0.000000001,1");
    }
}
