//! Output-feedback predictive control on the true linearized model — the
//! benchmark the data-driven controller is measured against.
//!
//! The plant state is not measurable (absolute HDV spacings are unknown), so
//! each step first reconstructs it: a least-squares fit of the state at the
//! start of the buffered window through the stacked observability and input
//! Toeplitz relations, rolled forward to now. Prediction then eliminates the
//! states, leaving a box- and spacing-constrained problem in the planned
//! inputs alone. Cost weights, limits, the zero disturbance forecast, and
//! the infeasibility fallback all mirror [`crate::deepc`] so that closed-loop
//! comparisons isolate the representation, not the tuning.

use nalgebra::{DMatrix, DVector};
use std::fmt;

use crate::analysis::{numerical_rank, DEFAULT_RANK_TOL};
use crate::deepc::{fallback_input, DeepLccConfig, PastBuffer, MAX_SOLVER_ITERS};
use crate::qp::{PreparedQp, QpError, QpStatus};
use crate::traffic::{DiscreteModel, Equilibrium, TrafficError};

#[derive(Debug)]
pub enum MpcError {
    Config(String),
    BufferNotWarm { have: usize, need: usize },
    /// The observation window does not pin the state down: the stacked
    /// observability map is rank deficient.
    UnobservableWindow { rank: usize, need: usize },
    Dimension { what: &'static str, expected: usize, got: usize },
    Qp(QpError),
    Traffic(TrafficError),
}

impl fmt::Display for MpcError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MpcError::Config(msg) => write!(f, "bad controller config: {msg}"),
            MpcError::BufferNotWarm { have, need } => {
                write!(f, "past buffer holds {have} samples, controller needs {need}")
            }
            MpcError::UnobservableWindow { rank, need } => {
                write!(f, "observation window has rank {rank}, state dimension is {need}")
            }
            MpcError::Dimension { what, expected, got } => {
                write!(f, "{what}: expected {expected}, got {got}")
            }
            MpcError::Qp(e) => write!(f, "{e}"),
            MpcError::Traffic(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for MpcError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            MpcError::Qp(e) => Some(e),
            MpcError::Traffic(e) => Some(e),
            _ => None,
        }
    }
}

impl From<QpError> for MpcError {
    fn from(e: QpError) -> Self {
        MpcError::Qp(e)
    }
}

impl From<TrafficError> for MpcError {
    fn from(e: TrafficError) -> Self {
        MpcError::Traffic(e)
    }
}

/// Model-based counterpart of [`DeepLccConfig`]: identical windows, weights,
/// and limits, no regularization, plus the prediction model itself.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub t_ini: usize,
    pub horizon: usize,
    pub w_v: f64,
    pub w_s: f64,
    pub w_u: f64,
    pub s_min: f64,
    pub s_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub eps_forecast: f64,
    pub model: DiscreteModel,
}

impl MpcConfig {
    /// Shares every tuning knob with the data-driven controller.
    pub fn from_tuning(cfg: &DeepLccConfig, model: DiscreteModel) -> Self {
        MpcConfig {
            t_ini: cfg.t_ini,
            horizon: cfg.horizon,
            w_v: cfg.w_v,
            w_s: cfg.w_s,
            w_u: cfg.w_u,
            s_min: cfg.s_min,
            s_max: cfg.s_max,
            a_min: cfg.a_min,
            a_max: cfg.a_max,
            eps_forecast: cfg.eps_forecast,
            model,
        }
    }

    pub fn validate(&self) -> Result<(), MpcError> {
        if self.t_ini == 0 || self.horizon == 0 {
            return Err(MpcError::Config("horizons must be positive".into()));
        }
        if self.w_v < 0.0 || self.w_s < 0.0 || self.w_u < 0.0 {
            return Err(MpcError::Config("weights must be nonnegative".into()));
        }
        if !(self.s_min < self.s_max) {
            return Err(MpcError::Config("need s_min < s_max".into()));
        }
        if !(self.a_min < self.a_max) {
            return Err(MpcError::Config("need a_min < a_max".into()));
        }
        let nx = self.model.ad.nrows();
        if self.model.ad.ncols() != nx
            || self.model.bd.nrows() != nx
            || self.model.hd.len() != nx
            || self.model.cd.ncols() != nx
        {
            return Err(MpcError::Config("prediction model dimensions disagree".into()));
        }
        Ok(())
    }
}

/// Least-squares state reconstruction from the buffered window, rolled
/// forward to the current instant. Returns the state estimate and the
/// Euclidean fit residual (zero on noise-free model data).
pub fn estimate_initial_state(
    model: &DiscreteModel,
    past: &PastBuffer,
    eq: &Equilibrium,
) -> Result<(DVector<f64>, f64), MpcError> {
    let nx = model.ad.nrows();
    let ny = model.cd.nrows();
    let m = model.bd.ncols();
    let window = past.len();
    if window * ny < nx {
        return Err(MpcError::BufferNotWarm { have: window, need: nx.div_ceil(ny) });
    }
    if eq.s_star.len() != m {
        return Err(MpcError::Dimension {
            what: "equilibrium CAV spacings",
            expected: m,
            got: eq.s_star.len(),
        });
    }

    let u_ini = past.u_ini();
    let eps_ini = past.eps_ini(eq.v_star);
    let y_ini = past.y_ini(eq);
    if y_ini.len() != window * ny {
        return Err(MpcError::Dimension {
            what: "buffered outputs",
            expected: window * ny,
            got: y_ini.len(),
        });
    }

    // Forced response per window step, accumulated so that the observation
    // at offset i sees C * acc_i on top of C * Ad^i * x0.
    let forced: Vec<DVector<f64>> = (0..window)
        .map(|k| {
            let u_k = DVector::from_column_slice(&u_ini[k * m..(k + 1) * m]);
            &model.bd * u_k + &model.hd * eps_ini[k]
        })
        .collect();

    let mut obs = DMatrix::zeros(window * ny, nx);
    let mut rhs = DVector::zeros(window * ny);
    let mut c_pow = model.cd.clone();
    let mut acc = DVector::zeros(nx);
    for i in 0..window {
        if i > 0 {
            c_pow = &c_pow * &model.ad;
            acc = &model.ad * acc + &forced[i - 1];
        }
        obs.view_mut((i * ny, 0), (ny, nx)).copy_from(&c_pow);
        let free = &model.cd * &acc;
        for r in 0..ny {
            rhs[i * ny + r] = y_ini[i * ny + r] - free[r];
        }
    }

    let rank = numerical_rank(&obs, DEFAULT_RANK_TOL);
    if rank < nx {
        return Err(MpcError::UnobservableWindow { rank, need: nx });
    }
    let svd = nalgebra::SVD::new(obs.clone(), true, true);
    let x0 = svd
        .solve(&rhs, 1e-14)
        .map_err(|_| MpcError::Config("least-squares solve failed".into()))?;
    let residual = (&obs * &x0 - &rhs).norm();

    // Roll the window-start estimate forward through the recorded inputs.
    let mut x = x0;
    for f in &forced {
        x = &model.ad * x + f;
    }
    Ok((x, residual))
}

/// One solved prediction problem.
#[derive(Debug, Clone)]
pub struct MpcDecision {
    /// Planned inputs, one row per horizon step.
    pub u_star: DMatrix<f64>,
    /// Predicted outputs, one row per horizon step.
    pub y_star: DMatrix<f64>,
    /// Reconstructed current state.
    pub x_hat: DVector<f64>,
    /// State-reconstruction fit residual.
    pub estimate_residual: f64,
    /// Predicted cost of the planned trajectory (constant term included).
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct MpcStep {
    pub u: Vec<f64>,
    pub decision: Option<MpcDecision>,
    pub feasible: bool,
}

/// Receding-horizon controller on the explicit model. Strictly sequential,
/// like its data-driven counterpart.
pub struct MpcController {
    cfg: MpcConfig,
    n: usize,
    m: usize,
    /// Free-response map: stacked C * Ad^k, k = 0..N-1.
    on: DMatrix<f64>,
    /// Forced-response map from planned inputs, strictly block lower
    /// triangular: the first planned input cannot move the first output.
    gam: DMatrix<f64>,
    /// Output-cost diagonal, repeated per horizon step.
    qdiag: DVector<f64>,
    /// Forecast disturbance contribution to the free response.
    eps_free: DVector<f64>,
    prepared: PreparedQp,
    u_prev: Vec<f64>,
    infeasible_steps: usize,
}

impl MpcController {
    pub fn new(cfg: MpcConfig) -> Result<Self, MpcError> {
        cfg.validate()?;
        let nx = cfg.model.ad.nrows();
        let ny = cfg.model.cd.nrows();
        let m = cfg.model.bd.ncols();
        if ny <= m {
            return Err(MpcError::Dimension { what: "output width", expected: m + 1, got: ny });
        }
        let n = ny - m;
        let horizon = cfg.horizon;
        let d = horizon * m;

        let mut c_pows = Vec::with_capacity(horizon);
        c_pows.push(cfg.model.cd.clone());
        for k in 1..horizon {
            let next = &c_pows[k - 1] * &cfg.model.ad;
            c_pows.push(next);
        }
        let mut on = DMatrix::zeros(horizon * ny, nx);
        for (k, cp) in c_pows.iter().enumerate() {
            on.view_mut((k * ny, 0), (ny, nx)).copy_from(cp);
        }

        let cab: Vec<DMatrix<f64>> = c_pows.iter().map(|cp| cp * &cfg.model.bd).collect();
        let mut gam = DMatrix::zeros(horizon * ny, d);
        for k in 1..horizon {
            for j in 0..k {
                gam.view_mut((k * ny, j * m), (ny, m)).copy_from(&cab[k - 1 - j]);
            }
        }

        let mut eps_free = DVector::zeros(horizon * ny);
        if cfg.eps_forecast != 0.0 {
            let mut acc: DVector<f64> = DVector::zeros(nx);
            for k in 0..horizon {
                if k > 0 {
                    acc = &cfg.model.ad * acc + &cfg.model.hd * cfg.eps_forecast;
                }
                let block = &cfg.model.cd * &acc;
                eps_free.rows_mut(k * ny, ny).copy_from(&block);
            }
        }

        let qdiag = DVector::from_fn(horizon * ny, |r, _| {
            if r % ny < n {
                cfg.w_v
            } else {
                cfg.w_s
            }
        });
        let mut qgam = gam.clone();
        for r in 0..qgam.nrows() {
            let w = qdiag[r];
            for c in 0..d {
                qgam[(r, c)] *= w;
            }
        }
        let mut p = gam.tr_mul(&qgam);
        for i in 0..d {
            p[(i, i)] += cfg.w_u;
        }

        let n_sp = horizon * m;
        let mut aineq = DMatrix::zeros(2 * n_sp, d);
        for k in 0..horizon {
            for j in 0..m {
                let gam_row = k * ny + n + j;
                for c in 0..d {
                    aineq[(k * m + j, c)] = gam[(gam_row, c)];
                }
            }
        }
        for i in 0..n_sp {
            aineq[(n_sp + i, i)] = 1.0;
        }

        let prepared = PreparedQp::new(p, DMatrix::zeros(0, d), aineq)?;
        Ok(MpcController {
            cfg,
            n,
            m,
            on,
            gam,
            qdiag,
            eps_free,
            prepared,
            u_prev: vec![0.0; m],
            infeasible_steps: 0,
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn input_count(&self) -> usize {
        self.m
    }

    pub fn infeasible_steps(&self) -> usize {
        self.infeasible_steps
    }

    pub fn control_step(
        &mut self,
        past: &PastBuffer,
        eq: &Equilibrium,
        tol: f64,
    ) -> Result<MpcStep, MpcError> {
        if past.len() != self.cfg.t_ini {
            return Err(MpcError::BufferNotWarm { have: past.len(), need: self.cfg.t_ini });
        }
        let (x_hat, estimate_residual) = estimate_initial_state(&self.cfg.model, past, eq)?;
        let yfree = &self.on * &x_hat + &self.eps_free;
        let mut qy = yfree.clone();
        for r in 0..qy.len() {
            qy[r] *= self.qdiag[r];
        }
        let q = self.gam.tr_mul(&qy);

        let ny = self.n + self.m;
        let horizon = self.cfg.horizon;
        let m = self.m;
        let n_sp = horizon * m;
        let mut lower = DVector::zeros(2 * n_sp);
        let mut upper = DVector::zeros(2 * n_sp);
        for k in 0..horizon {
            for j in 0..m {
                let free_sp = yfree[k * ny + self.n + j];
                lower[k * m + j] = (self.cfg.s_min - eq.s_star[j]) - free_sp;
                upper[k * m + j] = (self.cfg.s_max - eq.s_star[j]) - free_sp;
            }
        }
        for i in 0..n_sp {
            lower[n_sp + i] = self.cfg.a_min;
            upper[n_sp + i] = self.cfg.a_max;
        }

        let sol = self.prepared.solve(
            &DVector::zeros(0),
            &q,
            &lower,
            &upper,
            tol,
            MAX_SOLVER_ITERS,
        )?;
        if sol.status != QpStatus::Optimal {
            self.infeasible_steps += 1;
            let u = fallback_input(&self.u_prev, self.cfg.a_min, self.cfg.a_max);
            self.u_prev = u.clone();
            return Ok(MpcStep { u, decision: None, feasible: false });
        }

        let y_flat = &yfree + &self.gam * &sol.x;
        let u_star = DMatrix::from_fn(horizon, m, |k, j| sol.x[k * m + j]);
        let y_star = DMatrix::from_fn(horizon, ny, |k, j| y_flat[k * ny + j]);
        let u: Vec<f64> = (0..m)
            .map(|j| u_star[(0, j)].clamp(self.cfg.a_min, self.cfg.a_max))
            .collect();
        self.u_prev = u.clone();
        let objective = sol.objective + 0.5 * yfree.dot(&qy);
        Ok(MpcStep {
            u,
            decision: Some(MpcDecision {
                u_star,
                y_star,
                x_hat,
                estimate_residual,
                objective,
            }),
            feasible: true,
        })
    }
}
