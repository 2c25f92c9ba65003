//! Offline trajectory data: collection, Hankel matrices, persistent
//! excitation, and dataset persistence.
//!
//! The controller consumes raw trajectory data instead of an identified
//! model, so everything here revolves around one structure: a recorded
//! `(u, eps, y)` sequence arranged into block-Hankel matrices whose column
//! space spans every trajectory the (linearized) platoon can produce —
//! provided the recorded inputs were persistently exciting.
//!
//! Sample alignment contract: the record at step `k` holds the output
//! measured *before* the inputs of step `k` act, i.e. `y(k)` is the pre-step
//! measurement and `(u(k), eps(k))` drive the plant from `k` to `k+1`.
//! Pairing `y(k+1)` with `u(k)` instead makes even noise-free linear data
//! inconsistent and silently degrades the controller.

use nalgebra::DMatrix;
use std::fmt;
use std::path::Path;

use crate::analysis::{numerical_rank, DEFAULT_RANK_TOL};
use crate::traffic::{
    build_continuous_model, discretize, linearize_platoon, ovm_acceleration, step_nonlinear,
    AccelLimits, Equilibrium, HdvParams, MixedConfig, TrafficError, TrafficState,
};

/// Format version written into every dataset file.
pub const DATASET_VERSION: u32 = 1;

/// Default sampling interval (s) shared by collection and experiments.
pub const DEFAULT_DT: f64 = 0.05;

/// Errors from data collection, Hankel construction, and persistence.
#[derive(Debug)]
pub enum DataError {
    Io(std::io::Error),
    Parse(serde_json::Error),
    VersionMismatch { found: u32, expected: u32 },
    Dimension { what: &'static str, expected: usize, got: usize },
    InsufficientData { t: usize, need: usize },
    DepthTooLarge { depth: usize, len: usize },
    Collision { step: usize },
    Traffic(TrafficError),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io(e) => write!(f, "dataset i/o failed: {e}"),
            DataError::Parse(e) => write!(f, "dataset malformed: {e}"),
            DataError::VersionMismatch { found, expected } => {
                write!(f, "dataset version {found}, this build reads {expected}")
            }
            DataError::Dimension { what, expected, got } => {
                write!(f, "dataset field {what}: expected {expected}, got {got}")
            }
            DataError::InsufficientData { t, need } => {
                write!(f, "trajectory length {t} below required {need}")
            }
            DataError::DepthTooLarge { depth, len } => {
                write!(f, "Hankel depth {depth} exceeds signal length {len}")
            }
            DataError::Collision { step } => {
                write!(f, "collision at collection step {step}; data discarded")
            }
            DataError::Traffic(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for DataError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            DataError::Io(e) => Some(e),
            DataError::Parse(e) => Some(e),
            DataError::Traffic(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e)
    }
}

impl From<serde_json::Error> for DataError {
    fn from(e: serde_json::Error) -> Self {
        DataError::Parse(e)
    }
}

impl From<TrafficError> for DataError {
    fn from(e: TrafficError) -> Self {
        DataError::Traffic(e)
    }
}

/// One pre-collected trajectory of the platoon, stored as deviations from
/// the collection equilibrium.
///
/// The equilibrium itself (`v_star`, CAV spacings `s_star`) is stored so a
/// controller running at a different operating point can re-base the data.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrajectoryDataset {
    pub version: u32,
    pub n: usize,
    pub m: usize,
    pub cav_indices: Vec<usize>,
    pub dt: f64,
    /// Equilibrium velocity during collection (m/s).
    #[serde(rename = "v_star")]
    pub v_star_collect: f64,
    /// CAV equilibrium spacings during collection (m), one per CAV.
    #[serde(rename = "s_star")]
    pub s_star_collect: Vec<f64>,
    #[serde(rename = "T")]
    pub t: usize,
    /// CAV-input sequence, T rows of m accelerations (m/s^2).
    #[serde(rename = "u")]
    pub u_seq: Vec<Vec<f64>>,
    /// Head-vehicle velocity-error sequence, T entries (m/s).
    #[serde(rename = "eps")]
    pub eps_seq: Vec<f64>,
    /// Output sequence, T rows of n velocity errors then m spacing errors.
    #[serde(rename = "y")]
    pub y_seq: Vec<Vec<f64>>,
}

impl TrajectoryDataset {
    /// Checks internal consistency (version, lengths, widths).
    pub fn validate(&self) -> Result<(), DataError> {
        if self.version != DATASET_VERSION {
            return Err(DataError::VersionMismatch {
                found: self.version,
                expected: DATASET_VERSION,
            });
        }
        if self.cav_indices.len() != self.m {
            return Err(DataError::Dimension {
                what: "cav_indices",
                expected: self.m,
                got: self.cav_indices.len(),
            });
        }
        if self.s_star_collect.len() != self.m {
            return Err(DataError::Dimension {
                what: "s_star",
                expected: self.m,
                got: self.s_star_collect.len(),
            });
        }
        for (name, len) in [("u", self.u_seq.len()), ("eps", self.eps_seq.len()), ("y", self.y_seq.len())] {
            if len != self.t {
                return Err(DataError::Dimension { what: name, expected: self.t, got: len });
            }
        }
        if let Some(row) = self.u_seq.iter().find(|r| r.len() != self.m) {
            return Err(DataError::Dimension { what: "u row", expected: self.m, got: row.len() });
        }
        let ny = self.n + self.m;
        if let Some(row) = self.y_seq.iter().find(|r| r.len() != ny) {
            return Err(DataError::Dimension { what: "y row", expected: ny, got: row.len() });
        }
        Ok(())
    }

    /// Input sequence as a T x m matrix (rows are samples).
    pub fn u_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.t, self.m, |i, j| self.u_seq[i][j])
    }

    /// Head-vehicle error sequence as a T x 1 matrix.
    pub fn eps_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.t, 1, |i, _| self.eps_seq[i])
    }

    /// Output sequence as a T x (n+m) matrix.
    pub fn y_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.t, self.n + self.m, |i, j| self.y_seq[i][j])
    }

    /// Combined excitation signal `(eps; u)` as a T x (1+m) matrix, the
    /// channel whose persistent excitation the theory requires.
    pub fn combined_input_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.t, 1 + self.m, |i, j| {
            if j == 0 {
                self.eps_seq[i]
            } else {
                self.u_seq[i][j - 1]
            }
        })
    }
}

/// The six Hankel blocks consumed by the data-driven controller, split into
/// a past window of `t_ini` block rows and a future window of `horizon`
/// block rows.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelSet {
    pub up: DMatrix<f64>,
    pub uf: DMatrix<f64>,
    pub ep: DMatrix<f64>,
    pub ef: DMatrix<f64>,
    pub yp: DMatrix<f64>,
    pub yf: DMatrix<f64>,
    pub t_ini: usize,
    pub horizon: usize,
    /// Columns shared by all six blocks: T - t_ini - horizon + 1.
    pub cols: usize,
    /// Whether the combined input `(eps; u)` was persistently exciting of
    /// order `t_ini + horizon + 2n`. Advisory here; the controller refuses
    /// to build on `false`.
    pub pe_satisfied: bool,
}

/// Block-Hankel matrix of a multichannel signal: column `j` stacks the
/// length-`depth` window starting at sample `j`, one block row per lag.
pub fn hankel(signal: &DMatrix<f64>, depth: usize) -> Result<DMatrix<f64>, DataError> {
    let (t, d) = signal.shape();
    if depth == 0 || depth > t {
        return Err(DataError::DepthTooLarge { depth, len: t });
    }
    let cols = t - depth + 1;
    let mut h = DMatrix::zeros(depth * d, cols);
    for lag in 0..depth {
        for j in 0..cols {
            for ch in 0..d {
                h[(lag * d + ch, j)] = signal[(lag + j, ch)];
            }
        }
    }
    Ok(h)
}

/// Whether the signal is persistently exciting of the given order: the
/// depth-`order` Hankel matrix has full row rank at tolerance `tol`.
pub fn is_persistently_exciting(signal: &DMatrix<f64>, order: usize, tol: f64) -> bool {
    let (t, d) = signal.shape();
    if order == 0 || order > t || order * d > t - order + 1 {
        return false;
    }
    match hankel(signal, order) {
        Ok(h) => numerical_rank(&h, tol) == order * d,
        Err(_) => false,
    }
}

/// Minimum trajectory length for the Hankel blocks to have more columns
/// than rows: `(m+1)(t_ini + horizon + 2n) - 1`.
pub fn min_data_length(m: usize, t_ini: usize, horizon: usize, n: usize) -> usize {
    (m + 1) * (t_ini + horizon + 2 * n) - 1
}

/// Splits the dataset's Hankel matrices into past/future blocks.
pub fn build_hankel_set(
    ds: &TrajectoryDataset,
    t_ini: usize,
    horizon: usize,
) -> Result<HankelSet, DataError> {
    ds.validate()?;
    let depth = t_ini + horizon;
    if ds.t < depth {
        return Err(DataError::InsufficientData { t: ds.t, need: depth });
    }
    let hu = hankel(&ds.u_matrix(), depth)?;
    let he = hankel(&ds.eps_matrix(), depth)?;
    let hy = hankel(&ds.y_matrix(), depth)?;
    let cols = ds.t - depth + 1;
    let ny = ds.n + ds.m;

    let pe_order = depth + 2 * ds.n;
    let pe_satisfied =
        is_persistently_exciting(&ds.combined_input_matrix(), pe_order, DEFAULT_RANK_TOL);

    Ok(HankelSet {
        up: hu.rows(0, t_ini * ds.m).into_owned(),
        uf: hu.rows(t_ini * ds.m, horizon * ds.m).into_owned(),
        ep: he.rows(0, t_ini).into_owned(),
        ef: he.rows(t_ini, horizon).into_owned(),
        yp: hy.rows(0, t_ini * ny).into_owned(),
        yf: hy.rows(t_ini * ny, horizon * ny).into_owned(),
        t_ini,
        horizon,
        cols,
        pe_satisfied,
    })
}

/// Knobs for the excitation recipe used during collection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollectOptions {
    /// Amplitude of the uniform perturbation added to each CAV input,
    /// redrawn every step (m/s^2).
    pub du_amp: f64,
    /// Amplitude of the head-vehicle velocity error (m/s).
    pub deps_amp: f64,
    /// Steps the head-vehicle error is held before being redrawn.
    pub eps_hold: usize,
}

impl Default for CollectOptions {
    fn default() -> Self {
        CollectOptions { du_amp: 1.0, deps_amp: 1.0, eps_hold: 10 }
    }
}

fn uniform(rng: &mut impl rand::Rng, amp: f64) -> f64 {
    if amp > 0.0 {
        rng.gen_range(-amp..=amp)
    } else {
        0.0
    }
}

fn draw_held_sequence(seed: u64, name: &str, t: usize, amp: f64, hold: usize) -> Vec<f64> {
    let mut rng = crate::seeded_stream(seed, name);
    let hold = hold.max(1);
    let mut seq = vec![0.0; t];
    let mut current = 0.0;
    for (k, slot) in seq.iter_mut().enumerate() {
        if k % hold == 0 {
            current = uniform(&mut rng, amp);
        }
        *slot = current;
    }
    seq
}

/// Records one excitation trajectory of the nonlinear platoon around the
/// equilibrium at `v_star`.
///
/// Every CAV drives with the nominal OVM command plus a uniform
/// perturbation redrawn each step; the head vehicle wanders around `v_star`
/// with a perturbation held for a few steps at a time. Human drivers follow
/// their model exactly — process noise belongs to the closed-loop
/// experiments, not to collection.
pub fn collect_offline(
    cfg: &MixedConfig,
    v_star: f64,
    t: usize,
    seed: u64,
) -> Result<TrajectoryDataset, DataError> {
    collect_offline_opts(cfg, v_star, t, seed, DEFAULT_DT, &CollectOptions::default())
}

/// [`collect_offline`] with explicit sampling interval and excitation knobs.
pub fn collect_offline_opts(
    cfg: &MixedConfig,
    v_star: f64,
    t: usize,
    seed: u64,
    dt: f64,
    opts: &CollectOptions,
) -> Result<TrajectoryDataset, DataError> {
    let eq = Equilibrium::for_config(cfg, v_star)?;
    let nominal = HdvParams::nominal();
    let limits = AccelLimits::default();
    let (n, m) = (cfg.n, cfg.m);

    let eps = draw_held_sequence(seed, "collect.eps", t, opts.deps_amp, opts.eps_hold);
    let mut rng_u = crate::seeded_stream(seed, "collect.u");

    let mut state = TrafficState::at_equilibrium(&eq);
    state.head_velocity = v_star + eps.first().copied().unwrap_or(0.0);
    let zero_noise = vec![0.0; n - m];

    let mut u_seq = Vec::with_capacity(t);
    let mut y_seq = Vec::with_capacity(t);
    for k in 0..t {
        let mut u_k = Vec::with_capacity(m);
        for &ik in &cfg.cav_indices {
            let idx = ik - 1;
            let v_pred = if ik == 1 { state.head_velocity } else { state.velocity[idx - 1] };
            let s_dot = v_pred - state.velocity[idx];
            let base = ovm_acceleration(state.spacing[idx], s_dot, state.velocity[idx], &nominal);
            u_k.push((base + uniform(&mut rng_u, opts.du_amp)).clamp(limits.a_min, limits.a_max));
        }

        let mut y_k = Vec::with_capacity(n + m);
        for i in 0..n {
            y_k.push(state.velocity[i] - v_star);
        }
        for &ik in &cfg.cav_indices {
            y_k.push(state.spacing[ik - 1] - eq.s_star[ik - 1]);
        }

        u_seq.push(u_k.clone());
        y_seq.push(y_k);

        let v0_next = v_star + if k + 1 < t { eps[k + 1] } else { eps[k] };
        state = step_nonlinear(&state, &u_k, v0_next, &zero_noise, dt, cfg, &limits);
        if state.collision {
            return Err(DataError::Collision { step: k });
        }
    }

    let s_star_collect = cfg.cav_indices.iter().map(|&ik| eq.s_star[ik - 1]).collect();
    Ok(TrajectoryDataset {
        version: DATASET_VERSION,
        n,
        m,
        cav_indices: cfg.cav_indices.clone(),
        dt,
        v_star_collect: v_star,
        s_star_collect,
        t,
        u_seq,
        eps_seq: eps,
        y_seq,
    })
}

/// Records a trajectory of the *discrete linearized* model instead of the
/// nonlinear platoon: deviations evolve exactly linearly, inputs are not
/// saturated. This is the reference data source for checking the behavioral
/// predictor against model-based control on equal terms.
pub fn collect_linear(
    cfg: &MixedConfig,
    v_star: f64,
    dt: f64,
    t: usize,
    seed: u64,
    opts: &CollectOptions,
) -> Result<TrajectoryDataset, DataError> {
    let eq = Equilibrium::for_config(cfg, v_star)?;
    let coeffs = linearize_platoon(cfg, v_star)?;
    let model = discretize(&build_continuous_model(cfg, &coeffs)?, dt)?;
    let (n, m) = (cfg.n, cfg.m);

    let eps = draw_held_sequence(seed, "collect.eps", t, opts.deps_amp, opts.eps_hold);
    let mut rng_u = crate::seeded_stream(seed, "collect.u");

    let mut x = nalgebra::DVector::<f64>::zeros(2 * n);
    let mut u_seq = Vec::with_capacity(t);
    let mut y_seq = Vec::with_capacity(t);
    for &eps_k in &eps {
        let u_k: Vec<f64> = (0..m).map(|_| uniform(&mut rng_u, opts.du_amp)).collect();
        let y = &model.cd * &x;
        y_seq.push(y.iter().copied().collect());
        u_seq.push(u_k.clone());
        x = &model.ad * &x
            + &model.bd * nalgebra::DVector::from_column_slice(&u_k)
            + &model.hd * eps_k;
    }

    let s_star_collect = cfg.cav_indices.iter().map(|&ik| eq.s_star[ik - 1]).collect();
    Ok(TrajectoryDataset {
        version: DATASET_VERSION,
        n,
        m,
        cav_indices: cfg.cav_indices.clone(),
        dt,
        v_star_collect: v_star,
        s_star_collect,
        t,
        u_seq,
        eps_seq: eps,
        y_seq,
    })
}

/// Writes the dataset as a single JSON document.
pub fn save_dataset(path: &Path, ds: &TrajectoryDataset) -> Result<(), DataError> {
    ds.validate()?;
    let file = std::fs::File::create(path)?;
    let mut writer = std::io::BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, ds)?;
    use std::io::Write;
    writer.flush()?;
    Ok(())
}

/// Reads and validates a dataset written by [`save_dataset`].
pub fn load_dataset(path: &Path) -> Result<TrajectoryDataset, DataError> {
    let file = std::fs::File::open(path)?;
    let ds: TrajectoryDataset = serde_json::from_reader(std::io::BufReader::new(file))?;
    ds.validate()?;
    Ok(ds)
}
