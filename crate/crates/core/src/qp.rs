//! Dense convex quadratic programming.
//!
//! Problems have the shape
//!
//! ```text
//!   minimize   1/2 x' P x + q' x
//!   subject to Aeq x = beq,   lower <= Aineq x <= upper
//! ```
//!
//! with `P` symmetric positive semidefinite. The solver eliminates the
//! equality constraints through an orthonormal null-space basis and then runs
//! a primal active-set iteration over the two-sided inequality rows, pinning
//! violated rows at their bound and releasing rows whose multiplier turns
//! negative. Solves are deterministic: ties in the violation scan break
//! toward the lowest row index, and no randomness enters anywhere.
//!
//! The expensive work — the equality factorization, the reduced Hessian and
//! its factorization — depends only on `(P, Aeq, Aineq)`. [`PreparedQp`]
//! computes it once so a receding-horizon controller can re-solve with fresh
//! `(beq, q, lower, upper)` every step at a small fraction of the setup cost.
//! [`solve`] is the one-shot convenience wrapper.
//!
//! Semidefinite `P` is handled through an eigenvalue pseudo-inverse of the
//! reduced Hessian. Cost directions with zero curvature are resolved to the
//! minimum-norm iterate; if the gradient does not vanish along them the
//! returned KKT residuals expose the failure and the status degrades to
//! `MaxIterations` rather than claiming optimality.

use nalgebra::{Cholesky, ColPivQR, DMatrix, DVector, Dyn};

/// Relative singular-value cutoff for the equality-constraint rank.
const EQ_RANK_TOL: f64 = 1e-10;

/// Relative eigenvalue cutoff below which reduced-Hessian curvature is
/// treated as zero.
const PSD_EIG_TOL: f64 = 1e-10;

/// Absolute violation above which an inequality row enters the active set.
const ACTIVATION_TOL: f64 = 1e-8;

/// Multipliers below this are considered negative and force a release.
const RELEASE_TOL: f64 = -1e-9;

/// Input-validation failures; solver outcomes are reported through
/// [`QpStatus`] instead.
#[derive(Debug, Clone, PartialEq)]
pub enum QpError {
    Dimension { what: &'static str, expected: usize, got: usize },
    NotSymmetric { max_asymmetry: f64 },
    BoundsReversed { row: usize },
    /// A factorization failed where the declared rank said it could not.
    Factorization(&'static str),
}

impl std::fmt::Display for QpError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QpError::Dimension { what, expected, got } => {
                write!(f, "{what}: expected dimension {expected}, got {got}")
            }
            QpError::NotSymmetric { max_asymmetry } => {
                write!(f, "cost matrix asymmetric by {max_asymmetry}")
            }
            QpError::BoundsReversed { row } => {
                write!(f, "lower > upper on inequality row {row}")
            }
            QpError::Factorization(what) => write!(f, "factorization failed: {what}"),
        }
    }
}

impl std::error::Error for QpError {}

/// One dense QP instance.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadProgram {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub aeq: DMatrix<f64>,
    pub beq: DVector<f64>,
    pub aineq: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QuadProgram {
    /// A problem with no constraints at all.
    pub fn unconstrained(p: DMatrix<f64>, q: DVector<f64>) -> Self {
        let d = p.nrows();
        QuadProgram {
            p,
            q,
            aeq: DMatrix::zeros(0, d),
            beq: DVector::zeros(0),
            aineq: DMatrix::zeros(0, d),
            lower: DVector::zeros(0),
            upper: DVector::zeros(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    /// Checks shapes, symmetry of `P`, and bound ordering.
    pub fn validate(&self) -> Result<(), QpError> {
        let d = self.dim();
        check_dims(&self.p, &self.aeq, &self.aineq, d)?;
        if self.q.len() != d {
            return Err(QpError::Dimension { what: "q", expected: d, got: self.q.len() });
        }
        if self.beq.len() != self.aeq.nrows() {
            return Err(QpError::Dimension {
                what: "beq",
                expected: self.aeq.nrows(),
                got: self.beq.len(),
            });
        }
        for (name, v) in [("lower", &self.lower), ("upper", &self.upper)] {
            if v.len() != self.aineq.nrows() {
                return Err(QpError::Dimension {
                    what: name,
                    expected: self.aineq.nrows(),
                    got: v.len(),
                });
            }
        }
        if let Some(row) = (0..self.lower.len()).find(|&j| self.lower[j] > self.upper[j]) {
            return Err(QpError::BoundsReversed { row });
        }
        Ok(())
    }
}

fn check_dims(
    p: &DMatrix<f64>,
    aeq: &DMatrix<f64>,
    aineq: &DMatrix<f64>,
    d: usize,
) -> Result<(), QpError> {
    if p.ncols() != d {
        return Err(QpError::Dimension { what: "P", expected: d, got: p.ncols() });
    }
    let scale = 1.0 + p.amax();
    let mut asym: f64 = 0.0;
    for i in 0..d {
        for j in (i + 1)..d {
            asym = asym.max((p[(i, j)] - p[(j, i)]).abs());
        }
    }
    if asym > 1e-10 * scale {
        return Err(QpError::NotSymmetric { max_asymmetry: asym });
    }
    if aeq.nrows() > 0 && aeq.ncols() != d {
        return Err(QpError::Dimension { what: "Aeq", expected: d, got: aeq.ncols() });
    }
    if aineq.nrows() > 0 && aineq.ncols() != d {
        return Err(QpError::Dimension { what: "Aineq", expected: d, got: aineq.ncols() });
    }
    Ok(())
}

/// Solver outcome classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    /// KKT residuals within the requested tolerance.
    Optimal,
    /// Equality constraints inconsistent, or the equality-determined point
    /// violates the bounds with no freedom left.
    Infeasible,
    /// Iteration limit, an active-set stall, or residuals that failed the
    /// final check; `x` is the best iterate.
    MaxIterations,
}

/// Solution report. `x` is meaningful for every status: the best iterate on
/// `MaxIterations`, the least-infeasible equality point on `Infeasible`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    /// `(primal, dual)` infinity norms of the KKT residuals at `x`.
    pub kkt_residuals: (f64, f64),
}

enum GFactor {
    Chol(Cholesky<f64, Dyn>),
    /// Eigenvalue pseudo-inverse for semidefinite reduced Hessians.
    Eig { vecs: DMatrix<f64>, inv_vals: DVector<f64> },
    Empty,
}

impl GFactor {
    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            GFactor::Chol(ch) => ch.solve(b),
            GFactor::Eig { vecs, inv_vals } => {
                let mut coeffs = vecs.tr_mul(b);
                coeffs.component_mul_assign(inv_vals);
                vecs * coeffs
            }
            GFactor::Empty => DVector::zeros(0),
        }
    }
}

/// Factorized problem structure, reusable across solves that share
/// `(P, Aeq, Aineq)` but vary the vectors.
pub struct PreparedQp {
    d: usize,
    p_mat: DMatrix<f64>,
    aeq: DMatrix<f64>,
    aineq: DMatrix<f64>,
    /// Maps (possibly rank-reduced) right-hand sides to a particular
    /// solution of the equality system.
    w_pinv: DMatrix<f64>,
    /// Row compressor applied to `beq` when the equality rows were rank
    /// deficient; `None` on the full-rank fast path.
    u_sel_t: Option<DMatrix<f64>>,
    /// Orthonormal basis of the equality null space, `d x d_red`.
    z: DMatrix<f64>,
    g_factor: GFactor,
    /// `Aineq * Z`, the inequality rows in reduced coordinates.
    mz: DMatrix<f64>,
}

impl PreparedQp {
    /// Factorizes the constraint structure. `aeq` and `aineq` may have zero
    /// rows; `p` must be symmetric PSD (symmetry is checked, definiteness is
    /// discovered during factorization).
    pub fn new(
        p: DMatrix<f64>,
        aeq: DMatrix<f64>,
        aineq: DMatrix<f64>,
    ) -> Result<Self, QpError> {
        let d = p.nrows();
        check_dims(&p, &aeq, &aineq, d)?;

        let (w_pinv, u_sel_t, z) = equality_basis(&aeq, d)?;

        let d_red = z.ncols();
        let g_factor = if d_red == 0 {
            GFactor::Empty
        } else {
            let g = z.tr_mul(&(&p * &z));
            match Cholesky::new(g.clone()) {
                Some(ch) => GFactor::Chol(ch),
                None => {
                    let eig = g.symmetric_eigen();
                    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
                    let inv_vals = eig.eigenvalues.map(|ev| {
                        if max_ev > 0.0 && ev > PSD_EIG_TOL * max_ev {
                            1.0 / ev
                        } else {
                            0.0
                        }
                    });
                    GFactor::Eig { vecs: eig.eigenvectors, inv_vals }
                }
            }
        };

        let mz = if aineq.nrows() == 0 {
            DMatrix::zeros(0, d_red)
        } else {
            &aineq * &z
        };

        Ok(PreparedQp { d, p_mat: p, aeq, aineq, w_pinv, u_sel_t, z, g_factor, mz })
    }

    /// Solves for one right-hand side. Returns `Err` only on dimension
    /// mismatches; solver outcomes land in [`QpSolution::status`].
    pub fn solve(
        &self,
        beq: &DVector<f64>,
        q: &DVector<f64>,
        lower: &DVector<f64>,
        upper: &DVector<f64>,
        tol: f64,
        max_iter: usize,
    ) -> Result<QpSolution, QpError> {
        if q.len() != self.d {
            return Err(QpError::Dimension { what: "q", expected: self.d, got: q.len() });
        }
        if beq.len() != self.aeq.nrows() {
            return Err(QpError::Dimension {
                what: "beq",
                expected: self.aeq.nrows(),
                got: beq.len(),
            });
        }
        let r_ineq = self.aineq.nrows();
        if lower.len() != r_ineq || upper.len() != r_ineq {
            return Err(QpError::Dimension {
                what: "bounds",
                expected: r_ineq,
                got: lower.len().max(upper.len()),
            });
        }

        // Particular solution of the equality system, plus a consistency
        // check: an out-of-range beq makes the whole problem infeasible.
        let zp = if self.aeq.nrows() == 0 {
            DVector::zeros(self.d)
        } else {
            let b_eff = match &self.u_sel_t {
                Some(ut) => ut * beq,
                None => beq.clone(),
            };
            &self.w_pinv * b_eff
        };
        if self.aeq.nrows() > 0 {
            let res = (&self.aeq * &zp - beq).norm();
            if res > 1e-6 * (1.0 + beq.norm()) {
                return Ok(self.report(zp, q, beq, lower, upper, &[], &[], QpStatus::Infeasible, tol));
            }
        }

        let d_red = self.z.ncols();
        if d_red == 0 {
            // Equalities pin x completely; bounds either hold or they don't.
            let feasible = (0..r_ineq).all(|j| {
                let v = row_dot(&self.aineq, j, &zp);
                v >= lower[j] - ACTIVATION_TOL && v <= upper[j] + ACTIVATION_TOL
            });
            let status = if feasible { QpStatus::Optimal } else { QpStatus::Infeasible };
            return Ok(self.report(zp, q, beq, lower, upper, &[], &[], status, tol));
        }

        let grad0 = &self.p_mat * &zp + q;
        let c = self.z.tr_mul(&grad0);
        let w_unc = self.g_factor.solve(&(-&c));
        let lo_r = lower - &self.aineq * &zp;
        let hi_r = upper - &self.aineq * &zp;

        // Active set of (row, side) pairs, side +1 for the upper bound and
        // -1 for the lower. `vs[i]` caches G^-1 n_i for the pinned normal
        // n_i = side * mz[row]; each activation costs one factor solve.
        let mut active: Vec<(usize, f64)> = Vec::new();
        let mut vs: Vec<DVector<f64>> = Vec::new();
        let mut w = w_unc.clone();
        let mut mu: Vec<f64> = Vec::new();
        let mut converged = false;

        for _ in 0..max_iter {
            if active.is_empty() {
                w = w_unc.clone();
                mu.clear();
            } else {
                let k = active.len();
                let mut s = DMatrix::zeros(k, k);
                let mut rhs = DVector::zeros(k);
                for a in 0..k {
                    let (ja, side_a) = active[a];
                    for b in a..k {
                        let val = side_a * row_dot(&self.mz, ja, &vs[b]);
                        s[(a, b)] = val;
                        s[(b, a)] = val;
                    }
                    let bound = if side_a > 0.0 { hi_r[ja] } else { -lo_r[ja] };
                    rhs[a] = side_a * row_dot(&self.mz, ja, &w_unc) - bound;
                }
                let Some(chol) = Cholesky::new(s) else {
                    // Linearly dependent active normals: no progress possible.
                    break;
                };
                let mu_vec = chol.solve(&rhs);
                w = w_unc.clone();
                for (i, v) in vs.iter().enumerate() {
                    w.axpy(-mu_vec[i], v, 1.0);
                }
                mu = mu_vec.iter().cloned().collect();

                // Release the most negative multiplier before admitting
                // anything new.
                let mut drop_idx = None;
                let mut worst = RELEASE_TOL;
                for (i, &m) in mu.iter().enumerate() {
                    if m < worst {
                        worst = m;
                        drop_idx = Some(i);
                    }
                }
                if let Some(i) = drop_idx {
                    active.remove(i);
                    vs.remove(i);
                    continue;
                }
            }

            // Most violated bound among all rows, both sides.
            let mzw = &self.mz * &w;
            let mut worst = ACTIVATION_TOL;
            let mut candidate = None;
            for j in 0..r_ineq {
                let over = mzw[j] - hi_r[j];
                if over > worst {
                    worst = over;
                    candidate = Some((j, 1.0));
                }
                let under = lo_r[j] - mzw[j];
                if under > worst {
                    worst = under;
                    candidate = Some((j, -1.0));
                }
            }
            let Some((j, side)) = candidate else {
                converged = true;
                break;
            };
            if active.contains(&(j, side)) {
                break;
            }
            let n_j = side * self.mz.row(j).transpose();
            vs.push(self.g_factor.solve(&n_j));
            active.push((j, side));
        }
        let x = &zp + &self.z * &w;
        let status = if converged { QpStatus::Optimal } else { QpStatus::MaxIterations };
        Ok(self.report(x, q, beq, lower, upper, &active, &mu, status, tol))
    }

    /// Evaluates objective and KKT residuals at `x` and applies the final
    /// status check: `Optimal` is only reported when both residuals pass.
    #[allow(clippy::too_many_arguments)]
    fn report(
        &self,
        x: DVector<f64>,
        q: &DVector<f64>,
        beq: &DVector<f64>,
        lower: &DVector<f64>,
        upper: &DVector<f64>,
        active: &[(usize, f64)],
        mu: &[f64],
        status: QpStatus,
        tol: f64,
    ) -> QpSolution {
        let px = &self.p_mat * &x;
        let objective = 0.5 * x.dot(&px) + q.dot(&x);

        let mut primal: f64 = 0.0;
        if self.aeq.nrows() > 0 {
            primal = (&self.aeq * &x - beq).amax();
        }
        for j in 0..self.aineq.nrows() {
            let v = row_dot(&self.aineq, j, &x);
            primal = primal.max(v - upper[j]).max(lower[j] - v);
        }

        // Stationarity projected onto the equality null space: the equality
        // multipliers absorb everything in the row space, so the residual is
        // Z' (P x + q + sum_i mu_i side_i aineq_row_i').
        let mut grad = px + q;
        for (i, &(j, side)) in active.iter().enumerate() {
            let mu_i = mu.get(i).copied().unwrap_or(0.0);
            for col in 0..self.d {
                grad[col] += mu_i * side * self.aineq[(j, col)];
            }
        }
        let dual = if self.z.ncols() == 0 { 0.0 } else { self.z.tr_mul(&grad).amax() };

        let status = if status == QpStatus::Optimal && (primal > tol || dual > tol) {
            QpStatus::MaxIterations
        } else {
            status
        };
        QpSolution { x, objective, status, kkt_residuals: (primal.max(0.0), dual) }
    }
}

/// Particular-solution operator, optional row compressor, and orthonormal
/// null-space basis of the equality rows.
type EqualityBasis = (DMatrix<f64>, Option<DMatrix<f64>>, DMatrix<f64>);

fn equality_basis(aeq: &DMatrix<f64>, d: usize) -> Result<EqualityBasis, QpError> {
    let p_rows = aeq.nrows();
    if p_rows == 0 {
        return Ok((DMatrix::zeros(d, 0), None, DMatrix::identity(d, d)));
    }

    // Rank from the singular values (min(p, d) of them, i.e. the complete
    // spectrum), then a column-pivoted QR of the row-compressed system for
    // the actual basis work.
    let svd = nalgebra::SVD::new(aeq.clone(), true, false);
    let sv = &svd.singular_values;
    let sv_max = sv.iter().cloned().fold(0.0f64, f64::max);
    let rank = if sv_max > 0.0 {
        sv.iter().filter(|&&s| s > EQ_RANK_TOL * sv_max).count()
    } else {
        0
    };

    if rank == 0 {
        // Zero equality rows: feasible only for beq ~ 0, handled by the
        // residual check at solve time.
        return Ok((DMatrix::zeros(d, p_rows), None, DMatrix::identity(d, d)));
    }

    let (aeq_eff, u_sel_t) = if rank < p_rows {
        let u = svd.u.as_ref().expect("svd computed with u");
        let mut sel = DMatrix::zeros(rank, p_rows);
        let mut r = 0;
        for i in 0..sv.len() {
            if sv[i] > EQ_RANK_TOL * sv_max {
                for row in 0..p_rows {
                    sel[(r, row)] = u[(row, i)];
                }
                r += 1;
            }
        }
        (&sel * aeq, Some(sel))
    } else {
        (aeq.clone(), None)
    };

    let qr = ColPivQR::new(aeq_eff);
    let q_t = qr.q().transpose();
    let r_full = qr.r();
    let r11 = r_full.view((0, 0), (rank, rank)).into_owned();

    let top = r11
        .solve_upper_triangular(&q_t)
        .ok_or(QpError::Factorization("equality triangular factor"))?;
    let mut w_pinv = DMatrix::zeros(d, rank);
    w_pinv.view_mut((0, 0), (rank, rank)).copy_from(&top);
    qr.p().inv_permute_rows(&mut w_pinv);

    let d_red = d - rank;
    let z = if d_red == 0 {
        DMatrix::zeros(d, 0)
    } else {
        let r12 = r_full.view((0, rank), (rank, d_red)).into_owned();
        let x = r11
            .solve_upper_triangular(&r12)
            .ok_or(QpError::Factorization("null-space triangular factor"))?;
        let mut n0 = DMatrix::zeros(d, d_red);
        n0.view_mut((0, 0), (rank, d_red)).copy_from(&(-x));
        n0.view_mut((rank, 0), (d_red, d_red))
            .copy_from(&DMatrix::identity(d_red, d_red));
        qr.p().inv_permute_rows(&mut n0);
        nalgebra::QR::new(n0).q()
    };

    Ok((w_pinv, u_sel_t, z))
}

fn row_dot(m: &DMatrix<f64>, row: usize, v: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for (col, x) in v.iter().enumerate() {
        acc += m[(row, col)] * x;
    }
    acc
}

/// One-shot solve of a [`QuadProgram`].
pub fn solve(prog: &QuadProgram, tol: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    prog.validate()?;
    let prepared = PreparedQp::new(prog.p.clone(), prog.aeq.clone(), prog.aineq.clone())?;
    prepared.solve(&prog.beq, &prog.q, &prog.lower, &prog.upper, tol, max_iter)
}
