//! Data-enabled predictive leading cruise control (DeeP-LCC) for mixed
//! traffic: platoons in which a few connected automated vehicles (CAVs) drive
//! among human-driven vehicles (HDVs).
//!
//! The controller never identifies a parametric car-following model. Instead
//! it records one persistently exciting trajectory of the platoon, arranges
//! it into Hankel matrices, and uses the raw data as a behavioral predictor
//! inside a receding-horizon quadratic program. A conventional model-based
//! MPC built on the linearized dynamics is included as a baseline, along with
//! the simulation, analysis, and experiment plumbing needed to compare them.
//!
//! Module layout:
//! - [`traffic`] — nonlinear optimal-velocity-model simulation, equilibria,
//!   linearization, zero-order-hold discretization.
//! - [`analysis`] — controllability / observability / stabilizability checks
//!   for the linearized mixed-traffic model.
//! - [`data`] — offline data collection, Hankel matrices, persistent
//!   excitation, dataset persistence.
//! - [`qp`] — a dense convex QP solver (null-space elimination + primal
//!   active set) shared by both controllers.
//! - [`deepc`] — the data-driven predictive controller.
//! - [`mpc`] — the model-based baseline controller.
//! - [`experiments`] — closed-loop scenarios, fuel/velocity-error metrics,
//!   seeded batch runs.

// Validation code writes `!(a < b)` on purpose: the negated form also
// rejects NaN, which the direct `a >= b` rewrite would silently accept.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod data;
pub mod deepc;
pub mod experiments;
pub mod mpc;
pub mod qp;
pub mod traffic;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Deterministic named RNG stream derived from one master seed.
///
/// The name is FNV-1a hashed into the ChaCha stream id, so every consumer
/// (data collection, head-vehicle noise, batch workers, ...) draws an
/// independent sequence while the whole run stays reproducible from a single
/// 64-bit seed.
pub fn seeded_stream(seed: u64, name: &str) -> ChaCha20Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in name.bytes() {
        h ^= u64::from(byte);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}
