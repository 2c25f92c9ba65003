//! Exit-gate checks for the whole stack, numbered and one test each:
//! structural analysis, behavioral span, controller equivalence, trend
//! reproduction at full scale, solver correctness, and metric pins. The
//! seeded batteries behind criteria 4–7 are computed once and shared.

use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use deep_lcc::analysis::{
    analyze_config, combined_input_controllable, controllability_rank, pbh_controllable,
    stability_condition, DEFAULT_RANK_TOL,
};
use deep_lcc::data::{
    build_hankel_set, collect_linear, collect_offline_opts, min_data_length, CollectOptions,
    DEFAULT_DT,
};
use deep_lcc::deepc::{
    nominal_operating_point, DeepLccConfig, DeepcController, PastBuffer, DEFAULT_SOLVER_TOL,
    MAX_SOLVER_ITERS,
};
use deep_lcc::experiments::{
    batch, batch_with, default_brake, default_sinusoid, fuel_rate, heterogeneous_drivers,
    mean_std, msve, BatchSummary, ControllerArm, RunLog,
};
use deep_lcc::mpc::{MpcConfig, MpcController};
use deep_lcc::qp::{solve, QpStatus, QuadProgram};
use deep_lcc::seeded_stream;
use deep_lcc::traffic::{
    build_continuous_model, discretize, linearize_hdv, linearize_platoon, DiscreteModel,
    Equilibrium, HdvParams, MixedConfig, StateSpaceModel,
};

fn benchmark_plant() -> MixedConfig {
    MixedConfig::homogeneous(8, vec![3, 6], HdvParams::nominal()).unwrap()
}

fn continuous_model(plant: &MixedConfig, v_star: f64) -> StateSpaceModel {
    let coeffs = linearize_platoon(plant, v_star).unwrap();
    build_continuous_model(plant, &coeffs).unwrap()
}

fn discrete_model(plant: &MixedConfig, v_star: f64) -> DiscreteModel {
    discretize(&continuous_model(plant, v_star), DEFAULT_DT).unwrap()
}

fn cav_equilibrium(plant: &MixedConfig, v_star: f64) -> Equilibrium {
    let eq = Equilibrium::for_config(plant, v_star).unwrap();
    let s_star = plant.cav_indices.iter().map(|&i| eq.s_star[i - 1]).collect();
    Equilibrium { v_star, s_star }
}

#[test]
fn criterion_1_structural_analysis_suite() {
    let started = Instant::now();
    let tol = DEFAULT_RANK_TOL;

    let coeffs = linearize_hdv(&HdvParams::nominal(), 15.0).unwrap();
    let condition = stability_condition(&coeffs);
    assert!(
        (condition - 0.4025).abs() < 5e-5,
        "nominal stability-condition value {condition} should be 0.4025"
    );

    // A leading CAV makes the sixteen-state platoon fully controllable. The
    // raw Kalman matrix carries powers of A up to the fifteenth and its
    // singular values span more than eight decades, so an SVD rank at 1e-8
    // of that particular matrix certifies nothing; the PBH pencil makes the
    // same rank decision at the same tolerance with O(1) conditioning. On a
    // platoon shallow enough to stay clear of the conditioning cliff the
    // two formulations agree exactly.
    let lead = MixedConfig::homogeneous(8, vec![1], HdvParams::nominal()).unwrap();
    let lead_model = continuous_model(&lead, 15.0);
    assert!(
        pbh_controllable(&lead_model.a, &lead_model.b, tol),
        "a leading CAV must give full rank 2n = 16"
    );
    let small = MixedConfig::homogeneous(4, vec![1], HdvParams::nominal()).unwrap();
    let small_model = continuous_model(&small, 15.0);
    assert_eq!(controllability_rank(&small_model.a, &small_model.b, tol), 8);
    assert!(pbh_controllable(&small_model.a, &small_model.b, tol));

    // Mid-platoon CAVs lose the vehicles ahead of the first one, but the
    // lost modes are stable and the head-vehicle channel restores full
    // controllability of the combined-input model.
    let plant = benchmark_plant();
    let report = analyze_config(&plant, 15.0, tol).unwrap();
    assert!(!report.controllable, "mid-platoon layout must not be controllable");
    assert!(report.controllability_rank < 16);
    assert!(report.stabilizable, "mid-platoon layout must be stabilizable");
    assert!(report.observable, "mid-platoon layout must be observable");
    let model = continuous_model(&plant, 15.0);
    assert!(combined_input_controllable(&model, tol));

    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}, budget 1 s");
    println!(
        "criterion 1: PASS — condition value {condition:.4}, lead layout controllable, \
         mid layout rank {} of 16 with stabilizable/observable/combined all true ({elapsed:?})",
        report.controllability_rank
    );
}

/// Simulates the deterministic linear plant over one `t_ini + horizon`
/// window from a random start and stacks the result exactly like a column
/// of `[up; uf; ep; ef; yp; yf]`.
fn fresh_window(
    model: &DiscreteModel,
    t_ini: usize,
    horizon: usize,
    rng: &mut impl Rng,
) -> DVector<f64> {
    let window = t_ini + horizon;
    let nx = model.ad.nrows();
    let m = model.bd.ncols();
    let ny = model.cd.nrows();

    let mut x = DVector::from_fn(nx, |_, _| rng.gen_range(-1.0..1.0));
    let mut u = Vec::with_capacity(window);
    let mut eps = Vec::with_capacity(window);
    let mut y = Vec::with_capacity(window);
    for _ in 0..window {
        let uk = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
        let ek: f64 = rng.gen_range(-1.0..1.0);
        y.push(&model.cd * &x);
        x = &model.ad * &x + &model.bd * &uk + &model.hd * ek;
        u.push(uk);
        eps.push(ek);
    }

    let mut w = DVector::zeros((m + 1 + ny) * window);
    let mut at = 0;
    for uk in &u {
        w.rows_mut(at, m).copy_from(uk);
        at += m;
    }
    for &e in &eps {
        w[at] = e;
        at += 1;
    }
    for yk in &y {
        w.rows_mut(at, ny).copy_from(yk);
        at += ny;
    }
    w
}

/// Collects a noise-free linear dataset of length `t`, stacks its Hankel
/// blocks, and reports the worst relative least-squares residual of
/// `trials` fresh trajectories against that column space.
fn span_residuals(t: usize, trials: usize) -> (f64, usize, usize) {
    let plant = benchmark_plant();
    let model = discrete_model(&plant, 15.0);
    let (t_ini, horizon) = (20usize, 50usize);
    let window = t_ini + horizon;
    let opts = CollectOptions { eps_hold: 1, ..CollectOptions::default() };
    let ds = collect_linear(&plant, 15.0, DEFAULT_DT, t, 11, &opts).unwrap();
    let h = build_hankel_set(&ds, t_ini, horizon).unwrap();

    let (m, ny) = (plant.m, plant.n + plant.m);
    let rows = (m + 1 + ny) * window;
    let mut stack = DMatrix::zeros(rows, h.cols);
    let mut at = 0;
    for block in [&h.up, &h.uf, &h.ep, &h.ef, &h.yp, &h.yf] {
        stack.rows_mut(at, block.nrows()).copy_from(block);
        at += block.nrows();
    }
    let svd = stack.clone().svd(true, true);

    let mut rng = seeded_stream(23, "acceptance.fresh");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let w = fresh_window(&model, t_ini, horizon, &mut rng);
        let g = svd.solve(&w, 1e-12).unwrap();
        let residual = (&stack * g - &w).norm() / w.norm();
        worst = worst.max(residual);
    }

    let span_dim = (m + 1) * window + 2 * plant.n;
    (worst, h.cols, span_dim)
}

#[test]
fn criterion_2_hankel_span_at_the_stated_minimum_length() {
    let started = Instant::now();
    // The stated minimum, min_data_length(2, 20, 50, 8) = 257, counts only
    // the two controlled inputs. The behavior being spanned also has the
    // head-vehicle disturbance as a free channel: over a 70-sample window
    // the trajectory family has 3*70 + 16 = 226 dimensions, while 257
    // samples yield only 257 - 70 + 1 = 188 Hankel columns. No excitation
    // recipe can make a 188-column space contain a 226-dimensional family,
    // so fresh trajectories must leave residuals of order one here. Counting
    // the disturbance as a third input gives (3+1)*86 - 1 = 343 samples,
    // and the companion test below shows the residuals collapsing there.
    let stated = min_data_length(2, 20, 50, 8);
    assert_eq!(stated, 257);
    let (worst, cols, span_dim) = span_residuals(stated, 50);
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}, budget 10 s");
    println!(
        "criterion 2: T={stated} gives {cols} Hankel columns against a \
         {span_dim}-dimensional trajectory family; worst residual {worst:.3e} ({elapsed:?})"
    );
    assert!(
        worst < 1e-6,
        "worst residual {worst:.3e} ≥ 1e-6: {cols} columns cannot span a \
         {span_dim}-dimensional family — the length bound must count the \
         disturbance channel, which asks for 343 samples"
    );
}

#[test]
fn hankel_span_holds_once_the_disturbance_channel_is_counted() {
    let correct = min_data_length(3, 20, 50, 8);
    assert_eq!(correct, 343);
    let (worst, cols, span_dim) = span_residuals(correct, 50);
    assert!(
        cols >= span_dim,
        "{cols} columns should cover the {span_dim}-dimensional family"
    );
    assert!(worst < 1e-6, "worst residual {worst:.3e} at T={correct}");
    println!(
        "companion: T={correct} gives {cols} columns ≥ {span_dim} dimensions; \
         worst residual {worst:.3e}"
    );
}

#[test]
fn criterion_3_controllers_agree_when_regularization_vanishes() {
    let plant = benchmark_plant();
    let model = discrete_model(&plant, 15.0);
    let eq = cav_equilibrium(&plant, 15.0);
    let dt = DEFAULT_DT;
    let t_ini = 20;
    let steps = 200i64;

    let tuning = DeepLccConfig {
        lambda_g: 0.0,
        lambda_y: 1e7,
        ..DeepLccConfig::default()
    };
    let ds = collect_linear(&plant, 15.0, dt, 800, 77, &CollectOptions::default()).unwrap();
    let mut deepc = DeepcController::from_dataset(&ds, tuning.clone()).unwrap();
    let mut mpc = MpcController::new(MpcConfig::from_tuning(&tuning, model.clone())).unwrap();

    let head = |k: i64| 15.0 + 3.0 * (2.0 * std::f64::consts::PI * dt * k as f64 / 10.0).sin();
    let mut closed_loop = |data_driven: bool| -> Vec<Vec<f64>> {
        let mut past = PastBuffer::new(t_ini);
        for _ in 0..t_ini {
            past.push(&[0.0, 0.0], 15.0, &[15.0; 8], &[20.0, 20.0]);
        }
        let mut x = DVector::zeros(16);
        let mut applied = Vec::new();
        for k in 0..steps {
            let u = if data_driven {
                let s = deepc.control_step(&past, &eq, DEFAULT_SOLVER_TOL).unwrap();
                assert!(s.feasible, "data-driven step {k} fell back");
                s.u
            } else {
                let s = mpc.control_step(&past, &eq, DEFAULT_SOLVER_TOL).unwrap();
                assert!(s.feasible, "model-based step {k} fell back");
                s.u
            };
            let v0 = head(k);
            let vel: Vec<f64> = (0..8).map(|i| eq.v_star + x[2 * i + 1]).collect();
            let sp: Vec<f64> = plant
                .cav_indices
                .iter()
                .enumerate()
                .map(|(j, &idx)| eq.s_star[j] + x[2 * (idx - 1)])
                .collect();
            past.push(&u, v0, &vel, &sp);
            let uv = DVector::from_column_slice(&u);
            x = &model.ad * x + &model.bd * uv + &model.hd * (v0 - 15.0);
            applied.push(u);
        }
        applied
    };

    let u_deepc = closed_loop(true);
    let u_mpc = closed_loop(false);
    let mut worst = 0.0f64;
    for (k, (a, b)) in u_deepc.iter().zip(u_mpc.iter()).enumerate() {
        for j in 0..2 {
            let gap = (a[j] - b[j]).abs();
            worst = worst.max(gap);
            assert!(
                gap < 1e-3,
                "step {k} input {j}: data-driven {} vs model-based {}",
                a[j],
                b[j]
            );
        }
    }
    println!(
        "criterion 3: PASS — {} steps, worst input gap {worst:.3e} (tolerance 1e-3)",
        steps
    );
}

fn experiment_a() -> &'static (BatchSummary, Duration) {
    static CELL: OnceLock<(BatchSummary, Duration)> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let plant = benchmark_plant();
        let seeds: Vec<u64> = (1..=20).collect();
        let summary = batch(
            &plant,
            &default_sinusoid(),
            &[ControllerArm::AllHdv, ControllerArm::Deepc, ControllerArm::Mpc],
            &DeepLccConfig::default(),
            DEFAULT_DT,
            &seeds,
            800,
            1,
        )
        .unwrap();
        (summary, started.elapsed())
    })
}

fn arm_of(summary: &BatchSummary, arm: ControllerArm) -> &deep_lcc::experiments::ArmSummary {
    summary.arms.iter().find(|a| a.arm == arm).unwrap()
}

#[test]
fn criterion_4_the_data_driven_arm_attenuates_the_tail() {
    let (summary, _) = experiment_a();
    let all_hdv = arm_of(summary, ControllerArm::AllHdv);
    let deepc = arm_of(summary, ControllerArm::Deepc);
    let amplitude = 3.0;

    let tail = |m: &deep_lcc::experiments::RunMetrics| m.peak_velocity_error[7];
    let human_peaks: Vec<f64> = all_hdv.metrics.iter().map(tail).collect();
    let deepc_peaks: Vec<f64> = deepc.metrics.iter().map(tail).collect();

    let weakest_human = human_peaks.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(
        weakest_human > amplitude,
        "human platoon failed to amplify: weakest tail peak {weakest_human:.3} ≤ {amplitude}"
    );

    let mean_human = mean_std(&human_peaks).0;
    let mean_deepc = mean_std(&deepc_peaks).0;
    let reduction = 1.0 - mean_deepc / mean_human;
    assert!(
        reduction >= 0.20,
        "tail peak reduction {:.1}% is below the 20% bar",
        100.0 * reduction
    );
    println!(
        "criterion 4: PASS — human tail peak {mean_human:.2} m/s (> {amplitude} every seed), \
         data-driven {mean_deepc:.2} m/s, reduction {:.1}% over 20 seeds",
        100.0 * reduction
    );
}

#[test]
fn criterion_5_cost_stays_within_fifteen_percent_of_the_model_benchmark() {
    let (summary, elapsed) = experiment_a();
    let deepc = arm_of(summary, ControllerArm::Deepc);
    let mpc = arm_of(summary, ControllerArm::Mpc);

    assert_eq!(deepc.collisions, 0);
    assert_eq!(mpc.collisions, 0);
    let ratio = deepc.mean_realized_cost / mpc.mean_realized_cost;
    assert!(
        ratio <= 1.15,
        "data-driven mean cost {:.1} vs model-based {:.1}: ratio {ratio:.4} exceeds 1.15",
        deepc.mean_realized_cost,
        mpc.mean_realized_cost
    );
    assert!(
        *elapsed < Duration::from_secs(600),
        "battery took {elapsed:?}, budget 10 min"
    );
    println!(
        "criterion 5: PASS — realized cost {:.1} (data-driven) vs {:.1} (model-based), \
         ratio {ratio:.4} ≤ 1.15 over 20 seeds; battery ran in {elapsed:?}",
        deepc.mean_realized_cost,
        mpc.mean_realized_cost
    );
}

struct BrakeAudit {
    min_spacing: f64,
    u_min: f64,
    u_max: f64,
    collisions: usize,
    fallback_dominated: usize,
}

fn braking_battery() -> &'static (BatchSummary, BrakeAudit) {
    static CELL: OnceLock<(BatchSummary, BrakeAudit)> = OnceLock::new();
    CELL.get_or_init(|| {
        let plant = MixedConfig::new(8, vec![3, 6], heterogeneous_drivers()).unwrap();
        let seeds: Vec<u64> = (101..=120).collect();
        let audit = Mutex::new(BrakeAudit {
            min_spacing: f64::INFINITY,
            u_min: f64::INFINITY,
            u_max: f64::NEG_INFINITY,
            collisions: 0,
            fallback_dominated: 0,
        });
        let summary = batch_with(
            &plant,
            &default_brake(),
            &[ControllerArm::AllHdv, ControllerArm::Deepc],
            &DeepLccConfig::default(),
            DEFAULT_DT,
            &seeds,
            800,
            1,
            &|_, arm, run| {
                if arm == ControllerArm::Deepc {
                    let mut a = audit.lock().unwrap();
                    a.min_spacing = a.min_spacing.min(run.metrics.min_cav_spacing);
                    for row in &run.log.u {
                        for &u in row {
                            a.u_min = a.u_min.min(u);
                            a.u_max = a.u_max.max(u);
                        }
                    }
                    if run.metrics.collision {
                        a.collisions += 1;
                    }
                    if 2 * run.metrics.infeasible_steps > run.log.steps() {
                        a.fallback_dominated += 1;
                    }
                }
                Ok(())
            },
        )
        .unwrap();
        (summary, audit.into_inner().unwrap())
    })
}

#[test]
fn criterion_6_braking_never_violates_spacing_or_input_bounds() {
    let (_, audit) = braking_battery();
    assert_eq!(audit.collisions, 0, "a controlled braking run collided");
    assert_eq!(
        audit.fallback_dominated, 0,
        "a controlled braking run leaned on the fallback input"
    );
    assert!(
        audit.min_spacing >= 5.0,
        "worst CAV spacing {:.3} m under the 5 m floor",
        audit.min_spacing
    );
    assert!(
        audit.u_min >= -5.0 && audit.u_max <= 2.0,
        "applied inputs [{:.3}, {:.3}] left [-5, 2]",
        audit.u_min,
        audit.u_max
    );
    println!(
        "criterion 6: PASS — worst spacing {:.2} m ≥ 5 m, applied inputs within \
         [{:.2}, {:.2}] over 20 braking seeds",
        audit.min_spacing, audit.u_min, audit.u_max
    );
}

#[test]
fn criterion_7_braking_burns_at_least_ten_percent_less_fuel() {
    let (summary, _) = braking_battery();
    let all_hdv = arm_of(summary, ControllerArm::AllHdv);
    let deepc = arm_of(summary, ControllerArm::Deepc);

    let savings = 1.0 - deepc.mean_fuel_tail / all_hdv.mean_fuel_tail;
    assert!(
        savings >= 0.10,
        "fuel savings {:.1}% below the 10% bar ({:.1} vs {:.1} mL)",
        100.0 * savings,
        deepc.mean_fuel_tail,
        all_hdv.mean_fuel_tail
    );
    println!(
        "criterion 7: PASS — tail fuel {:.1} mL (data-driven) vs {:.1} mL (human), \
         savings {:.1}% over 20 paired seeds",
        deepc.mean_fuel_tail,
        all_hdv.mean_fuel_tail,
        100.0 * savings
    );
}

#[test]
fn criterion_8_qp_matches_the_kkt_oracle_and_steps_fast_enough() {
    let mut rng = seeded_stream(31, "acceptance.qp");
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let d = rng.gen_range(2..=30usize);
        let k = rng.gen_range(1..d);
        let m_mat = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
        let mut p = m_mat.transpose() * &m_mat + DMatrix::identity(d, d);
        p = (&p + p.transpose()) * 0.5;
        let aeq = DMatrix::from_fn(k, d, |_, _| rng.gen_range(-1.0..1.0));
        let q = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        let beq = DVector::from_fn(k, |_, _| rng.gen_range(-1.0..1.0));

        // Stationarity and feasibility pin the optimum of an
        // equality-constrained strictly convex program exactly:
        // [P A'; A 0] [x; nu] = [-q; b].
        let mut kkt = DMatrix::zeros(d + k, d + k);
        kkt.view_mut((0, 0), (d, d)).copy_from(&p);
        kkt.view_mut((0, d), (d, k)).copy_from(&aeq.transpose());
        kkt.view_mut((d, 0), (k, d)).copy_from(&aeq);
        let mut rhs = DVector::zeros(d + k);
        rhs.rows_mut(0, d).copy_from(&(-&q));
        rhs.rows_mut(d, k).copy_from(&beq);
        let oracle = kkt.lu().solve(&rhs).unwrap().rows(0, d).into_owned();

        let prog = QuadProgram {
            p,
            q,
            aeq,
            beq,
            aineq: DMatrix::zeros(0, d),
            lower: DVector::zeros(0),
            upper: DVector::zeros(0),
        };
        let sol = solve(&prog, 1e-9, MAX_SOLVER_ITERS).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal, "trial {trial} not optimal");
        let gap = (&sol.x - &oracle).amax();
        worst = worst.max(gap);
        assert!(gap < 1e-6, "trial {trial} (d={d}, k={k}): gap {gap:.3e}");
    }

    // Full-scale timing: one receding-horizon decision on the benchmark
    // layout, measured on a warm controller.
    let plant = benchmark_plant();
    let ds =
        collect_offline_opts(&plant, 15.0, 800, 5, DEFAULT_DT, &CollectOptions::default())
            .unwrap();
    let mut ctrl = DeepcController::from_dataset(&ds, DeepLccConfig::default()).unwrap();
    let eq = nominal_operating_point(15.0, 2).unwrap();
    let mut past = PastBuffer::new(20);
    for k in 0..20 {
        let ripple = 0.3 * (0.4 * k as f64).sin();
        let vel: Vec<f64> = (0..8).map(|i| 15.0 + 0.05 * ((k + i) as f64).sin()).collect();
        past.push(&[0.0, 0.0], 15.0 + ripple, &vel, &[20.0, 20.0]);
    }
    let mut slowest = Duration::ZERO;
    for _ in 0..5 {
        let tick = Instant::now();
        let step = ctrl.control_step(&past, &eq, DEFAULT_SOLVER_TOL).unwrap();
        slowest = slowest.max(tick.elapsed());
        assert!(step.feasible);
    }
    assert!(
        slowest < Duration::from_secs(1),
        "slowest full-scale decision took {slowest:?}"
    );
    println!(
        "criterion 8: PASS — 100 random equality-constrained programs within \
         {worst:.3e} of the closed form; slowest full-scale decision {slowest:?}"
    );
}

#[test]
fn criterion_9_fuel_and_msve_pins() {
    assert!(
        (fuel_rate(15.0, 0.0) - 1.2216).abs() < 1e-12,
        "fuel_rate(15, 0) = {}",
        fuel_rate(15.0, 0.0)
    );
    // R = 0.333 + 0.00108 v^2 + 1.2 a goes nonpositive here.
    assert_eq!(fuel_rate(5.0, -1.0), 0.444);
    assert_eq!(fuel_rate(0.0, -5.0), 0.444);

    let perfect = RunLog {
        dt: 0.1,
        t: (0..40).map(|k| 0.1 * k as f64).collect(),
        v0: (0..40).map(|k| 15.0 + (0.3 * k as f64).sin()).collect(),
        spacing: vec![vec![20.0; 4]; 40],
        velocity: (0..40)
            .map(|k| vec![15.0 + (0.3 * k as f64).sin(); 4])
            .collect(),
        u: vec![vec![0.0]; 40],
        final_velocity: vec![15.0; 4],
        collision: false,
    };
    assert_eq!(msve(&perfect, 0.0, 4.0), 0.0);

    let mut off = perfect.clone();
    off.velocity[17][2] += 1e-3;
    assert!(msve(&off, 0.0, 4.0) > 0.0, "any deviation must register");

    println!(
        "criterion 9: PASS — fuel_rate(15,0) = 1.2216, nonpositive-resistance branch \
         pinned at 0.444, and MSVE is zero exactly on perfect tracking"
    );
}
