//! The run-description format: one JSON document per experiment, carrying
//! the plant layout, controller tuning, scenario, and artifact paths.

use std::path::PathBuf;

use deep_lcc::deepc::DeepLccConfig;
use deep_lcc::experiments::{compute_metrics, ControllerArm, ExperimentError, RunLog, RunMetrics, ScenarioSpec};
use deep_lcc::traffic::{HdvParams, MixedConfig, TrafficError};

/// Everything a run needs, in one flat document. `hdv_params` may be omitted
/// to put the nominal driver in every human slot; all other fields are
/// spelled out so two configs diff cleanly.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    /// Following vehicles behind the head.
    pub n: usize,
    /// 1-based CAV positions, strictly increasing.
    pub cav_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hdv_params: Option<Vec<HdvParams>>,
    /// Arm exercised by `run`.
    pub controller: ControllerArm,
    /// Arms compared by `batch`.
    pub arms: Vec<ControllerArm>,
    pub tuning: DeepLccConfig,
    pub scenario: ScenarioSpec,
    /// Sampling interval (s), shared by collection and control.
    pub dt: f64,
    /// Where `collect` writes and `run` reads the trajectory dataset.
    pub dataset: PathBuf,
    /// Where run artifacts land unless `--out` overrides.
    pub output_dir: PathBuf,
    /// Seed list: `run`/`collect` take the first, `batch` uses all.
    pub seeds: Vec<u64>,
    /// Offline dataset length in samples.
    pub collect_length: usize,
}

impl RunConfig {
    pub fn plant(&self) -> Result<MixedConfig, TrafficError> {
        let humans = self.n.saturating_sub(self.cav_indices.len());
        let params = match &self.hdv_params {
            Some(p) => p.clone(),
            None => vec![HdvParams::nominal(); humans],
        };
        MixedConfig::new(self.n, self.cav_indices.clone(), params)
    }

    /// Cross-field consistency; every command runs this before touching the
    /// filesystem.
    pub fn validate(&self) -> Result<(), String> {
        self.plant().map_err(|e| e.to_string())?;
        self.tuning.validate().map_err(|e| e.to_string())?;
        self.scenario
            .validate(HdvParams::nominal().v_max)
            .map_err(|e| e.to_string())?;
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(format!("dt must be positive and finite, got {}", self.dt));
        }
        if self.seeds.is_empty() {
            return Err("seeds must not be empty".into());
        }
        if self.arms.is_empty() {
            return Err("arms must not be empty".into());
        }
        let floor = self.tuning.t_ini + self.tuning.horizon;
        if self.collect_length < floor {
            return Err(format!(
                "collect_length {} cannot even hold one past+future window ({floor})",
                self.collect_length
            ));
        }
        Ok(())
    }
}

/// What `check` prints: the structural analysis of the linearized platoon at
/// the scenario's base velocity.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct CheckOutput {
    pub v_star: f64,
    pub s_star: Vec<f64>,
    pub controllable: bool,
    pub controllability_rank: usize,
    pub uncontrollable_mode_count: usize,
    pub stabilizable: bool,
    pub observable: bool,
    pub combined_input_controllable: bool,
    pub stability_condition_value: Option<f64>,
}

/// Rebuilds a [`RunLog`] from the CSV written by `run`, plus the fuel-rate
/// columns verbatim. The CSV has no row for the state after the last step,
/// so the final sample's acceleration is lost; the returned log repeats the
/// last velocities, and callers should prefer the fuel columns, which were
/// rendered with the true accelerations.
pub fn parse_trajectory_csv(text: &str) -> Result<(RunLog, Vec<Vec<f64>>), String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty trajectory file")?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"t") || cols.get(1) != Some(&"v0") {
        return Err(format!("unexpected header start: {header}"));
    }
    let n = cols.iter().filter(|c| c.starts_with("s_")).count();
    let m = cols.iter().filter(|c| c.starts_with("u_")).count();
    let fuel = cols.iter().filter(|c| c.starts_with("fuel_rate_")).count();
    let expect = 2 + 2 * n + m + fuel;
    if n == 0 || cols.len() != expect {
        return Err(format!(
            "header has {} columns, expected {expect} (n={n}, m={m})",
            cols.len()
        ));
    }

    let mut t = Vec::new();
    let mut v0 = Vec::new();
    let mut spacing = Vec::new();
    let mut velocity = Vec::new();
    let mut u = Vec::new();
    let mut fuel_cols = Vec::new();
    for (row, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let vals = line
            .split(',')
            .map(|x| x.parse::<f64>().map_err(|e| format!("row {}: {e}", row + 2)))
            .collect::<Result<Vec<f64>, String>>()?;
        if vals.len() != expect {
            return Err(format!(
                "row {} has {} fields, expected {expect}",
                row + 2,
                vals.len()
            ));
        }
        t.push(vals[0]);
        v0.push(vals[1]);
        spacing.push(vals[2..2 + n].to_vec());
        velocity.push(vals[2 + n..2 + 2 * n].to_vec());
        u.push(vals[2 + 2 * n..2 + 2 * n + m].to_vec());
        fuel_cols.push(vals[2 + 2 * n + m..].to_vec());
    }
    if t.len() < 2 {
        return Err(format!("need at least 2 rows to recover dt, got {}", t.len()));
    }
    let dt = t[1] - t[0];
    if !(dt.is_finite() && dt > 0.0) {
        return Err(format!("non-increasing time column: dt = {dt}"));
    }
    let final_velocity = velocity.last().cloned().unwrap_or_default();
    let log = RunLog {
        dt,
        t,
        v0,
        spacing,
        velocity,
        u,
        final_velocity,
        collision: false,
    };
    Ok((log, fuel_cols))
}

/// Metrics from a parsed trajectory. Fuel for vehicles 3..n comes from the
/// CSV's own rate columns (exact); the first two vehicles fall back to the
/// reconstructed accelerations, which zero out the final sample.
pub fn recompute_metrics(
    log: &RunLog,
    fuel_cols: &[Vec<f64>],
    plant: &MixedConfig,
    tuning: &DeepLccConfig,
    v_ref: f64,
) -> Result<RunMetrics, ExperimentError> {
    let mut metrics = compute_metrics(log, plant, tuning, v_ref, 0)?;
    for i in 2..plant.n {
        let mut total = 0.0;
        for row in fuel_cols {
            total += row[i - 2] * log.dt;
        }
        metrics.total_fuel[i] = total;
    }
    metrics.fuel_tail = metrics.total_fuel.iter().skip(2).sum();
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use deep_lcc::experiments::{default_sinusoid, run_experiment, trajectory_csv};

    fn sample() -> RunConfig {
        RunConfig {
            n: 8,
            cav_indices: vec![3, 6],
            hdv_params: None,
            controller: ControllerArm::Deepc,
            arms: vec![ControllerArm::AllHdv, ControllerArm::Deepc],
            tuning: DeepLccConfig::default(),
            scenario: default_sinusoid(),
            dt: 0.05,
            dataset: PathBuf::from("data/dataset.json"),
            output_dir: PathBuf::from("out"),
            seeds: vec![1, 2, 3],
            collect_length: 800,
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = sample();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);

        let explicit = RunConfig {
            hdv_params: Some(vec![HdvParams::nominal(); 6]),
            ..sample()
        };
        let text = serde_json::to_string(&explicit).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, explicit);
    }

    #[test]
    fn validation_pins_each_field() {
        assert!(sample().validate().is_ok());

        let mut bad = sample();
        bad.cav_indices = vec![0, 6];
        assert!(bad.validate().is_err());

        let mut bad = sample();
        bad.hdv_params = Some(vec![HdvParams::nominal(); 3]);
        assert!(bad.validate().is_err());

        let mut bad = sample();
        bad.dt = 0.0;
        assert!(bad.validate().is_err());

        let mut bad = sample();
        bad.seeds.clear();
        assert!(bad.validate().is_err());

        let mut bad = sample();
        bad.arms.clear();
        assert!(bad.validate().is_err());

        let mut bad = sample();
        bad.collect_length = 30;
        assert!(bad.validate().is_err());

        let mut bad = sample();
        bad.tuning.s_min = 50.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn omitted_drivers_mean_nominal() {
        let plant = sample().plant().unwrap();
        assert_eq!(plant.hdv_params, vec![HdvParams::nominal(); 6]);
    }

    #[test]
    fn csv_round_trip_recovers_the_log_bitwise() {
        let cfg = sample();
        let plant = cfg.plant().unwrap();
        let mut scenario = cfg.scenario.clone();
        scenario.duration = 3.0;
        let run = run_experiment(
            &plant,
            &scenario,
            ControllerArm::AllHdv,
            &cfg.tuning,
            None,
            cfg.dt,
            9,
        )
        .unwrap();
        let text = trajectory_csv(&run.log);
        let (log, fuel_cols) = parse_trajectory_csv(&text).unwrap();

        assert_eq!(log.t, run.log.t);
        assert_eq!(log.v0, run.log.v0);
        assert_eq!(log.spacing, run.log.spacing);
        assert_eq!(log.velocity, run.log.velocity);
        assert_eq!(log.u, run.log.u);
        assert_eq!(log.dt, run.log.dt);
        assert_eq!(fuel_cols.len(), run.log.steps());
        assert_eq!(fuel_cols[0].len(), plant.n - 2);

        let v_ref = scenario.head_profile.base_velocity();
        let again = recompute_metrics(&log, &fuel_cols, &plant, &cfg.tuning, v_ref).unwrap();
        assert_eq!(again.fuel_tail, run.metrics.fuel_tail);
        assert_eq!(again.realized_cost, run.metrics.realized_cost);
        assert_eq!(again.msve, run.metrics.msve);
        assert_eq!(again.min_cav_spacing, run.metrics.min_cav_spacing);
        assert_eq!(again.peak_velocity_error, run.metrics.peak_velocity_error);
        assert_eq!(again.total_fuel[2..], run.metrics.total_fuel[2..]);
    }

    #[test]
    fn truncated_rows_are_rejected() {
        assert!(parse_trajectory_csv("").is_err());
        assert!(parse_trajectory_csv("a,b\n1,2\n").is_err());
        let good_header = "t,v0,s_1,v_1,u_1\n";
        assert!(parse_trajectory_csv(&format!("{good_header}0,15,20,15\n")).is_err());
        assert!(parse_trajectory_csv(&format!("{good_header}0,15,20,15,0\n")).is_err());
    }
}
