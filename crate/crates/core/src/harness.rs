//! Batch experiments: single-shot perturbation trials, servo task scenarios
//! and pooled summaries of their reports.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correspondence::{
    correspond, select_matches, CorrespondOpts, CorrespondenceError, Match,
};
use crate::descriptor::{extract, DescriptorError, DescriptorParams};
use crate::displacement::{
    estimate_displacement, Displacement, ErrorStats, EstimationMode, TrialRecord,
};
use crate::gel_sim::{render, ActuationNoise, ContactScene, PlantState, ScenePreset, SimError};
use crate::goal::{build_goal_spec, GoalError, GoalSpec, Thresholds};
use crate::sensor::SensorCalibration;
use crate::servo::{run_servo, ServoConfig, ServoError, ServoOutcome, ServoResult, SimPlant};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown scenario {0:?} (expected gear_insertion or block_alignment)")]
    UnknownScenario(String),
    #[error("no report files found in {0}")]
    NoReports(PathBuf),
    #[error("malformed report {path}: {reason}")]
    MalformedReport { path: PathBuf, reason: String },
    #[error(transparent)]
    Goal(#[from] GoalError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Servo(#[from] ServoError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Errors caused by bad input rather than by the pipeline itself.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            HarnessError::InvalidConfig(_)
                | HarnessError::UnknownScenario(_)
                | HarnessError::Json(_)
                | HarnessError::Goal(GoalError::Invalid(_) | GoalError::Json(_))
                | HarnessError::Sim(SimError::InvalidScene(_) | SimError::UnknownPreset(_))
        )
    }
}

/// A built-in preset or a scene JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneRef {
    Preset(String),
    Path(PathBuf),
}

impl Default for SceneRef {
    fn default() -> Self {
        SceneRef::Preset("gear".into())
    }
}

impl SceneRef {
    /// Scene plus its default keypoints (pixels), when known.
    pub fn resolve(
        &self,
        cal: &SensorCalibration,
    ) -> Result<(ContactScene, Option<Vec<(f64, f64)>>), HarnessError> {
        match self {
            SceneRef::Preset(name) => {
                let p = ScenePreset::by_name(name)?;
                let kps = p.keypoints_px(cal);
                Ok((p.scene, Some(kps)))
            }
            SceneRef::Path(path) => {
                let scene: ContactScene = serde_json::from_str(&std::fs::read_to_string(path)?)?;
                scene.validate()?;
                Ok((scene, None))
            }
        }
    }
}

fn check_half_range(name: &str, v: f64) -> Result<(), HarnessError> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(HarnessError::InvalidConfig(format!(
            "{name} must be finite and >= 0, got {v}"
        )))
    }
}

fn sample_offset(rng: &mut ChaCha8Rng, x: f64, z: f64, theta: f64) -> Displacement {
    let mut uniform = |h: f64| {
        if h > 0.0 {
            rng.random_range(-h..=h)
        } else {
            0.0
        }
    };
    let dx = uniform(x);
    let dz = uniform(z);
    let dt = uniform(theta);
    Displacement::new(dx, dz, dt)
}

/// Independent RNG stream for trial `i` of a run seeded with `seed`.
pub fn trial_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scene: SceneRef,
    /// Goal keypoints in pixels; defaults to the preset's.
    pub keypoints: Option<Vec<(f64, f64)>>,
    /// Use a stored goal instead of rendering one.
    pub goal_spec: Option<PathBuf>,
    pub trial_count: usize,
    /// Offsets are uniform in ±range.
    pub x_range_mm: f64,
    pub z_range_mm: f64,
    pub theta_range_rad: f64,
    pub seed: u64,
    pub noise_sigma: Option<f64>,
    /// Replaces sampling; trial `i` uses entry `i mod len`.
    pub forced_offsets: Option<Vec<Displacement>>,
    pub calibration: SensorCalibration,
    pub descriptor: DescriptorParams,
    pub correspondence: CorrespondOpts,
    pub mode: EstimationMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scene: SceneRef::default(),
            keypoints: None,
            goal_spec: None,
            trial_count: 10,
            x_range_mm: 5.0,
            z_range_mm: 5.0,
            theta_range_rad: 0.0,
            seed: 0,
            noise_sigma: None,
            forced_offsets: None,
            calibration: SensorCalibration::working(),
            descriptor: DescriptorParams::default(),
            correspondence: CorrespondOpts::default(),
            mode: EstimationMode::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.trial_count < 1 {
            return Err(HarnessError::InvalidConfig(
                "trial_count must be >= 1".into(),
            ));
        }
        check_half_range("x_range_mm", self.x_range_mm)?;
        check_half_range("z_range_mm", self.z_range_mm)?;
        check_half_range("theta_range_rad", self.theta_range_rad)?;
        if let Some(f) = &self.forced_offsets {
            if f.is_empty() || f.iter().any(|d| !d.is_finite()) {
                return Err(HarnessError::InvalidConfig(
                    "forced_offsets must be non-empty and finite".into(),
                ));
            }
        }
        if let Some(s) = self.noise_sigma {
            check_half_range("noise_sigma", s)?;
        }
        self.calibration.validate().map_err(GoalError::from)?;
        self.descriptor.validate()?;
        Ok(())
    }

    fn scene_and_goal(&self) -> Result<(ContactScene, GoalSpec), HarnessError> {
        let (mut scene, default_kps) = self.scene.resolve(&self.calibration)?;
        if let Some(s) = self.noise_sigma {
            scene.noise_sigma = s;
        }
        let goal = match &self.goal_spec {
            Some(path) => GoalSpec::load(path)?,
            None => {
                let kps = self.keypoints.clone().or(default_kps).ok_or_else(|| {
                    HarnessError::InvalidConfig("keypoints required for scene files".into())
                })?;
                build_goal_spec(
                    &scene,
                    &self.calibration,
                    kps,
                    0.0,
                    Thresholds::default(),
                    &self.descriptor,
                )?
            }
        };
        goal.validate(self.mode)?;
        Ok((scene, goal))
    }
}

/// One single-shot trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub real: Displacement,
    pub est: Option<Displacement>,
    pub err_mm: Option<f64>,
    /// Every match used was confident.
    pub confident: Option<bool>,
    pub n_iterations: usize,
    pub failure: Option<String>,
    pub matches: Vec<Match>,
    /// Where the goal keypoints truly are in this capture (pixels; may lie outside the image).
    pub true_points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSummary {
    pub trial_count: usize,
    pub n_ok: usize,
    pub n_failed: usize,
    pub d_error: Option<f64>,
    pub std_dev: Option<f64>,
    pub min_mm: Option<f64>,
    pub max_mm: Option<f64>,
    /// Sum of squared per-trial errors; lets summaries pool standard deviations.
    pub sum_sq_mm2: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationReport {
    pub trials: Vec<TrialResult>,
    pub stats: Option<ErrorStats>,
    pub summary: PerturbationSummary,
}

/// Single-shot displacement estimation under random object offsets.
pub fn run_perturbation_experiment(
    cfg: &ExperimentConfig,
) -> Result<PerturbationReport, HarnessError> {
    cfg.validate()?;
    let (scene, goal) = cfg.scene_and_goal()?;
    let cal = cfg.calibration;
    let goal_map = extract(&goal.goal_image, &cfg.descriptor)?;
    let goal_mm: Vec<(f64, f64)> = goal
        .goal_keypoints
        .points()
        .iter()
        .map(|&p| cal.px_to_frame(p))
        .collect();

    let trials: Vec<TrialResult> = (0..cfg.trial_count)
        .into_par_iter()
        .map(|i| -> Result<TrialResult, HarnessError> {
            let mut rng = trial_rng(cfg.seed, i);
            let real = match &cfg.forced_offsets {
                Some(f) => f[i % f.len()],
                None => sample_offset(
                    &mut rng,
                    cfg.x_range_mm,
                    cfg.z_range_mm,
                    cfg.theta_range_rad,
                ),
            };
            let image = render(&scene, &real, &cal, rng.next_u64())?;
            let true_points = goal_mm
                .iter()
                .map(|&p| cal.frame_to_px(real.apply(p)))
                .collect();
            let mut trial = TrialResult {
                trial: i,
                real,
                est: None,
                err_mm: None,
                confident: None,
                n_iterations: 1,
                failure: None,
                matches: Vec::new(),
                true_points,
            };
            let current = extract(&image, &cfg.descriptor)?;
            let matches = match correspond(
                &goal_map,
                &current,
                &goal.goal_keypoints,
                &cfg.correspondence,
            ) {
                Ok(m) => m,
                Err(
                    e @ (CorrespondenceError::NoContact | CorrespondenceError::VoidKeypoint { .. }),
                ) => {
                    trial.failure = Some(e.to_string());
                    return Ok(trial);
                }
                Err(CorrespondenceError::Descriptor(e)) => return Err(e.into()),
            };
            let min_k = cfg.mode.min_keypoints();
            let sel = select_matches(&matches, cfg.correspondence.exclude_low_confidence, min_k)
                .expect("matches are non-empty");
            match estimate_displacement(&sel.goal, &sel.current, &cal, cfg.mode) {
                Ok(est) => {
                    let d = est.displacement;
                    trial.err_mm = Some(
                        TrialRecord {
                            real: (real.dx_mm, real.dz_mm),
                            est: (d.dx_mm, d.dz_mm),
                        }
                        .error_mm(),
                    );
                    trial.est = Some(d);
                    let filtered = cfg.correspondence.exclude_low_confidence && !sel.low_confidence;
                    trial.confident = Some(filtered || matches.iter().all(|m| m.confident));
                }
                Err(e) => trial.failure = Some(e.to_string()),
            }
            trial.matches = matches;
            Ok(trial)
        })
        .collect::<Result<_, _>>()?;

    let errors: Vec<f64> = trials.iter().filter_map(|t| t.err_mm).collect();
    let stats = ErrorStats::from_errors(errors.clone()).ok();
    let summary = PerturbationSummary {
        trial_count: trials.len(),
        n_ok: errors.len(),
        n_failed: trials.len() - errors.len(),
        d_error: stats.as_ref().map(|s| s.d_error),
        std_dev: stats.as_ref().map(|s| s.std_dev),
        min_mm: errors.iter().copied().reduce(f64::min),
        max_mm: errors.iter().copied().reduce(f64::max),
        sum_sq_mm2: errors.iter().map(|e| e * e).sum(),
        seed: cfg.seed,
    };
    Ok(PerturbationReport {
        trials,
        stats,
        summary,
    })
}

pub const CSV_HEADER: [&str; 10] = [
    "trial",
    "real_x_mm",
    "real_z_mm",
    "real_theta_rad",
    "est_x_mm",
    "est_z_mm",
    "est_theta_rad",
    "err_mm",
    "confident",
    "n_iterations",
];

/// Per-trial CSV; failed trials leave the estimate columns empty.
pub fn write_trials_csv<W: Write>(trials: &[TrialResult], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for t in trials {
        w.write_record([
            t.trial.to_string(),
            t.real.dx_mm.to_string(),
            t.real.dz_mm.to_string(),
            t.real.dtheta_rad.to_string(),
            opt(t.est.map(|d| d.dx_mm)),
            opt(t.est.map(|d| d.dz_mm)),
            opt(t.est.map(|d| d.dtheta_rad)),
            opt(t.err_mm),
            t.confident.map(|c| c.to_string()).unwrap_or_default(),
            t.n_iterations.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Recomputes error statistics from a trials CSV (rows with empty `err_mm` skipped).
pub fn stats_from_csv<R: std::io::Read>(input: R) -> Result<Option<ErrorStats>, HarnessError> {
    let mut r = csv::Reader::from_reader(input);
    let mut errors = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = rec.get(7).unwrap_or("");
        if !field.is_empty() {
            errors.push(
                field.parse::<f64>().map_err(|e| {
                    HarnessError::InvalidConfig(format!("bad err_mm {field:?}: {e}"))
                })?,
            );
        }
    }
    Ok(ErrorStats::from_errors(errors).ok())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    GearInsertion,
    BlockAlignment,
}

impl Scenario {
    pub fn parse(name: &str) -> Result<Self, HarnessError> {
        match name {
            "gear_insertion" => Ok(Scenario::GearInsertion),
            "block_alignment" => Ok(Scenario::BlockAlignment),
            other => Err(HarnessError::UnknownScenario(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::GearInsertion => "gear_insertion",
            Scenario::BlockAlignment => "block_alignment",
        }
    }

    pub fn preset(self) -> ScenePreset {
        let name = match self {
            Scenario::GearInsertion => "gear",
            Scenario::BlockAlignment => "block",
        };
        ScenePreset::by_name(name).expect("built-in preset")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub trial_count: usize,
    pub x_range_mm: f64,
    pub z_range_mm: f64,
    pub theta_range_rad: f64,
    /// Extra trials whose x offset is drawn from `±[lo, hi]` mm, pushing the
    /// object across the window edge.
    pub boundary_trials: usize,
    pub boundary_x_mm: [f64; 2],
    pub seed: u64,
    /// Image noise; the preset's default when unset.
    pub noise_sigma: Option<f64>,
    pub actuation_noise: ActuationNoise,
    pub calibration: SensorCalibration,
    pub thresholds: Thresholds,
    pub servo: ServoConfig,
    /// Ground-truth tolerance for calling a trial successful.
    pub tolerance_mm: f64,
    pub tolerance_rad: f64,
    pub keep_results: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            trial_count: 20,
            x_range_mm: 5.0,
            z_range_mm: 5.0,
            theta_range_rad: 10f64.to_radians(),
            boundary_trials: 0,
            boundary_x_mm: [7.0, 10.0],
            seed: 0,
            noise_sigma: Some(0.0),
            actuation_noise: ActuationNoise::default(),
            calibration: SensorCalibration::working(),
            thresholds: Thresholds::default(),
            servo: ServoConfig::default(),
            tolerance_mm: 1.0,
            tolerance_rad: 2f64.to_radians(),
            keep_results: true,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.trial_count + self.boundary_trials < 1 {
            return Err(HarnessError::InvalidConfig(
                "trial_count must be >= 1".into(),
            ));
        }
        check_half_range("x_range_mm", self.x_range_mm)?;
        check_half_range("z_range_mm", self.z_range_mm)?;
        check_half_range("theta_range_rad", self.theta_range_rad)?;
        let [lo, hi] = self.boundary_x_mm;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return Err(HarnessError::InvalidConfig(
                "boundary_x_mm must satisfy 0 <= lo <= hi".into(),
            ));
        }
        if !(self.tolerance_mm > 0.0 && self.tolerance_rad > 0.0) {
            return Err(HarnessError::InvalidConfig("tolerances must be > 0".into()));
        }
        self.servo.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuccessCount {
    pub trials: usize,
    pub successes: usize,
    pub success_rate: Option<f64>,
}

impl SuccessCount {
    fn add(&mut self, ok: bool) {
        self.trials += 1;
        self.successes += ok as usize;
        self.success_rate = Some(self.successes as f64 / self.trials as f64);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: String,
    pub seed: u64,
    pub overall: SuccessCount,
    /// Trials where some iteration estimated from low-confidence matches.
    pub flagged: SuccessCount,
    pub unflagged: SuccessCount,
    /// Number of iterations → number of trials.
    pub iteration_histogram: BTreeMap<usize, usize>,
    pub outcomes: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioReport {
    pub trials: Vec<TrialResult>,
    pub results: Vec<ServoResult>,
    pub summary: ScenarioSummary,
}

/// Full servo loop per trial; success is judged on the ground-truth residual.
pub fn run_task_scenario(
    scenario: Scenario,
    cfg: &ScenarioConfig,
) -> Result<ScenarioReport, HarnessError> {
    cfg.validate()?;
    let preset = scenario.preset();
    let cal = cfg.calibration;
    let mut scene = preset.scene.clone();
    if let Some(s) = cfg.noise_sigma {
        scene.noise_sigma = s;
    }
    let goal = build_goal_spec(
        &scene,
        &cal,
        preset.keypoints_px(&cal),
        0.0,
        cfg.thresholds,
        &cfg.servo.descriptor,
    )?;
    let goal_mm: Vec<(f64, f64)> = preset.keypoints_mm.clone();
    let total = cfg.trial_count + cfg.boundary_trials;

    let runs: Vec<(TrialResult, ServoResult)> = (0..total)
        .into_par_iter()
        .map(|i| -> Result<_, HarnessError> {
            let mut rng = trial_rng(cfg.seed, i);
            let mut real = sample_offset(
                &mut rng,
                cfg.x_range_mm,
                cfg.z_range_mm,
                cfg.theta_range_rad,
            );
            if i >= cfg.trial_count {
                let [lo, hi] = cfg.boundary_x_mm;
                let mag = if hi > lo {
                    rng.random_range(lo..=hi)
                } else {
                    lo
                };
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                real = Displacement::new(sign * mag, real.dz_mm, real.dtheta_rad);
            }
            let state = PlantState::new(scene.clone(), real, cfg.actuation_noise, rng.next_u64())?;
            let mut plant = SimPlant::new(state, cal);
            let result = run_servo(&goal, &mut plant, &cfg.servo)?;
            let est = plant.state.commanded();
            let residual = plant.state.residual();
            let ok = residual.translation_norm() < cfg.tolerance_mm
                && residual.dtheta_rad.abs() < cfg.tolerance_rad;
            let trial = TrialResult {
                trial: i,
                real,
                est: Some(est),
                err_mm: Some(
                    TrialRecord {
                        real: (real.dx_mm, real.dz_mm),
                        est: (est.dx_mm, est.dz_mm),
                    }
                    .error_mm(),
                ),
                confident: Some(!result.any_low_confidence()),
                n_iterations: result.iterations.len(),
                failure: (!ok).then(|| format!("{:?}", result.outcome)),
                matches: result
                    .iterations
                    .first()
                    .map(|it| it.matches.clone())
                    .unwrap_or_default(),
                true_points: goal_mm
                    .iter()
                    .map(|&p| cal.frame_to_px(real.apply(p)))
                    .collect(),
            };
            Ok((trial, result))
        })
        .collect::<Result<_, _>>()?;

    let mut summary = ScenarioSummary {
        scenario: scenario.name().to_string(),
        seed: cfg.seed,
        overall: SuccessCount::default(),
        flagged: SuccessCount::default(),
        unflagged: SuccessCount::default(),
        iteration_histogram: BTreeMap::new(),
        outcomes: BTreeMap::new(),
    };
    for (trial, result) in &runs {
        let ok = trial.failure.is_none();
        summary.overall.add(ok);
        if result.any_low_confidence() {
            summary.flagged.add(ok);
        } else {
            summary.unflagged.add(ok);
        }
        *summary
            .iteration_histogram
            .entry(result.iterations.len())
            .or_default() += 1;
        let key = serde_json::to_value(result.outcome)?
            .as_str()
            .unwrap_or_default()
            .to_string();
        *summary.outcomes.entry(key).or_default() += 1;
    }
    let (trials, mut results): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
    if !cfg.keep_results {
        results.clear();
    }
    Ok(ScenarioReport {
        trials,
        results,
        summary,
    })
}

impl ScenarioSummary {
    pub fn outcome_count(&self, outcome: ServoOutcome) -> usize {
        let key = serde_json::to_value(outcome).ok();
        key.and_then(|k| k.as_str().and_then(|s| self.outcomes.get(s).copied()))
            .unwrap_or(0)
    }
}

/// Summary document written next to the per-trial CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Report {
    Perturbation(PerturbationSummary),
    Scenario(ScenarioSummary),
}

// Parses through a JSON value so integer histogram keys survive the tag lookup.
impl<'de> Deserialize<'de> for Report {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let v = serde_json::Value::deserialize(d)?;
        let kind = v
            .get("kind")
            .and_then(|k| k.as_str())
            .ok_or_else(|| D::Error::missing_field("kind"))?;
        match kind {
            "perturbation" => serde_json::from_value(v)
                .map(Report::Perturbation)
                .map_err(D::Error::custom),
            "scenario" => serde_json::from_value(v)
                .map(Report::Scenario)
                .map_err(D::Error::custom),
            other => Err(D::Error::unknown_variant(
                other,
                &["perturbation", "scenario"],
            )),
        }
    }
}

/// Writes `trials.csv` and `summary.json` into `dir`.
pub fn write_report(
    dir: &Path,
    trials: &[TrialResult],
    report: &Report,
) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    write_trials_csv(trials, std::fs::File::create(dir.join("trials.csv"))?)?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    std::fs::write(dir.join("summary.json"), json)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledSummary {
    pub reports: usize,
    pub trial_count: usize,
    pub n_ok: usize,
    pub d_error: Option<f64>,
    pub std_dev: Option<f64>,
    pub min_mm: Option<f64>,
    pub max_mm: Option<f64>,
    pub servo_trials: usize,
    pub servo_successes: usize,
    pub success_rate: Option<f64>,
    pub sources: Vec<PathBuf>,
}

fn collect_report_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, HarnessError> {
    let mut paths = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(input)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            if found.is_empty() {
                return Err(HarnessError::NoReports(input.clone()));
            }
            found.sort();
            paths.extend(found);
        } else {
            paths.push(input.clone());
        }
    }
    if paths.is_empty() {
        return Err(HarnessError::NoReports(PathBuf::from(".")));
    }
    Ok(paths)
}

/// Pools perturbation statistics (N-weighted) and servo success counts.
pub fn summarize(inputs: &[PathBuf]) -> Result<PooledSummary, HarnessError> {
    let paths = collect_report_paths(inputs)?;
    let mut out = PooledSummary {
        reports: paths.len(),
        trial_count: 0,
        n_ok: 0,
        d_error: None,
        std_dev: None,
        min_mm: None,
        max_mm: None,
        servo_trials: 0,
        servo_successes: 0,
        success_rate: None,
        sources: paths.clone(),
    };
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for path in &paths {
        let malformed = |reason: String| HarnessError::MalformedReport {
            path: path.clone(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| malformed(e.to_string()))?;
        let report: Report = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
        match report {
            Report::Perturbation(p) => {
                if p.n_ok > 0 && p.d_error.is_none() {
                    return Err(malformed("n_ok > 0 but d_error missing".into()));
                }
                out.trial_count += p.trial_count;
                out.n_ok += p.n_ok;
                sum += p.d_error.unwrap_or(0.0) * p.n_ok as f64;
                sum_sq += p.sum_sq_mm2;
                out.min_mm = match (out.min_mm, p.min_mm) {
                    (Some(a), Some(b)) => Some(a.min(b)),
                    (a, b) => a.or(b),
                };
                out.max_mm = match (out.max_mm, p.max_mm) {
                    (Some(a), Some(b)) => Some(a.max(b)),
                    (a, b) => a.or(b),
                };
            }
            Report::Scenario(s) => {
                out.servo_trials += s.overall.trials;
                out.servo_successes += s.overall.successes;
            }
        }
    }
    if out.n_ok > 0 {
        let n = out.n_ok as f64;
        let mean = sum / n;
        out.d_error = Some(mean);
        out.std_dev = Some((sum_sq / n - mean * mean).max(0.0).sqrt());
    }
    if out.servo_trials > 0 {
        out.success_rate = Some(out.servo_successes as f64 / out.servo_trials as f64);
    }
    Ok(out)
}

impl fmt::Display for PooledSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mm = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        writeln!(f, "{:<16}{:>12}", "reports", self.reports)?;
        writeln!(f, "{:<16}{:>12}", "trials", self.trial_count)?;
        writeln!(f, "{:<16}{:>12}", "ok", self.n_ok)?;
        writeln!(f, "{:<16}{:>12}", "mean_mm", mm(self.d_error))?;
        writeln!(f, "{:<16}{:>12}", "std_mm", mm(self.std_dev))?;
        writeln!(f, "{:<16}{:>12}", "min_mm", mm(self.min_mm))?;
        writeln!(f, "{:<16}{:>12}", "max_mm", mm(self.max_mm))?;
        writeln!(f, "{:<16}{:>12}", "servo_trials", self.servo_trials)?;
        writeln!(f, "{:<16}{:>12}", "servo_success", self.servo_successes)?;
        write!(f, "{:<16}{:>12}", "success_rate", mm(self.success_rate))
    }
}
