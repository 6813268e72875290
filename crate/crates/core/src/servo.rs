//! Capture → descriptors → correspondence → displacement → threshold test →
//! adjust, repeated until the estimated displacement is small enough.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correspondence::{
    correspond, select_matches, CorrespondOpts, CorrespondenceError, Match,
};
use crate::descriptor::{extract, DescriptorError, DescriptorMap, DescriptorParams};
use crate::displacement::{
    displacement_norm, estimate_displacement, Displacement, DisplacementError, EstimationMode,
    ThresholdTest, DEFAULT_R_CHAR_MM,
};
use crate::gel_sim::{PlantState, SimError};
use crate::goal::{GoalError, GoalSpec};
use crate::sensor::{KeypointSet, SensorCalibration, TactileImage};

#[derive(Debug, Error)]
pub enum ServoError {
    #[error("invalid servo config: {0}")]
    InvalidConfig(String),
    #[error("plant has no ground truth; oracle correspondences unavailable")]
    NoOracle,
    #[error(transparent)]
    Goal(#[from] GoalError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Correspondence(#[from] CorrespondenceError),
    #[error(transparent)]
    Displacement(#[from] DisplacementError),
}

/// Where the current keypoints come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrespondenceSource {
    #[default]
    Descriptor,
    /// Goal keypoints pushed through the plant's true capture pose.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServoConfig {
    pub max_iterations: usize,
    pub descriptor: DescriptorParams,
    pub correspondence: CorrespondOpts,
    pub mode: EstimationMode,
    /// Estimate from confident matches only, when enough of them remain.
    pub require_confident: bool,
    pub threshold_test: ThresholdTest,
    /// Radius used when reporting |ΔP| as a single number.
    pub r_char_mm: f64,
    pub correspondence_source: CorrespondenceSource,
    /// Accept a translation-only fallback when the rigid fit is degenerate.
    pub degenerate_fallback: bool,
    /// Keep every captured image in the result.
    pub keep_images: bool,
}

impl Default for ServoConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5,
            descriptor: DescriptorParams::default(),
            correspondence: CorrespondOpts::default(),
            mode: EstimationMode::default(),
            require_confident: false,
            threshold_test: ThresholdTest::default(),
            r_char_mm: DEFAULT_R_CHAR_MM,
            correspondence_source: CorrespondenceSource::default(),
            degenerate_fallback: true,
            keep_images: false,
        }
    }
}

impl ServoConfig {
    pub fn validate(&self) -> Result<(), ServoError> {
        if self.max_iterations < 1 {
            return Err(ServoError::InvalidConfig(
                "max_iterations must be >= 1".into(),
            ));
        }
        if !(self.r_char_mm.is_finite() && self.r_char_mm > 0.0) {
            return Err(ServoError::InvalidConfig("r_char_mm must be > 0".into()));
        }
        if let ThresholdTest::Combined { r_char_mm, tau_mm } = self.threshold_test {
            if !(r_char_mm > 0.0 && tau_mm > 0.0) {
                return Err(ServoError::InvalidConfig(
                    "combined threshold needs r_char_mm > 0 and tau_mm > 0".into(),
                ));
            }
        }
        self.descriptor.validate()?;
        Ok(())
    }
}

/// Anything that can be grasped, imaged and re-grasped.
pub trait Plant {
    fn calibration(&self) -> &SensorCalibration;
    fn capture(&mut self) -> Result<TactileImage, ServoError>;
    fn adjust(&mut self, delta: &Displacement);
    /// ΔP that would bring the next grasp exactly onto the goal, if known.
    fn ground_truth_residual(&self) -> Option<Displacement>;
    /// Where the goal keypoints (frame mm) appeared in the most recent capture.
    fn true_keypoints_mm(&self, goal_mm: &[(f64, f64)]) -> Option<Vec<(f64, f64)>>;
}

/// [`PlantState`] bound to a sensor calibration.
#[derive(Clone, Debug)]
pub struct SimPlant {
    pub state: PlantState,
    pub cal: SensorCalibration,
}

impl SimPlant {
    pub fn new(state: PlantState, cal: SensorCalibration) -> Self {
        Self { state, cal }
    }
}

impl Plant for SimPlant {
    fn calibration(&self) -> &SensorCalibration {
        &self.cal
    }

    fn capture(&mut self) -> Result<TactileImage, ServoError> {
        Ok(self.state.capture(&self.cal)?)
    }

    fn adjust(&mut self, delta: &Displacement) {
        self.state.apply_adjustment(delta);
    }

    fn ground_truth_residual(&self) -> Option<Displacement> {
        Some(self.state.residual())
    }

    fn true_keypoints_mm(&self, goal_mm: &[(f64, f64)]) -> Option<Vec<(f64, f64)>> {
        let pose = self.state.last_capture_pose()?;
        Some(goal_mm.iter().map(|&p| pose.apply(p)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServoOutcome {
    Success,
    MaxIterationsExceeded,
    NoContact,
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    /// Index into [`ServoResult::images`] when images are kept.
    pub image_index: Option<usize>,
    pub matches: Vec<Match>,
    pub delta: Option<Displacement>,
    pub delta_norm_mm: Option<f64>,
    pub degenerate: bool,
    pub low_confidence: bool,
    /// Ground-truth residual at capture time.
    pub residual: Option<Displacement>,
    pub residual_mm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServoResult {
    pub outcome: ServoOutcome,
    pub iterations: Vec<IterationRecord>,
    /// Ground-truth residual norm at termination, when the plant knows it.
    pub final_residual_mm: Option<f64>,
    pub final_residual: Option<Displacement>,
    #[serde(skip)]
    pub images: Vec<TactileImage>,
}

impl ServoResult {
    pub fn succeeded(&self) -> bool {
        self.outcome == ServoOutcome::Success
    }

    /// True when any iteration estimated from low-confidence matches.
    pub fn any_low_confidence(&self) -> bool {
        self.iterations.iter().any(|it| it.low_confidence)
    }
}

fn oracle_matches(plant: &dyn Plant, goal_kps: &KeypointSet) -> Result<Vec<Match>, ServoError> {
    let cal = *plant.calibration();
    let goal_mm: Vec<(f64, f64)> = goal_kps
        .points()
        .iter()
        .map(|&p| cal.px_to_frame(p))
        .collect();
    let cur_mm = plant
        .true_keypoints_mm(&goal_mm)
        .ok_or(ServoError::NoOracle)?;
    Ok(goal_kps
        .points()
        .iter()
        .zip(cur_mm)
        .map(|(&g, c)| Match {
            goal_point: g,
            found_point: cal.frame_to_px(c),
            similarity: 1.0,
            ratio: f64::INFINITY,
            confident: true,
            goal_clamped: false,
        })
        .collect())
}

/// Runs the loop against `plant` until success, abort or the iteration cap.
pub fn run_servo(
    goal: &GoalSpec,
    plant: &mut dyn Plant,
    cfg: &ServoConfig,
) -> Result<ServoResult, ServoError> {
    cfg.validate()?;
    goal.validate(cfg.mode)?;
    let cal = *goal.calibration();
    let goal_map: Option<DescriptorMap> = match cfg.correspondence_source {
        CorrespondenceSource::Descriptor => Some(extract(&goal.goal_image, &cfg.descriptor)?),
        CorrespondenceSource::GroundTruth => None,
    };
    let confident_only = cfg.require_confident || cfg.correspondence.exclude_low_confidence;
    let thresholds = goal.thresholds();

    let mut iterations = Vec::new();
    let mut images = Vec::new();
    let mut outcome = ServoOutcome::MaxIterationsExceeded;

    for iteration in 1..=cfg.max_iterations {
        let image = plant.capture()?;
        let residual = plant.ground_truth_residual();
        let mut record = IterationRecord {
            iteration,
            image_index: None,
            matches: Vec::new(),
            delta: None,
            delta_norm_mm: None,
            degenerate: false,
            low_confidence: false,
            residual,
            residual_mm: residual.map(|r| displacement_norm(&r, cfg.r_char_mm)),
        };

        let matches = match &goal_map {
            Some(gm) => {
                let current = extract(&image, &cfg.descriptor)?;
                match correspond(gm, &current, &goal.goal_keypoints, &cfg.correspondence) {
                    Ok(m) => Ok(m),
                    Err(CorrespondenceError::NoContact) => Err(()),
                    Err(e) => return Err(e.into()),
                }
            }
            None => Ok(oracle_matches(plant, &goal.goal_keypoints)?),
        };
        if cfg.keep_images {
            record.image_index = Some(images.len());
            images.push(image);
        }
        let Ok(matches) = matches else {
            iterations.push(record);
            outcome = ServoOutcome::NoContact;
            break;
        };

        let selection = select_matches(&matches, confident_only, cfg.mode.min_keypoints())
            .expect("matches are non-empty");
        record.matches = matches;
        record.low_confidence = selection.low_confidence;
        let est = estimate_displacement(&selection.goal, &selection.current, &cal, cfg.mode)?;
        record.degenerate = est.degenerate;
        if est.degenerate && !cfg.degenerate_fallback {
            iterations.push(record);
            outcome = ServoOutcome::Degenerate;
            break;
        }
        let delta = est.displacement;
        record.delta = Some(delta);
        record.delta_norm_mm = Some(displacement_norm(&delta, cfg.r_char_mm));
        iterations.push(record);

        if cfg
            .threshold_test
            .passes(&delta, thresholds.translation_mm, thresholds.rotation_rad)
        {
            outcome = ServoOutcome::Success;
            break;
        }
        plant.adjust(&delta);
    }

    let final_residual = plant.ground_truth_residual();
    Ok(ServoResult {
        outcome,
        iterations,
        final_residual_mm: final_residual.map(|r| displacement_norm(&r, cfg.r_char_mm)),
        final_residual,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gel_sim::{ActuationNoise, ScenePreset};
    use crate::goal::{build_goal_spec, Thresholds};

    fn goal_for(preset: &ScenePreset, cal: &SensorCalibration) -> GoalSpec {
        build_goal_spec(
            &preset.scene.clone().with_noise(0.0),
            cal,
            preset.keypoints_px(cal),
            30.0,
            Thresholds::default(),
            &DescriptorParams::default(),
        )
        .unwrap()
    }

    fn plant(preset: &ScenePreset, offset: Displacement, seed: u64) -> SimPlant {
        let state = PlantState::new(
            preset.scene.clone().with_noise(0.0),
            offset,
            ActuationNoise::default(),
            seed,
        )
        .unwrap();
        SimPlant::new(state, SensorCalibration::working())
    }

    #[test]
    fn already_at_goal_succeeds_first_iteration() {
        let preset = ScenePreset::by_name("gear").unwrap();
        let cal = SensorCalibration::working();
        let goal = goal_for(&preset, &cal);
        let mut p = plant(&preset, Displacement::IDENTITY, 1);
        let res = run_servo(&goal, &mut p, &ServoConfig::default()).unwrap();
        assert_eq!(res.outcome, ServoOutcome::Success);
        assert_eq!(res.iterations.len(), 1);
        let d = res.iterations[0].delta.unwrap();
        assert!(
            d.translation_norm() < 1e-3 && d.dtheta_rad.abs() < 1e-4,
            "{d:?}"
        );
    }

    #[test]
    fn oracle_route_converges_in_two() {
        let preset = ScenePreset::by_name("gear").unwrap();
        let cal = SensorCalibration::working();
        let goal = goal_for(&preset, &cal);
        let cfg = ServoConfig {
            correspondence_source: CorrespondenceSource::GroundTruth,
            ..ServoConfig::default()
        };
        for offset in [
            Displacement::new(4.0, -3.0, 0.15),
            Displacement::new(-5.0, 5.0, -0.17),
            Displacement::new(0.3, 0.0, 0.0),
        ] {
            let mut p = plant(&preset, offset, 2);
            let res = run_servo(&goal, &mut p, &cfg).unwrap();
            assert_eq!(res.outcome, ServoOutcome::Success, "{offset:?}");
            assert!(res.iterations.len() <= 2);
            assert!(res.final_residual_mm.unwrap() < 1e-9);
        }
    }

    #[test]
    fn object_outside_window_is_no_contact() {
        let preset = ScenePreset::by_name("block").unwrap();
        let cal = SensorCalibration::working();
        let goal = goal_for(&preset, &cal);
        let mut p = plant(&preset, Displacement::new(60.0, 0.0, 0.0), 3);
        let res = run_servo(&goal, &mut p, &ServoConfig::default()).unwrap();
        assert_eq!(res.outcome, ServoOutcome::NoContact);
        assert_eq!(res.iterations.len(), 1);
        assert!(res.iterations[0].delta.is_none());
    }

    #[test]
    fn descriptor_route_reduces_residual() {
        let preset = ScenePreset::by_name("gear").unwrap();
        let cal = SensorCalibration::working();
        let goal = goal_for(&preset, &cal);
        let mut p = plant(&preset, Displacement::new(3.0, -2.0, 0.1), 4);
        let res = run_servo(&goal, &mut p, &ServoConfig::default()).unwrap();
        let first = res.iterations[0].residual_mm.unwrap();
        assert!(res.final_residual_mm.unwrap() < first / 4.0, "{res:?}");
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let preset = ScenePreset::by_name("gear").unwrap();
        let cal = SensorCalibration::working();
        let goal = goal_for(&preset, &cal);
        let run = || {
            let state = PlantState::new(
                preset.scene.clone(),
                Displacement::new(-2.0, 1.5, 0.05),
                ActuationNoise {
                    x_mm: 0.05,
                    z_mm: 0.05,
                    theta_rad: 0.002,
                },
                99,
            )
            .unwrap();
            let mut p = SimPlant::new(state, cal);
            run_servo(&goal, &mut p, &ServoConfig::default()).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_iterations_rejected() {
        let cfg = ServoConfig {
            max_iterations: 0,
            ..ServoConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
