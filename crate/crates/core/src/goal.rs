//! Demonstration record: goal image, keypoints, gripper width, thresholds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{extract, DescriptorError, DescriptorParams};
use crate::displacement::{Displacement, EstimationMode};
use crate::gel_sim::{render, ContactScene, SimError};
use crate::imageio::{read_image, write_image, ImageIoError};
use crate::sensor::{KeypointSet, SensorCalibration, SensorError, TactileImage};

pub const DEFAULT_TRANSLATION_THRESHOLD_MM: f64 = 0.2;
pub const DEFAULT_ROTATION_THRESHOLD_RAD: f64 = 0.01;

#[derive(Debug, Error)]
pub enum GoalError {
    #[error("invalid goal spec: {0}")]
    Invalid(String),
    #[error(
        "keypoint {index} at ({u:.1}, {v:.1}) lies on a void descriptor cell (no contact texture)"
    )]
    VoidKeypoint { index: usize, u: f64, v: f64 },
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub translation_mm: f64,
    pub rotation_rad: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            translation_mm: DEFAULT_TRANSLATION_THRESHOLD_MM,
            rotation_rad: DEFAULT_ROTATION_THRESHOLD_RAD,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoalSpec {
    pub goal_image: TactileImage,
    pub goal_keypoints: KeypointSet,
    pub gripper_width_mm: f64,
    pub translation_threshold_mm: f64,
    pub rotation_threshold_rad: f64,
}

impl GoalSpec {
    pub fn new(
        goal_image: TactileImage,
        goal_keypoints: KeypointSet,
        gripper_width_mm: f64,
        thresholds: Thresholds,
    ) -> Result<Self, GoalError> {
        let spec = Self {
            goal_image,
            goal_keypoints,
            gripper_width_mm,
            translation_threshold_mm: thresholds.translation_mm,
            rotation_threshold_rad: thresholds.rotation_rad,
        };
        spec.validate(EstimationMode::TranslationOnly)?;
        Ok(spec)
    }

    pub fn calibration(&self) -> &SensorCalibration {
        self.goal_image.calibration()
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            translation_mm: self.translation_threshold_mm,
            rotation_rad: self.rotation_threshold_rad,
        }
    }

    pub fn validate(&self, mode: EstimationMode) -> Result<(), GoalError> {
        self.goal_keypoints
            .check_bounds(self.goal_image.width(), self.goal_image.height())?;
        for (name, v) in [
            ("translation_threshold_mm", self.translation_threshold_mm),
            ("rotation_threshold_rad", self.rotation_threshold_rad),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(GoalError::Invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.gripper_width_mm.is_finite() && self.gripper_width_mm >= 0.0) {
            return Err(GoalError::Invalid("gripper_width_mm must be >= 0".into()));
        }
        if self.goal_keypoints.len() < mode.min_keypoints() {
            return Err(GoalError::Invalid(format!(
                "{mode:?} needs at least {} keypoints",
                mode.min_keypoints()
            )));
        }
        Ok(())
    }

    /// Rejects keypoints whose nearest descriptor cell is void.
    pub fn check_contact(&self, params: &DescriptorParams) -> Result<(), GoalError> {
        let map = extract(&self.goal_image, params)?;
        for (index, &p) in self.goal_keypoints.points().iter().enumerate() {
            let (r, c) = map.nearest_cell(p);
            if map.is_void(r, c) {
                return Err(GoalError::VoidKeypoint {
                    index,
                    u: p.0,
                    v: p.1,
                });
            }
        }
        Ok(())
    }

    /// Writes the goal image next to `json_path` and the JSON record itself.
    pub fn save(&self, json_path: &Path, image_path: &Path) -> Result<(), GoalError> {
        write_image(&self.goal_image, image_path)?;
        let rel = match (image_path.parent(), json_path.parent()) {
            (Some(a), Some(b)) if a == b => PathBuf::from(image_path.file_name().unwrap()),
            _ => image_path.to_path_buf(),
        };
        let file = GoalSpecFile {
            goal_image: rel,
            keypoints: self
                .goal_keypoints
                .points()
                .iter()
                .map(|p| [p.0, p.1])
                .collect(),
            gripper_width_mm: self.gripper_width_mm,
            translation_threshold_mm: self.translation_threshold_mm,
            rotation_threshold_rad: self.rotation_threshold_rad,
            calibration: *self.calibration(),
        };
        std::fs::write(json_path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    /// Loads a goal spec; a relative image path is resolved against the JSON file's directory.
    pub fn load(json_path: &Path) -> Result<Self, GoalError> {
        let file: GoalSpecFile = serde_json::from_str(&std::fs::read_to_string(json_path)?)?;
        let image_path = if file.goal_image.is_relative() {
            json_path
                .parent()
                .unwrap_or(Path::new("."))
                .join(&file.goal_image)
        } else {
            file.goal_image.clone()
        };
        let image = read_image(&image_path, file.calibration)?;
        let keypoints = KeypointSet::new(file.keypoints.iter().map(|p| (p[0], p[1])).collect())?;
        GoalSpec::new(
            image,
            keypoints,
            file.gripper_width_mm,
            Thresholds {
                translation_mm: file.translation_threshold_mm,
                rotation_rad: file.rotation_threshold_rad,
            },
        )
    }
}

/// On-disk form of a [`GoalSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalSpecFile {
    pub goal_image: PathBuf,
    pub keypoints: Vec<[f64; 2]>,
    pub gripper_width_mm: f64,
    pub translation_threshold_mm: f64,
    pub rotation_threshold_rad: f64,
    pub calibration: SensorCalibration,
}

/// Demonstration phase on the simulator: render the scene at the demonstrated
/// pose and validate the chosen keypoints against it.
pub fn build_goal_spec(
    scene: &ContactScene,
    cal: &SensorCalibration,
    keypoints: Vec<(f64, f64)>,
    gripper_width_mm: f64,
    thresholds: Thresholds,
    params: &DescriptorParams,
) -> Result<GoalSpec, GoalError> {
    let image = render(scene, &Displacement::IDENTITY, cal, 0)?;
    let keypoints = KeypointSet::within(keypoints, image.width(), image.height())?;
    let spec = GoalSpec::new(image, keypoints, gripper_width_mm, thresholds)?;
    spec.check_contact(params)?;
    Ok(spec)
}
