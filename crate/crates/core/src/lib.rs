//! Visuo-tactile keypoint correspondence and grasp servoing.
//!
//! The pipeline takes a goal tactile image with a few demonstrated keypoints,
//! finds the same keypoints in a freshly captured image through dense
//! descriptor similarity, fits the planar rigid displacement between the two
//! keypoint sets and re-grasps until the displacement is below threshold.
//!
//! - [`sensor`]: calibration, images, keypoints, pixel/mm conversion
//! - [`gel_sim`]: synthetic gel images and a simulated grasp plant
//! - [`descriptor`]: dense descriptor maps and their interchange file
//! - [`correspondence`]: keypoint matching with confidence gating
//! - [`displacement`]: rigid fit, threshold norm and the error metric
//! - [`servo`]: the capture/estimate/adjust loop
//! - [`harness`]: perturbation experiments, task scenarios, report summaries

pub mod correspondence;
pub mod descriptor;
pub mod displacement;
pub mod gel_sim;
pub mod goal;
pub mod harness;
pub mod imageio;
pub mod sensor;
pub mod servo;

pub use correspondence::{correspond, CorrespondOpts, Match};
pub use descriptor::{extract, DescriptorMap, DescriptorParams};
pub use displacement::{estimate_displacement, Displacement, EstimationMode};
pub use gel_sim::{render, ContactScene, PlantState, ScenePreset};
pub use goal::GoalSpec;
pub use sensor::{KeypointSet, SensorCalibration, TactileImage};
pub use servo::{run_servo, ServoConfig, ServoOutcome, ServoResult};
