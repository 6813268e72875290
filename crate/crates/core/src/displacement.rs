//! Planar rigid displacement between goal and current keypoints.
//!
//! A [`Displacement`] is an SE(2) element acting on robot-frame millimetres
//! (see [`SensorCalibration::px_to_frame`]): `p ↦ R(θ)·p + (dx, dz)`.
//!
//! The estimated ΔP is the rigid motion that carries the goal keypoints onto
//! the current keypoints, i.e. the object's pose error as seen by the sensor.
//! Composing it onto the commanded grasp pose (`C ← ΔP ∘ C`) moves the next
//! grasp onto the demonstrated one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sensor::{KeypointSet, SensorCalibration};

/// Half the sensor diagonal, used to weigh rotation against translation.
pub const DEFAULT_R_CHAR_MM: f64 = 15.0;

const DEGENERATE_SPREAD_MM2: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum DisplacementError {
    #[error("keypoint count mismatch: goal {goal}, current {current}")]
    CountMismatch { goal: usize, current: usize },
    #[error("{mode:?} needs at least {needed} keypoints, got {got}")]
    TooFewKeypoints {
        mode: EstimationMode,
        needed: usize,
        got: usize,
    },
    #[error("trial list is empty")]
    NoTrials,
}

/// Planar rigid transform: translation in mm, rotation in rad.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Displacement {
    pub dx_mm: f64,
    pub dz_mm: f64,
    pub dtheta_rad: f64,
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(theta: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut t = theta.rem_euclid(TAU);
    if t > PI {
        t -= TAU;
    }
    t
}

impl Displacement {
    pub const IDENTITY: Displacement = Displacement {
        dx_mm: 0.0,
        dz_mm: 0.0,
        dtheta_rad: 0.0,
    };

    pub fn new(dx_mm: f64, dz_mm: f64, dtheta_rad: f64) -> Self {
        Self {
            dx_mm,
            dz_mm,
            dtheta_rad: normalize_angle(dtheta_rad),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.dx_mm.is_finite() && self.dz_mm.is_finite() && self.dtheta_rad.is_finite()
    }

    pub fn translation_norm(&self) -> f64 {
        self.dx_mm.hypot(self.dz_mm)
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.dtheta_rad.sin_cos();
        (
            c * p.0 - s * p.1 + self.dx_mm,
            s * p.0 + c * p.1 + self.dz_mm,
        )
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Displacement) -> Displacement {
        let (x, z) = self.apply((other.dx_mm, other.dz_mm));
        Displacement::new(x, z, self.dtheta_rad + other.dtheta_rad)
    }

    pub fn inverse(&self) -> Displacement {
        let (s, c) = self.dtheta_rad.sin_cos();
        Displacement::new(
            -(c * self.dx_mm + s * self.dz_mm),
            -(-s * self.dx_mm + c * self.dz_mm),
            -self.dtheta_rad,
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimationMode {
    TranslationOnly,
    #[default]
    Rigid2d,
}

impl EstimationMode {
    pub fn min_keypoints(self) -> usize {
        match self {
            EstimationMode::TranslationOnly => 1,
            EstimationMode::Rigid2d => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub displacement: Displacement,
    /// Rigid fit fell back to translation-only because the goal (or current)
    /// keypoints coincide.
    pub degenerate: bool,
    /// RMS distance between transformed goal keypoints and current keypoints, mm.
    pub rms_residual_mm: f64,
}

/// Fits ΔP mapping `goal` keypoints onto `current` keypoints in frame millimetres.
pub fn estimate_displacement(
    goal: &KeypointSet,
    current: &KeypointSet,
    cal: &SensorCalibration,
    mode: EstimationMode,
) -> Result<Estimate, DisplacementError> {
    if goal.len() != current.len() {
        return Err(DisplacementError::CountMismatch {
            goal: goal.len(),
            current: current.len(),
        });
    }
    if goal.len() < mode.min_keypoints() {
        return Err(DisplacementError::TooFewKeypoints {
            mode,
            needed: mode.min_keypoints(),
            got: goal.len(),
        });
    }
    let g: Vec<_> = goal.points().iter().map(|&p| cal.px_to_frame(p)).collect();
    let c: Vec<_> = current
        .points()
        .iter()
        .map(|&p| cal.px_to_frame(p))
        .collect();
    Ok(fit_points(&g, &c, mode))
}

/// Least-squares fit on millimetre point pairs. Closed form: centroid
/// subtraction, then the angle of the cross/dot covariance.
pub fn fit_points(goal: &[(f64, f64)], current: &[(f64, f64)], mode: EstimationMode) -> Estimate {
    let n = goal.len() as f64;
    let centroid = |pts: &[(f64, f64)]| {
        let (sx, sz) = pts
            .iter()
            .fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
        (sx / n, sz / n)
    };
    let gc = centroid(goal);
    let cc = centroid(current);

    let mut dot = 0.0;
    let mut cross = 0.0;
    let mut spread_g = 0.0;
    let mut spread_c = 0.0;
    for (g, c) in goal.iter().zip(current) {
        let (gx, gz) = (g.0 - gc.0, g.1 - gc.1);
        let (cx, cz) = (c.0 - cc.0, c.1 - cc.1);
        dot += gx * cx + gz * cz;
        cross += gx * cz - gz * cx;
        spread_g += gx * gx + gz * gz;
        spread_c += cx * cx + cz * cz;
    }

    let degenerate = mode == EstimationMode::Rigid2d
        && (spread_g < DEGENERATE_SPREAD_MM2 || spread_c < DEGENERATE_SPREAD_MM2);
    let theta = if mode == EstimationMode::Rigid2d && !degenerate {
        cross.atan2(dot)
    } else {
        0.0
    };
    let rot = Displacement::new(0.0, 0.0, theta);
    let rg = rot.apply(gc);
    let displacement = Displacement::new(cc.0 - rg.0, cc.1 - rg.1, theta);

    let sq: f64 = goal
        .iter()
        .zip(current)
        .map(|(g, c)| {
            let m = displacement.apply(*g);
            (m.0 - c.0).powi(2) + (m.1 - c.1).powi(2)
        })
        .sum();
    Estimate {
        displacement,
        degenerate,
        rms_residual_mm: (sq / n).sqrt(),
    }
}

/// Translation norm plus rotation arc length at radius `r_char_mm`.
pub fn displacement_norm(d: &Displacement, r_char_mm: f64) -> f64 {
    d.translation_norm() + r_char_mm * d.dtheta_rad.abs()
}

/// How the τ test in the servo loop is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdTest {
    /// `‖t‖ < translation_threshold_mm` and `|θ| < rotation_threshold_rad`.
    #[default]
    ComponentWise,
    /// `displacement_norm(ΔP, r_char_mm) < tau_mm`.
    Combined { r_char_mm: f64, tau_mm: f64 },
}

impl ThresholdTest {
    pub fn passes(&self, d: &Displacement, translation_mm: f64, rotation_rad: f64) -> bool {
        match *self {
            ThresholdTest::ComponentWise => {
                d.translation_norm() < translation_mm && d.dtheta_rad.abs() < rotation_rad
            }
            ThresholdTest::Combined { r_char_mm, tau_mm } => {
                displacement_norm(d, r_char_mm) < tau_mm
            }
        }
    }
}

/// One row of the displacement-error experiment, mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub real: (f64, f64),
    pub est: (f64, f64),
}

impl TrialRecord {
    pub fn error_mm(&self) -> f64 {
        (self.real.0 - self.est.0).hypot(self.real.1 - self.est.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    /// Mean Euclidean error over trials, mm.
    pub d_error: f64,
    /// Population standard deviation of the per-trial errors, mm.
    pub std_dev: f64,
    pub n: usize,
    pub per_trial: Vec<f64>,
}

/// Mean planar error between real and estimated displacements.
pub fn d_error(trials: &[TrialRecord]) -> Result<ErrorStats, DisplacementError> {
    let per_trial: Vec<f64> = trials.iter().map(TrialRecord::error_mm).collect();
    ErrorStats::from_errors(per_trial)
}

impl ErrorStats {
    pub fn from_errors(per_trial: Vec<f64>) -> Result<Self, DisplacementError> {
        if per_trial.is_empty() {
            return Err(DisplacementError::NoTrials);
        }
        let n = per_trial.len();
        let mean = per_trial.iter().sum::<f64>() / n as f64;
        let var = per_trial.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n as f64;
        Ok(Self {
            d_error: mean,
            std_dev: var.sqrt(),
            n,
            per_trial,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn cal() -> SensorCalibration {
        SensorCalibration::working()
    }

    fn kps(points: &[(f64, f64)]) -> KeypointSet {
        KeypointSet::new(points.to_vec()).unwrap()
    }

    #[test]
    fn identity_correspondence_gives_zero() {
        let g = kps(&[(100.0, 80.0), (180.0, 120.0)]);
        let est = estimate_displacement(&g, &g, &cal(), EstimationMode::Rigid2d).unwrap();
        assert_eq!(est.displacement, Displacement::IDENTITY);
        assert!(!est.degenerate);
    }

    #[test]
    fn pure_pixel_shift() {
        let g = kps(&[(100.0, 80.0), (180.0, 120.0)]);
        let c = kps(&[(110.0, 80.0), (190.0, 120.0)]);
        let est = estimate_displacement(&g, &c, &cal(), EstimationMode::Rigid2d).unwrap();
        assert!((est.displacement.dx_mm - 0.75).abs() < 1e-12);
        assert!(est.displacement.dz_mm.abs() < 1e-12);
        assert!(est.displacement.dtheta_rad.abs() < 1e-12);
        assert!(est.rms_residual_mm < 1e-12);
    }

    #[test]
    fn quarter_turn_about_centroid() {
        let cal = cal();
        // Keypoints symmetric about the frame origin so the centroid is (0, 0).
        let a = cal.frame_to_px((-2.0, 1.0));
        let b = cal.frame_to_px((2.0, -1.0));
        let ra = cal.frame_to_px((-1.0, -2.0));
        let rb = cal.frame_to_px((1.0, 2.0));
        let est = estimate_displacement(
            &kps(&[a, b]),
            &kps(&[ra, rb]),
            &cal,
            EstimationMode::Rigid2d,
        )
        .unwrap();
        let d = est.displacement;
        assert!(d.dx_mm.abs() < 1e-9 && d.dz_mm.abs() < 1e-9);
        assert!((d.dtheta_rad - FRAC_PI_2).abs() < 1e-9);
    }

    #[test]
    fn coincident_keypoints_fall_back() {
        let g = kps(&[(100.0, 80.0), (100.0, 80.0)]);
        let c = kps(&[(104.0, 84.0), (104.0, 84.0)]);
        let est = estimate_displacement(&g, &c, &cal(), EstimationMode::Rigid2d).unwrap();
        assert!(est.degenerate);
        assert!((est.displacement.dx_mm - 0.3).abs() < 1e-12);
        assert!((est.displacement.dz_mm - 0.3).abs() < 1e-12);
        assert_eq!(est.displacement.dtheta_rad, 0.0);
    }

    #[test]
    fn keypoint_count_errors() {
        let one = kps(&[(1.0, 1.0)]);
        let two = kps(&[(1.0, 1.0), (3.0, 3.0)]);
        assert!(matches!(
            estimate_displacement(&one, &one, &cal(), EstimationMode::Rigid2d),
            Err(DisplacementError::TooFewKeypoints {
                needed: 2,
                got: 1,
                ..
            })
        ));
        assert!(estimate_displacement(&one, &one, &cal(), EstimationMode::TranslationOnly).is_ok());
        assert!(matches!(
            estimate_displacement(&one, &two, &cal(), EstimationMode::TranslationOnly),
            Err(DisplacementError::CountMismatch { .. })
        ));
    }

    #[test]
    fn translation_only_is_mean_offset() {
        let g = [(0.0, 0.0), (2.0, 0.0), (0.0, 2.0)];
        let c = [(1.0, 0.5), (3.5, 0.0), (0.5, 2.5)];
        let est = fit_points(&g, &c, EstimationMode::TranslationOnly);
        assert!((est.displacement.dx_mm - 1.0).abs() < 1e-12);
        assert!((est.displacement.dz_mm - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn norm_examples() {
        assert_eq!(displacement_norm(&Displacement::IDENTITY, 15.0), 0.0);
        assert_eq!(
            displacement_norm(&Displacement::new(3.0, 4.0, 0.0), 15.0),
            5.0
        );
        assert!((displacement_norm(&Displacement::new(0.0, 0.0, 0.1), 15.0) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn threshold_tests() {
        let d = Displacement::new(0.1, 0.1, 0.004);
        assert!(ThresholdTest::ComponentWise.passes(&d, 0.2, 0.005));
        assert!(!ThresholdTest::ComponentWise.passes(&d, 0.1, 0.005));
        let combined = ThresholdTest::Combined {
            r_char_mm: 15.0,
            tau_mm: 0.2,
        };
        assert!(!combined.passes(&d, 1.0, 1.0));
    }

    #[test]
    fn error_metric_examples() {
        let same = [TrialRecord {
            real: (1.0, 2.0),
            est: (1.0, 2.0),
        }];
        assert_eq!(d_error(&same).unwrap().d_error, 0.0);
        let one = [TrialRecord {
            real: (3.0, 4.0),
            est: (0.0, 0.0),
        }];
        assert_eq!(d_error(&one).unwrap().d_error, 5.0);
        let two = [
            TrialRecord {
                real: (1.0, 0.0),
                est: (0.0, 0.0),
            },
            TrialRecord {
                real: (0.0, 2.0),
                est: (0.0, 0.0),
            },
        ];
        let stats = d_error(&two).unwrap();
        assert_eq!(stats.d_error, 1.5);
        assert_eq!(stats.std_dev, 0.5);
        assert_eq!(stats.n, 2);
        assert_eq!(d_error(&[]), Err(DisplacementError::NoTrials));
    }

    #[test]
    fn angle_normalization() {
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-15);
        assert!((normalize_angle(3.0 * PI / 2.0) + FRAC_PI_2).abs() < 1e-12);
        assert_eq!(normalize_angle(0.0), 0.0);
    }

    fn pose() -> impl Strategy<Value = Displacement> {
        (-5.0f64..5.0, -5.0f64..5.0, -1.0f64..1.0).prop_map(|(x, z, t)| Displacement::new(x, z, t))
    }

    proptest! {
        #[test]
        fn compose_with_inverse_is_identity(d in pose()) {
            let id = d.compose(&d.inverse());
            prop_assert!(id.dx_mm.abs() < 1e-12 && id.dz_mm.abs() < 1e-12 && id.dtheta_rad.abs() < 1e-12);
        }

        #[test]
        fn exact_rigid_motion_recovered(d in pose(), pts in prop::collection::vec((-8.0f64..8.0, -6.0f64..6.0), 2..6)) {
            let spread: f64 = pts.iter().map(|p| (p.0 - pts[0].0).abs() + (p.1 - pts[0].1).abs()).sum();
            prop_assume!(spread > 0.5);
            let cur: Vec<_> = pts.iter().map(|&p| d.apply(p)).collect();
            let est = fit_points(&pts, &cur, EstimationMode::Rigid2d);
            prop_assert!((est.displacement.dx_mm - d.dx_mm).abs() < 1e-9);
            prop_assert!((est.displacement.dz_mm - d.dz_mm).abs() < 1e-9);
            prop_assert!((est.displacement.dtheta_rad - d.dtheta_rad).abs() < 1e-9);
            for (g, c) in pts.iter().zip(&cur) {
                let m = est.displacement.apply(*g);
                prop_assert!((m.0 - c.0).abs() < 1e-9 && (m.1 - c.1).abs() < 1e-9);
            }
        }

        #[test]
        fn common_pre_translation(d in pose(), o in (-3.0f64..3.0, -3.0f64..3.0),
                                  pts in prop::collection::vec((-8.0f64..8.0, -6.0f64..6.0), 2..5)) {
            let spread: f64 = pts.iter().map(|p| (p.0 - pts[0].0).abs() + (p.1 - pts[0].1).abs()).sum();
            prop_assume!(spread > 0.5);
            let cur: Vec<_> = pts.iter().map(|&p| d.apply(p)).collect();
            let shift = |v: &[(f64, f64)]| v.iter().map(|p| (p.0 + o.0, p.1 + o.1)).collect::<Vec<_>>();
            let a = fit_points(&pts, &cur, EstimationMode::Rigid2d).displacement;
            let b = fit_points(&shift(&pts), &shift(&cur), EstimationMode::Rigid2d).displacement;
            prop_assert!((a.dtheta_rad - b.dtheta_rad).abs() < 1e-9);
            // t' = t + (I - R) o
            let r = Displacement::new(0.0, 0.0, a.dtheta_rad).apply(o);
            prop_assert!((b.dx_mm - (a.dx_mm + o.0 - r.0)).abs() < 1e-9);
            prop_assert!((b.dz_mm - (a.dz_mm + o.1 - r.1)).abs() < 1e-9);
        }

        #[test]
        fn d_error_nonnegative_and_zero_iff_exact(
            rows in prop::collection::vec(((-5.0f64..5.0, -5.0f64..5.0), (-5.0f64..5.0, -5.0f64..5.0)), 1..20)
        ) {
            let trials: Vec<_> = rows.iter().map(|&(real, est)| TrialRecord { real, est }).collect();
            let stats = d_error(&trials).unwrap();
            prop_assert!(stats.d_error >= 0.0);
            let exact = trials.iter().all(|t| t.real == t.est);
            prop_assert_eq!(stats.d_error == 0.0, exact);
            let exact_trials: Vec<_> = rows.iter().map(|&(real, _)| TrialRecord { real, est: real }).collect();
            prop_assert_eq!(d_error(&exact_trials).unwrap().d_error, 0.0);
        }
    }
}
