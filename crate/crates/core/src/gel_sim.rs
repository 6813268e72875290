//! Synthetic gel-sensor renderer and a simulated grasp plant.
//!
//! Shapes are polygons in the robot frame (mm, relative to the sensor centre
//! at the demonstrated grasp). A render places them at a pose, builds a
//! pseudo height map from the signed distance to the outline, and shades it
//! with three coloured directional lights, one per RGB channel.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::displacement::Displacement;
use crate::sensor::{SensorCalibration, SensorError, TactileImage};

const LIGHT_AZIMUTHS_DEG: [f64; 3] = [0.0, 120.0, 240.0];
const LIGHT_ELEVATION_DEG: f64 = 40.0;
/// Intensity change per unit of `n·L` away from the flat-gel value.
const SHADING_GAIN: f64 = 0.45;
/// Brightening of fully pressed gel relative to the background.
const CONTACT_GAIN: f64 = 0.12;

pub const DEFAULT_EDGE_SOFTNESS_MM: f64 = 0.4;
pub const DEFAULT_NOISE_SIGMA: f64 = 2.0 / 255.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("offset is not finite")]
    NonFiniteOffset,
    #[error("unknown scene preset `{0}`")]
    UnknownPreset(String),
    #[error(transparent)]
    Sensor(#[from] SensorError),
}

fn default_edge_softness() -> f64 {
    DEFAULT_EDGE_SOFTNESS_MM
}

fn default_noise() -> f64 {
    DEFAULT_NOISE_SIGMA
}

fn default_background() -> f64 {
    0.45
}

/// Objects pressed into the gel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactScene {
    /// Closed polygons, vertices as `[x, z]` mm.
    pub shapes: Vec<Vec<[f64; 2]>>,
    pub press_depth_mm: f64,
    #[serde(default = "default_edge_softness")]
    pub edge_softness_mm: f64,
    #[serde(default = "default_background")]
    pub background_level: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
}

impl ContactScene {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScene(m));
        if !(self.press_depth_mm.is_finite() && self.press_depth_mm > 0.0) {
            return bad(format!(
                "press_depth_mm must be > 0, got {}",
                self.press_depth_mm
            ));
        }
        if !(self.edge_softness_mm.is_finite() && self.edge_softness_mm > 0.0) {
            return bad(format!(
                "edge_softness_mm must be > 0, got {}",
                self.edge_softness_mm
            ));
        }
        if !(0.0..=1.0).contains(&self.background_level) {
            return bad(format!(
                "background_level must be in [0, 1], got {}",
                self.background_level
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        for (i, shape) in self.shapes.iter().enumerate() {
            if shape.len() < 3 {
                return bad(format!("shape {i} has fewer than 3 vertices"));
            }
            if shape.iter().flatten().any(|v| !v.is_finite()) {
                return bad(format!("shape {i} has non-finite vertices"));
            }
            if !is_simple(shape) {
                return bad(format!("shape {i} self-intersects"));
            }
        }
        Ok(())
    }

    pub fn with_noise(mut self, noise_sigma: f64) -> Self {
        self.noise_sigma = noise_sigma;
        self
    }

    pub fn empty_like(&self) -> Self {
        Self {
            shapes: Vec::new(),
            ..self.clone()
        }
    }
}

fn segments_cross(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let orient = |p: [f64; 2], q: [f64; 2], r: [f64; 2]| {
        (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    };
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    (d1 * d2 < 0.0) && (d3 * d4 < 0.0)
}

fn is_simple(poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_cross(a, b, poly[j], poly[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

/// A polygon placed in image millimetres.
struct PlacedShape {
    verts: Vec<(f64, f64)>,
    min: (f64, f64),
    max: (f64, f64),
}

impl PlacedShape {
    /// Signed distance (positive inside) and its unit gradient.
    fn signed_distance(&self, p: (f64, f64)) -> (f64, (f64, f64)) {
        let n = self.verts.len();
        let mut best = f64::INFINITY;
        let mut nearest = p;
        let mut edge_normal = (0.0, 0.0);
        let mut inside = false;
        for i in 0..n {
            let a = self.verts[i];
            let b = self.verts[(i + 1) % n];
            let (ex, ez) = (b.0 - a.0, b.1 - a.1);
            let len2 = ex * ex + ez * ez;
            let t = if len2 > 0.0 {
                (((p.0 - a.0) * ex + (p.1 - a.1) * ez) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = (a.0 + t * ex, a.1 + t * ez);
            let dist2 = (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2);
            if dist2 < best {
                best = dist2;
                nearest = q;
                let len = len2.sqrt().max(f64::MIN_POSITIVE);
                edge_normal = (ez / len, -ex / len);
            }
            if (a.1 > p.1) != (b.1 > p.1) {
                let x_cross = a.0 + (p.1 - a.1) / (b.1 - a.1) * ex;
                if p.0 < x_cross {
                    inside = !inside;
                }
            }
        }
        let dist = best.sqrt();
        let sign = if inside { 1.0 } else { -1.0 };
        // Gradient of the signed distance points towards the interior.
        let grad = if dist > 1e-12 {
            (
                sign * (p.0 - nearest.0) / dist,
                sign * (p.1 - nearest.1) / dist,
            )
        } else {
            edge_normal
        };
        (sign * dist, grad)
    }
}

fn smoothstep(t: f64) -> (f64, f64) {
    if t <= 0.0 {
        (0.0, 0.0)
    } else if t >= 1.0 {
        (1.0, 0.0)
    } else {
        (t * t * (3.0 - 2.0 * t), 6.0 * t * (1.0 - t))
    }
}

/// Renders `scene` with the object at pose `offset` (robot frame).
pub fn render(
    scene: &ContactScene,
    offset: &Displacement,
    cal: &SensorCalibration,
    seed: u64,
) -> Result<TactileImage, SimError> {
    scene.validate()?;
    cal.validate()?;
    if !offset.is_finite() {
        return Err(SimError::NonFiniteOffset);
    }
    let soft = scene.edge_softness_mm;
    let center = cal.frame_center_mm();
    let placed: Vec<PlacedShape> = scene
        .shapes
        .iter()
        .map(|shape| {
            let verts: Vec<(f64, f64)> = shape
                .iter()
                .map(|v| {
                    let (x, z) = offset.apply((v[0], v[1]));
                    let (a, b) = cal.axes.robot_to_image(x, z);
                    (a + center.0, b + center.1)
                })
                .collect();
            let min = verts.iter().fold((f64::INFINITY, f64::INFINITY), |m, v| {
                (m.0.min(v.0), m.1.min(v.1))
            });
            let max = verts
                .iter()
                .fold((f64::NEG_INFINITY, f64::NEG_INFINITY), |m, v| {
                    (m.0.max(v.0), m.1.max(v.1))
                });
            PlacedShape {
                verts,
                min: (min.0 - soft, min.1 - soft),
                max: (max.0 + soft, max.1 + soft),
            }
        })
        .collect();

    let lights: Vec<[f64; 3]> = LIGHT_AZIMUTHS_DEG
        .iter()
        .map(|az| {
            let (az, el) = (az.to_radians(), LIGHT_ELEVATION_DEG.to_radians());
            [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
        })
        .collect();

    let (w, h) = (
        cal.working_width_px as usize,
        cal.working_height_px as usize,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(w * h * 3);
    for j in 0..h {
        for i in 0..w {
            let p = (i as f64 * cal.mm_per_px_u, j as f64 * cal.mm_per_px_v);
            let mut sd: Option<(f64, (f64, f64))> = None;
            for shape in &placed {
                if p.0 < shape.min.0 || p.0 > shape.max.0 || p.1 < shape.min.1 || p.1 > shape.max.1
                {
                    continue;
                }
                let cand = shape.signed_distance(p);
                if sd.is_none_or(|cur| cand.0 > cur.0) {
                    sd = Some(cand);
                }
            }
            let (height, grad) = match sd {
                Some((d, g)) => {
                    let (s, ds) = smoothstep((d + soft) / (2.0 * soft));
                    let slope = scene.press_depth_mm * ds / (2.0 * soft);
                    (s, (slope * g.0, slope * g.1))
                }
                None => (0.0, (0.0, 0.0)),
            };
            let norm = (1.0 + grad.0 * grad.0 + grad.1 * grad.1).sqrt();
            let normal = [-grad.0 / norm, -grad.1 / norm, 1.0 / norm];
            for light in &lights {
                let lambert = normal[0] * light[0] + normal[1] * light[1] + normal[2] * light[2];
                let mut v = scene.background_level
                    + SHADING_GAIN * (lambert - light[2])
                    + CONTACT_GAIN * height;
                if scene.noise_sigma > 0.0 {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    v += scene.noise_sigma * n;
                }
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(TactileImage::new(w as u32, h as u32, 3, pixels, *cal)?)
}

/// Per-axis standard deviation of grasp actuation error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActuationNoise {
    pub x_mm: f64,
    pub z_mm: f64,
    pub theta_rad: f64,
}

impl ActuationNoise {
    pub fn is_valid(&self) -> bool {
        [self.x_mm, self.z_mm, self.theta_rad]
            .iter()
            .all(|s| s.is_finite() && *s >= 0.0)
    }
}

/// Simulated grasp: the object sits at `true_offset` relative to the
/// demonstrated grasp; the robot has applied the accumulated `commanded` pose.
#[derive(Clone, Debug)]
pub struct PlantState {
    pub scene: ContactScene,
    pub true_offset: Displacement,
    pub actuation_noise: ActuationNoise,
    pub rng_seed: u64,
    commanded: Displacement,
    rng: ChaCha8Rng,
    last_capture_pose: Option<Displacement>,
}

impl PlantState {
    pub fn new(
        scene: ContactScene,
        true_offset: Displacement,
        actuation_noise: ActuationNoise,
        rng_seed: u64,
    ) -> Result<Self, SimError> {
        scene.validate()?;
        if !true_offset.is_finite() {
            return Err(SimError::NonFiniteOffset);
        }
        if !actuation_noise.is_valid() {
            return Err(SimError::InvalidScene(
                "actuation noise must be finite and >= 0".into(),
            ));
        }
        Ok(Self {
            scene,
            true_offset,
            actuation_noise,
            rng_seed,
            commanded: Displacement::IDENTITY,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            last_capture_pose: None,
        })
    }

    pub fn commanded(&self) -> Displacement {
        self.commanded
    }

    /// Object pose relative to the sensor for a given commanded pose.
    pub fn relative_pose(&self, commanded: &Displacement) -> Displacement {
        self.true_offset.compose(&commanded.inverse())
    }

    /// Ground-truth ΔP that would bring the next grasp onto the goal.
    pub fn residual(&self) -> Displacement {
        self.relative_pose(&self.commanded)
    }

    /// Pose actually rendered by the most recent capture (noise included).
    pub fn last_capture_pose(&self) -> Option<Displacement> {
        self.last_capture_pose
    }

    /// Grasps with the given commanded pose and captures a tactile image.
    pub fn grasp_capture(
        &mut self,
        commanded: &Displacement,
        cal: &SensorCalibration,
    ) -> Result<TactileImage, SimError> {
        let rel = self.relative_pose(commanded);
        let mut noise = [0.0; 3];
        for n in &mut noise {
            *n = StandardNormal.sample(&mut self.rng);
        }
        let pose = Displacement::new(
            rel.dx_mm + self.actuation_noise.x_mm * noise[0],
            rel.dz_mm + self.actuation_noise.z_mm * noise[1],
            rel.dtheta_rad + self.actuation_noise.theta_rad * noise[2],
        );
        let render_seed = self.rng.next_u64();
        self.last_capture_pose = Some(pose);
        render(&self.scene, &pose, cal, render_seed)
    }

    /// Captures at the accumulated commanded pose.
    pub fn capture(&mut self, cal: &SensorCalibration) -> Result<TactileImage, SimError> {
        let commanded = self.commanded;
        self.grasp_capture(&commanded, cal)
    }

    /// Moves the commanded pose by ΔP (`C ← ΔP ∘ C`).
    pub fn apply_adjustment(&mut self, delta: &Displacement) {
        self.commanded = delta.compose(&self.commanded);
    }
}

/// A named scene together with its demonstrated keypoints (robot frame, mm).
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePreset {
    pub name: &'static str,
    pub scene: ContactScene,
    pub keypoints_mm: Vec<(f64, f64)>,
}

impl ScenePreset {
    pub fn by_name(name: &str) -> Result<Self, SimError> {
        match name {
            "gear" => Ok(gear_preset()),
            "block" => Ok(block_preset()),
            "wide_block" => Ok(wide_block_preset()),
            other => Err(SimError::UnknownPreset(other.to_string())),
        }
    }

    pub fn keypoints_px(&self, cal: &SensorCalibration) -> Vec<(f64, f64)> {
        self.keypoints_mm
            .iter()
            .map(|&p| cal.frame_to_px(p))
            .collect()
    }
}

fn scene_of(shapes: Vec<Vec<[f64; 2]>>) -> ContactScene {
    ContactScene {
        shapes,
        press_depth_mm: 0.5,
        edge_softness_mm: DEFAULT_EDGE_SOFTNESS_MM,
        background_level: default_background(),
        noise_sigma: DEFAULT_NOISE_SIGMA,
    }
}

/// Upper rim of a spur gear: an annular sector with six teeth on the outer
/// arc. Keypoints are the two inner corners of the sector.
fn gear_preset() -> ScenePreset {
    const ROOT_R: f64 = 9.0;
    const TIP_R: f64 = 9.8;
    const INNER_R: f64 = 6.0;
    const HALF_SPAN_DEG: f64 = 30.0;
    const TEETH: usize = 6;
    let cz = INNER_R * HALF_SPAN_DEG.to_radians().cos();
    let at = |r: f64, phi_deg: f64| {
        let phi = phi_deg.to_radians();
        [r * phi.sin(), cz - r * phi.cos()]
    };

    let pitch = 2.0 * HALF_SPAN_DEG / TEETH as f64;
    let mut outline = Vec::new();
    for k in 0..TEETH {
        let phi0 = -HALF_SPAN_DEG + k as f64 * pitch;
        for (r, frac) in [
            (ROOT_R, 0.0),
            (ROOT_R, 0.2),
            (TIP_R, 0.35),
            (TIP_R, 0.65),
            (ROOT_R, 0.8),
        ] {
            outline.push(at(r, phi0 + frac * pitch));
        }
    }
    outline.push(at(ROOT_R, HALF_SPAN_DEG));
    const INNER_SEGMENTS: usize = 24;
    for s in 0..=INNER_SEGMENTS {
        let phi = HALF_SPAN_DEG - 2.0 * HALF_SPAN_DEG * s as f64 / INNER_SEGMENTS as f64;
        outline.push(at(INNER_R, phi));
    }
    let left = at(INNER_R, -HALF_SPAN_DEG);
    let right = at(INNER_R, HALF_SPAN_DEG);
    ScenePreset {
        name: "gear",
        scene: scene_of(vec![outline]),
        keypoints_mm: vec![(left[0], left[1]), (right[0], right[1])],
    }
}

fn rectangle(half_w: f64, top: f64, bottom: f64) -> Vec<[f64; 2]> {
    vec![
        [-half_w, top],
        [half_w, top],
        [half_w, bottom],
        [-half_w, bottom],
    ]
}

/// 8 × 4 mm block; keypoints on its two lower corners.
fn block_preset() -> ScenePreset {
    ScenePreset {
        name: "block",
        scene: scene_of(vec![rectangle(4.0, -4.0, 0.0)]),
        keypoints_mm: vec![(-4.0, 0.0), (4.0, 0.0)],
    }
}

/// 16 × 3 mm block that does not fit the window once shifted sideways.
fn wide_block_preset() -> ScenePreset {
    ScenePreset {
        name: "wide_block",
        scene: scene_of(vec![rectangle(8.0, -3.0, 0.0)]),
        keypoints_mm: vec![(-8.0, 0.0), (8.0, 0.0)],
    }
}
