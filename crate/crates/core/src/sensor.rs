//! Sensor calibration, tactile images, keypoints and pixel/metric conversions.
//!
//! Pixel coordinates are continuous `(u, v)` with pixel `(i, j)` centred at
//! `u = i, v = j`. Millimetre coordinates produced by [`px_to_mm`] share the
//! pixel origin. Poses ([`crate::displacement::Displacement`]) live in the
//! *frame*: millimetres relative to the image centre, re-mapped onto robot
//! `(x, z)` axes by the calibration's [`AxisMapping`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sensing area of the default gel sensor (width × height, mm).
pub const SENSING_WIDTH_MM: f64 = 24.0;
pub const SENSING_HEIGHT_MM: f64 = 18.0;
/// Native capture resolution (width × height, px).
pub const NATIVE_WIDTH_PX: u32 = 320;
pub const NATIVE_HEIGHT_PX: u32 = 240;
/// Working resolution used for keypoint extraction (width × height, px).
pub const WORKING_WIDTH_PX: u32 = 298;
pub const WORKING_HEIGHT_PX: u32 = 224;
/// Native isotropic scale: 50 px ↔ 3.75 mm.
pub const NATIVE_MM_PER_PX: f64 = 0.075;

#[derive(Debug, Error, PartialEq)]
pub enum SensorError {
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("degenerate resize target {width}x{height}")]
    DegenerateTarget { width: u32, height: u32 },
    #[error("crop target {target_w}x{target_h} larger than source {src_w}x{src_h}")]
    CropTooLarge {
        target_w: u32,
        target_h: u32,
        src_w: u32,
        src_h: u32,
    },
    #[error("keypoint set is empty")]
    NoKeypoints,
    #[error("keypoint {index} at ({u}, {v}) outside {width}x{height} image")]
    KeypointOutOfBounds {
        index: usize,
        u: f64,
        v: f64,
        width: u32,
        height: u32,
    },
    #[error("keypoint {index} is not finite")]
    NonFiniteKeypoint { index: usize },
}

/// One signed image axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignedAxis {
    #[serde(rename = "+u")]
    PlusU,
    #[serde(rename = "-u")]
    MinusU,
    #[serde(rename = "+v")]
    PlusV,
    #[serde(rename = "-v")]
    MinusV,
}

impl SignedAxis {
    fn is_u(self) -> bool {
        matches!(self, SignedAxis::PlusU | SignedAxis::MinusU)
    }

    fn sign(self) -> f64 {
        match self {
            SignedAxis::PlusU | SignedAxis::PlusV => 1.0,
            SignedAxis::MinusU | SignedAxis::MinusV => -1.0,
        }
    }

    fn pick(self, a: f64, b: f64) -> f64 {
        if self.is_u() {
            self.sign() * a
        } else {
            self.sign() * b
        }
    }
}

/// Which image axis drives robot `x` and robot `z`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisMapping {
    pub x: SignedAxis,
    pub z: SignedAxis,
}

impl Default for AxisMapping {
    fn default() -> Self {
        Self {
            x: SignedAxis::PlusU,
            z: SignedAxis::PlusV,
        }
    }
}

impl AxisMapping {
    pub fn is_valid(&self) -> bool {
        self.x.is_u() != self.z.is_u()
    }

    /// +1 when the mapping preserves orientation, -1 when it mirrors.
    pub fn handedness(&self) -> f64 {
        let (xu, xv) = (self.image_to_robot(1.0, 0.0), self.image_to_robot(0.0, 1.0));
        let det = xu.0 * xv.1 - xv.0 * xu.1;
        det.signum()
    }

    /// Image-plane vector (mm along u, mm along v) to robot `(x, z)`.
    pub fn image_to_robot(&self, a: f64, b: f64) -> (f64, f64) {
        (self.x.pick(a, b), self.z.pick(a, b))
    }

    /// Robot `(x, z)` back to image-plane `(u, v)` components.
    pub fn robot_to_image(&self, x: f64, z: f64) -> (f64, f64) {
        let mut a = 0.0;
        let mut b = 0.0;
        for (axis, value) in [(self.x, x), (self.z, z)] {
            if axis.is_u() {
                a = axis.sign() * value;
            } else {
                b = axis.sign() * value;
            }
        }
        (a, b)
    }
}

/// Geometry of the gel sensor and of the image the pipeline works on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorCalibration {
    pub sensing_width_mm: f64,
    pub sensing_height_mm: f64,
    pub native_width_px: u32,
    pub native_height_px: u32,
    pub working_width_px: u32,
    pub working_height_px: u32,
    pub mm_per_px_u: f64,
    pub mm_per_px_v: f64,
    #[serde(default)]
    pub axes: AxisMapping,
}

impl Default for SensorCalibration {
    fn default() -> Self {
        Self::native()
    }
}

impl SensorCalibration {
    /// Native 320×240 capture at 0.075 mm/px.
    pub fn native() -> Self {
        Self {
            sensing_width_mm: SENSING_WIDTH_MM,
            sensing_height_mm: SENSING_HEIGHT_MM,
            native_width_px: NATIVE_WIDTH_PX,
            native_height_px: NATIVE_HEIGHT_PX,
            working_width_px: NATIVE_WIDTH_PX,
            working_height_px: NATIVE_HEIGHT_PX,
            mm_per_px_u: NATIVE_MM_PER_PX,
            mm_per_px_v: NATIVE_MM_PER_PX,
            axes: AxisMapping::default(),
        }
    }

    /// Working 298×224 resolution; scale kept at the native 0.075 mm/px.
    pub fn working() -> Self {
        Self {
            working_width_px: WORKING_WIDTH_PX,
            working_height_px: WORKING_HEIGHT_PX,
            ..Self::native()
        }
    }

    pub fn validate(&self) -> Result<(), SensorError> {
        let positive = [
            ("sensing_width_mm", self.sensing_width_mm),
            ("sensing_height_mm", self.sensing_height_mm),
            ("mm_per_px_u", self.mm_per_px_u),
            ("mm_per_px_v", self.mm_per_px_v),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(SensorError::InvalidCalibration(format!(
                    "{name} must be finite and > 0, got {value}"
                )));
            }
        }
        let dims = [
            ("native_width_px", self.native_width_px),
            ("native_height_px", self.native_height_px),
            ("working_width_px", self.working_width_px),
            ("working_height_px", self.working_height_px),
        ];
        for (name, value) in dims {
            if value == 0 {
                return Err(SensorError::InvalidCalibration(format!(
                    "{name} must be > 0"
                )));
            }
        }
        if !self.axes.is_valid() {
            return Err(SensorError::InvalidCalibration(
                "x and z must map to different image axes".into(),
            ));
        }
        Ok(())
    }

    /// Worst-case localisation error of a descriptor grid with this stride, mm.
    pub fn quantization_bound_mm(&self, stride: usize) -> f64 {
        stride as f64 * self.mm_per_px_u.max(self.mm_per_px_v)
    }

    /// Pose-frame origin in image millimetres (the working image centre).
    pub fn frame_center_mm(&self) -> (f64, f64) {
        (
            (self.working_width_px as f64 - 1.0) * 0.5 * self.mm_per_px_u,
            (self.working_height_px as f64 - 1.0) * 0.5 * self.mm_per_px_v,
        )
    }

    /// Pixel coordinate to robot-frame millimetres (centre-relative, axis-mapped).
    pub fn px_to_frame(&self, p: (f64, f64)) -> (f64, f64) {
        let (a, b) = px_to_mm(p, self);
        let (cu, cv) = self.frame_center_mm();
        self.axes.image_to_robot(a - cu, b - cv)
    }

    pub fn frame_to_px(&self, p: (f64, f64)) -> (f64, f64) {
        let (a, b) = self.axes.robot_to_image(p.0, p.1);
        let (cu, cv) = self.frame_center_mm();
        mm_to_px((a + cu, b + cv), self)
    }
}

/// Scales a pixel coordinate to millimetres. Linear, origin-preserving.
pub fn px_to_mm(p: (f64, f64), cal: &SensorCalibration) -> (f64, f64) {
    (p.0 * cal.mm_per_px_u, p.1 * cal.mm_per_px_v)
}

/// Inverse of [`px_to_mm`].
pub fn mm_to_px(p: (f64, f64), cal: &SensorCalibration) -> (f64, f64) {
    (p.0 / cal.mm_per_px_u, p.1 / cal.mm_per_px_v)
}

/// An 8-bit tactile image, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct TactileImage {
    width: u32,
    height: u32,
    channels: u8,
    pixels: Vec<u8>,
    calibration: SensorCalibration,
}

impl TactileImage {
    pub fn new(
        width: u32,
        height: u32,
        channels: u8,
        pixels: Vec<u8>,
        calibration: SensorCalibration,
    ) -> Result<Self, SensorError> {
        if width == 0 || height == 0 {
            return Err(SensorError::InvalidImage("zero dimension".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(SensorError::InvalidImage(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        let expected = width as usize * height as usize * channels as usize;
        if pixels.len() != expected {
            return Err(SensorError::InvalidImage(format!(
                "buffer holds {} bytes, {width}x{height}x{channels} needs {expected}",
                pixels.len()
            )));
        }
        calibration.validate()?;
        Ok(Self {
            width,
            height,
            channels,
            pixels,
            calibration,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn calibration(&self) -> &SensorCalibration {
        &self.calibration
    }

    pub fn with_calibration(mut self, calibration: SensorCalibration) -> Result<Self, SensorError> {
        calibration.validate()?;
        self.calibration = calibration;
        Ok(self)
    }

    pub fn pixel(&self, x: u32, y: u32, c: u8) -> u8 {
        let idx =
            (y as usize * self.width as usize + x as usize) * self.channels as usize + c as usize;
        self.pixels[idx]
    }

    /// Intensities in `[0, 1]`, one plane per channel.
    pub fn channel_planes(&self) -> Vec<Vec<f64>> {
        let c = self.channels as usize;
        (0..c)
            .map(|ch| {
                self.pixels
                    .iter()
                    .skip(ch)
                    .step_by(c)
                    .map(|&p| p as f64 / 255.0)
                    .collect()
            })
            .collect()
    }

    /// Luma in `[0, 1]` (Rec. 601 weights for colour images).
    pub fn gray(&self) -> Vec<f64> {
        match self.channels {
            1 => self.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
            _ => self
                .pixels
                .chunks_exact(3)
                .map(|px| {
                    (0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64) / 255.0
                })
                .collect(),
        }
    }

    pub fn contains(&self, p: (f64, f64)) -> bool {
        p.0 >= 0.0 && p.1 >= 0.0 && p.0 < self.width as f64 && p.1 < self.height as f64
    }
}

/// How the working image is derived from a capture.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMode {
    #[default]
    Bilinear,
    CenterCrop,
}

/// What happens to `mm_per_px` after a bilinear resize.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalePolicy {
    /// Keep the incoming scale (0.075 mm/px by default).
    #[default]
    KeepNative,
    /// Sensing area divided by the new pixel count.
    Geometric,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResizeOptions {
    #[serde(default)]
    pub mode: ResizeMode,
    #[serde(default)]
    pub scale_policy: ScalePolicy,
}

/// Resamples (or crops) an image to `width × height` and updates its calibration.
pub fn resize_to_working(
    img: &TactileImage,
    width: u32,
    height: u32,
    opts: &ResizeOptions,
) -> Result<TactileImage, SensorError> {
    if width == 0 || height == 0 {
        return Err(SensorError::DegenerateTarget { width, height });
    }
    let mut cal = *img.calibration();
    cal.working_width_px = width;
    cal.working_height_px = height;
    let c = img.channels as usize;
    let (sw, sh) = (img.width as usize, img.height as usize);
    let (tw, th) = (width as usize, height as usize);

    let pixels = match opts.mode {
        ResizeMode::CenterCrop => {
            if width > img.width || height > img.height {
                return Err(SensorError::CropTooLarge {
                    target_w: width,
                    target_h: height,
                    src_w: img.width,
                    src_h: img.height,
                });
            }
            let x0 = (sw - tw) / 2;
            let y0 = (sh - th) / 2;
            let mut out = Vec::with_capacity(tw * th * c);
            for y in 0..th {
                let start = ((y0 + y) * sw + x0) * c;
                out.extend_from_slice(&img.pixels[start..start + tw * c]);
            }
            out
        }
        ResizeMode::Bilinear => {
            if opts.scale_policy == ScalePolicy::Geometric {
                cal.mm_per_px_u = cal.sensing_width_mm / width as f64;
                cal.mm_per_px_v = cal.sensing_height_mm / height as f64;
            }
            if tw == sw && th == sh {
                img.pixels.clone()
            } else {
                bilinear(&img.pixels, sw, sh, c, tw, th)
            }
        }
    };
    TactileImage::new(width, height, img.channels, pixels, cal)
}

fn bilinear(src: &[u8], sw: usize, sh: usize, c: usize, tw: usize, th: usize) -> Vec<u8> {
    let sx = sw as f64 / tw as f64;
    let sy = sh as f64 / th as f64;
    let axis = |t: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let s = ((t as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let xs: Vec<_> = (0..tw).map(|x| axis(x, sx, sw)).collect();
    let mut out = vec![0u8; tw * th * c];
    for y in 0..th {
        let (y0, y1, fy) = axis(y, sy, sh);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let at = |xx: usize, yy: usize| src[(yy * sw + xx) * c + ch] as f64;
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out[(y * tw + x) * c + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Ordered keypoints in pixel coordinates. Index `i` of a matched set
/// corresponds to index `i` of the goal set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeypointSet {
    points: Vec<(f64, f64)>,
}

impl KeypointSet {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, SensorError> {
        if points.is_empty() {
            return Err(SensorError::NoKeypoints);
        }
        if let Some(index) = points
            .iter()
            .position(|p| !(p.0.is_finite() && p.1.is_finite()))
        {
            return Err(SensorError::NonFiniteKeypoint { index });
        }
        Ok(Self { points })
    }

    /// Builds the set and checks every point lies in `[0, width) × [0, height)`.
    pub fn within(points: Vec<(f64, f64)>, width: u32, height: u32) -> Result<Self, SensorError> {
        let set = Self::new(points)?;
        set.check_bounds(width, height)?;
        Ok(set)
    }

    pub fn check_bounds(&self, width: u32, height: u32) -> Result<(), SensorError> {
        for (index, &(u, v)) in self.points.iter().enumerate() {
            if !(u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64) {
                return Err(SensorError::KeypointOutOfBounds {
                    index,
                    u,
                    v,
                    width,
                    height,
                });
            }
        }
        Ok(())
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: (f64, f64), b: (f64, f64), tol: f64) -> bool {
        (a.0 - b.0).abs() < tol && (a.1 - b.1).abs() < tol
    }

    #[test]
    fn px_mm_reference_values() {
        let cal = SensorCalibration::native();
        assert_eq!(px_to_mm((0.0, 0.0), &cal), (0.0, 0.0));
        assert!(close(px_to_mm((240.0, 320.0), &cal), (18.0, 24.0), 1e-12));
        assert!((px_to_mm((50.0, 0.0), &cal).0 - 3.75).abs() < 1e-12);
        assert!(close(mm_to_px((3.75, 0.0), &cal), (50.0, 0.0), 1e-12));
        assert_eq!(mm_to_px((0.0, 0.0), &cal), (0.0, 0.0));
    }

    #[test]
    fn native_extent_matches_sensing_area() {
        let cal = SensorCalibration::native();
        let (w, h) = px_to_mm(
            (cal.native_width_px as f64, cal.native_height_px as f64),
            &cal,
        );
        assert!((w - cal.sensing_width_mm).abs() < 1e-12);
        assert!((h - cal.sensing_height_mm).abs() < 1e-12);
    }

    #[test]
    fn working_aspect_close_to_native() {
        let ru: f64 = 240.0 / 224.0;
        let rv = 320.0 / 298.0;
        assert!((ru - rv).abs() / ru < 0.003);
    }

    #[test]
    fn calibration_validation() {
        let mut cal = SensorCalibration::working();
        assert!(cal.validate().is_ok());
        cal.mm_per_px_u = 0.0;
        assert!(cal.validate().is_err());
        let mut cal = SensorCalibration::working();
        cal.mm_per_px_v = f64::INFINITY;
        assert!(cal.validate().is_err());
        let mut cal = SensorCalibration::working();
        cal.axes = AxisMapping {
            x: SignedAxis::PlusU,
            z: SignedAxis::MinusU,
        };
        assert!(cal.validate().is_err());
    }

    #[test]
    fn axis_mapping_round_trip_and_handedness() {
        let default = AxisMapping::default();
        assert_eq!(default.handedness(), 1.0);
        let swapped = AxisMapping {
            x: SignedAxis::PlusV,
            z: SignedAxis::PlusU,
        };
        assert_eq!(swapped.handedness(), -1.0);
        let flipped = AxisMapping {
            x: SignedAxis::MinusU,
            z: SignedAxis::MinusV,
        };
        assert_eq!(flipped.handedness(), 1.0);
        for m in [default, swapped, flipped] {
            let (x, z) = m.image_to_robot(1.5, -2.0);
            assert_eq!(m.robot_to_image(x, z), (1.5, -2.0));
        }
    }

    #[test]
    fn image_rejects_bad_buffers() {
        let cal = SensorCalibration::working();
        assert!(TactileImage::new(2, 2, 3, vec![0; 12], cal).is_ok());
        assert!(TactileImage::new(2, 2, 3, vec![0; 11], cal).is_err());
        assert!(TactileImage::new(2, 2, 2, vec![0; 8], cal).is_err());
        assert!(TactileImage::new(0, 2, 1, vec![], cal).is_err());
    }

    fn ramp(w: u32, h: u32, c: u8) -> TactileImage {
        let pixels = (0..w as usize * h as usize * c as usize)
            .map(|i| (i * 37 % 251) as u8)
            .collect();
        TactileImage::new(w, h, c, pixels, SensorCalibration::native()).unwrap()
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = ramp(32, 24, 3);
        let same = resize_to_working(&img, 32, 24, &ResizeOptions::default()).unwrap();
        assert_eq!(same.pixels(), img.pixels());

        let flat = TactileImage::new(
            320,
            240,
            1,
            vec![117; 320 * 240],
            SensorCalibration::native(),
        )
        .unwrap();
        let out = resize_to_working(&flat, 298, 224, &ResizeOptions::default()).unwrap();
        assert!(out.pixels().iter().all(|&p| p == 117));
        assert_eq!(out.calibration().working_width_px, 298);
        assert_eq!(out.calibration().working_height_px, 224);
        assert_eq!(out.calibration().mm_per_px_u, NATIVE_MM_PER_PX);
    }

    #[test]
    fn resize_scale_policies_and_errors() {
        let img = ramp(320, 240, 1);
        let geo = resize_to_working(
            &img,
            298,
            224,
            &ResizeOptions {
                mode: ResizeMode::Bilinear,
                scale_policy: ScalePolicy::Geometric,
            },
        )
        .unwrap();
        assert!((geo.calibration().mm_per_px_u - 24.0 / 298.0).abs() < 1e-12);
        assert!((geo.calibration().mm_per_px_v - 18.0 / 224.0).abs() < 1e-12);

        let crop_opts = ResizeOptions {
            mode: ResizeMode::CenterCrop,
            ..Default::default()
        };
        let crop = resize_to_working(&img, 298, 224, &crop_opts).unwrap();
        assert_eq!(crop.pixel(0, 0, 0), img.pixel(11, 8, 0));
        assert_eq!(crop.calibration().mm_per_px_u, NATIVE_MM_PER_PX);
        assert!(resize_to_working(&img, 400, 224, &crop_opts).is_err());
        assert_eq!(
            resize_to_working(&img, 0, 224, &ResizeOptions::default()),
            Err(SensorError::DegenerateTarget {
                width: 0,
                height: 224
            })
        );
    }

    #[test]
    fn resize_is_deterministic() {
        let img = ramp(320, 240, 3);
        let a = resize_to_working(&img, 298, 224, &ResizeOptions::default()).unwrap();
        let b = resize_to_working(&img, 298, 224, &ResizeOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn keypoint_bounds() {
        assert!(KeypointSet::within(vec![(0.0, 0.0), (297.9, 223.9)], 298, 224).is_ok());
        assert!(matches!(
            KeypointSet::within(vec![(-1.0, 5.0)], 298, 224),
            Err(SensorError::KeypointOutOfBounds { index: 0, .. })
        ));
        assert!(KeypointSet::within(vec![(298.0, 5.0)], 298, 224).is_err());
        assert_eq!(KeypointSet::new(vec![]), Err(SensorError::NoKeypoints));
        assert!(KeypointSet::new(vec![(f64::NAN, 1.0)]).is_err());
    }

    #[test]
    fn frame_round_trip() {
        let cal = SensorCalibration::working();
        let c = cal.px_to_frame((148.5, 111.5));
        assert!(close(c, (0.0, 0.0), 1e-12));
        let p = (12.25, 200.0);
        assert!(close(cal.frame_to_px(cal.px_to_frame(p)), p, 1e-9));
    }

    proptest! {
        #[test]
        fn px_mm_inverse(u in -1e4f64..1e4, v in -1e4f64..1e4, su in 1e-3f64..1.0, sv in 1e-3f64..1.0) {
            let cal = SensorCalibration { mm_per_px_u: su, mm_per_px_v: sv, ..SensorCalibration::native() };
            let back = mm_to_px(px_to_mm((u, v), &cal), &cal);
            prop_assert!((back.0 - u).abs() < 1e-9 && (back.1 - v).abs() < 1e-9);
        }
    }
}
