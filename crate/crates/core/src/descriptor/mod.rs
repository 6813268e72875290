//! Dense descriptors: a strided grid of unit-norm feature vectors.
//!
//! The built-in backend concatenates, per grid cell,
//!
//! - a 5×5 grid of box-filtered gray samples per scale, mean-subtracted and
//!   divided by their (floored) standard deviation,
//! - a magnitude-weighted gradient-orientation histogram over the patch,
//! - per-channel colour means relative to the gray mean,
//!
//! and L2-normalises the result. Cells whose support is flat (variance below
//! [`DescriptorParams::void_variance`]) are all-zero "void" cells.
//!
//! Maps computed elsewhere can be loaded through [`file`].

pub mod file;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sensor::TactileImage;

pub use file::{load_descriptor_file, save_descriptor_file, DescriptorFileError};

const PATCH_SAMPLES: i64 = 5;
const GRAY_WEIGHT: f64 = 1.0;
const HIST_WEIGHT: f64 = 0.6;
const COLOR_WEIGHT: f64 = 0.6;

#[derive(Debug, Error, PartialEq)]
pub enum DescriptorError {
    #[error("image {width}x{height} is smaller than one {patch}x{patch} patch")]
    ImageTooSmall { width: u32, height: u32, patch: u32 },
    #[error("invalid descriptor parameters: {0}")]
    InvalidParams(String),
    #[error("descriptor dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescriptorParams {
    /// Pixels between neighbouring cell centres.
    pub stride: usize,
    /// Half extent of the scale-1 sample grid, px.
    pub patch_radius: usize,
    pub orientation_bins: usize,
    /// Sample-spacing multipliers of the gray patch.
    pub scales: Vec<usize>,
    /// Lower bound on the patch standard deviation used for contrast normalisation.
    pub contrast_floor: f64,
    /// Support variance below which a cell is void.
    pub void_variance: f64,
}

impl Default for DescriptorParams {
    fn default() -> Self {
        Self {
            stride: 4,
            patch_radius: 8,
            orientation_bins: 8,
            scales: vec![1, 2],
            contrast_floor: 0.02,
            void_variance: 1e-6,
        }
    }
}

impl DescriptorParams {
    pub fn validate(&self) -> Result<(), DescriptorError> {
        let bad = |m: &str| Err(DescriptorError::InvalidParams(m.to_string()));
        if self.stride == 0 {
            return bad("stride must be >= 1");
        }
        if self.orientation_bins < 4 {
            return bad("orientation_bins must be >= 4");
        }
        if self.patch_radius < 2 {
            return bad("patch_radius must be >= 2");
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return bad("scales must be non-empty and positive");
        }
        if !(self.contrast_floor.is_finite() && self.contrast_floor > 0.0) {
            return bad("contrast_floor must be > 0");
        }
        if !(self.void_variance.is_finite() && self.void_variance >= 0.0) {
            return bad("void_variance must be >= 0");
        }
        Ok(())
    }

    /// Length of each cell vector.
    pub fn dim(&self) -> usize {
        (PATCH_SAMPLES * PATCH_SAMPLES) as usize * self.scales.len() + self.orientation_bins + 3
    }

    fn spacing(&self, scale: usize) -> i64 {
        ((scale * self.patch_radius) / 2).max(1) as i64
    }

    fn max_scale(&self) -> usize {
        self.scales.iter().copied().max().unwrap_or(1)
    }

    /// Half extent of everything a cell looks at, px.
    pub fn support_radius(&self) -> i64 {
        let s = self.spacing(self.max_scale());
        2 * s + s / 2
    }

    fn hist_radius(&self) -> i64 {
        (self.patch_radius * self.max_scale()) as i64
    }

    pub fn origin(&self) -> f32 {
        (self.stride / 2) as f32
    }
}

/// Grid of descriptor vectors over an image of `source_w × source_h`.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub stride: usize,
    pub origin_u: f32,
    pub origin_v: f32,
    pub source_w: u32,
    pub source_h: u32,
    pub data: Vec<f32>,
}

impl DescriptorMap {
    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.grid_w + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn is_void(&self, row: usize, col: usize) -> bool {
        self.cell(row, col).iter().all(|&x| x == 0.0)
    }

    pub fn cell_count(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Pixel coordinate of a (possibly fractional) cell position.
    pub fn cell_to_px(&self, row: f64, col: f64) -> (f64, f64) {
        (
            self.origin_u as f64 + col * self.stride as f64,
            self.origin_v as f64 + row * self.stride as f64,
        )
    }

    /// Fractional `(row, col)` of a pixel coordinate.
    pub fn px_to_cell(&self, p: (f64, f64)) -> (f64, f64) {
        (
            (p.1 - self.origin_v as f64) / self.stride as f64,
            (p.0 - self.origin_u as f64) / self.stride as f64,
        )
    }

    /// Nearest cell to a pixel coordinate, clamped to the grid.
    pub fn nearest_cell(&self, p: (f64, f64)) -> (usize, usize) {
        let (r, c) = self.px_to_cell(p);
        (
            r.round().clamp(0.0, (self.grid_h - 1) as f64) as usize,
            c.round().clamp(0.0, (self.grid_w - 1) as f64) as usize,
        )
    }

    pub fn all_void(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }
}

/// Cosine of the angle between two descriptors. Void (all-zero) inputs give
/// `-∞` so they never win an argmax.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64, DescriptorError> {
    if a.len() != b.len() {
        return Err(DescriptorError::DimMismatch(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Summed-area table with clamped box queries.
struct Integral {
    w: usize,
    h: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(plane: &[f64], w: usize, h: usize) -> Self {
        let mut sums = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += plane[y * w + x];
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w, h, sums }
    }

    /// Sum and pixel count over `[cx-r, cx+r] × [cy-r, cy+r]` clipped to the image.
    fn box_sum(&self, cx: i64, cy: i64, r: i64) -> (f64, f64) {
        let x0 = (cx - r).clamp(0, self.w as i64) as usize;
        let x1 = (cx + r + 1).clamp(0, self.w as i64) as usize;
        let y0 = (cy - r).clamp(0, self.h as i64) as usize;
        let y1 = (cy + r + 1).clamp(0, self.h as i64) as usize;
        if x1 <= x0 || y1 <= y0 {
            return (0.0, 0.0);
        }
        let s = |x: usize, y: usize| self.sums[y * (self.w + 1) + x];
        let sum = s(x1, y1) - s(x0, y1) - s(x1, y0) + s(x0, y0);
        (sum, ((x1 - x0) * (y1 - y0)) as f64)
    }

    fn box_mean(&self, cx: i64, cy: i64, r: i64) -> f64 {
        let (sum, n) = self.box_sum(cx, cy, r);
        if n > 0.0 {
            sum / n
        } else {
            0.0
        }
    }

    /// Box mean clamped so the window stays inside the image where possible.
    fn clamped_mean(&self, cx: i64, cy: i64, r: i64) -> f64 {
        let cx = cx.clamp(0, self.w as i64 - 1);
        let cy = cy.clamp(0, self.h as i64 - 1);
        self.box_mean(cx, cy, r)
    }
}

fn grid_len(extent: u32, origin: usize, stride: usize) -> usize {
    let extent = extent as usize;
    if extent <= origin {
        0
    } else {
        (extent - 1 - origin) / stride + 1
    }
}

/// Computes the built-in dense descriptor map of `img`.
pub fn extract(
    img: &TactileImage,
    params: &DescriptorParams,
) -> Result<DescriptorMap, DescriptorError> {
    params.validate()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let patch = (2 * params.hist_radius() + 1) as u32;
    if img.width() < patch || img.height() < patch {
        return Err(DescriptorError::ImageTooSmall {
            width: img.width(),
            height: img.height(),
            patch,
        });
    }
    let origin = params.stride / 2;
    let grid_w = grid_len(img.width(), origin, params.stride);
    let grid_h = grid_len(img.height(), origin, params.stride);
    let dim = params.dim();

    let gray = img.gray();
    let gray_sq: Vec<f64> = gray.iter().map(|g| g * g).collect();
    let gray_int = Integral::new(&gray, w, h);
    let gray_sq_int = Integral::new(&gray_sq, w, h);
    let color_ints: Vec<Integral> = if img.channels() == 3 {
        img.channel_planes()
            .iter()
            .map(|p| Integral::new(p, w, h))
            .collect()
    } else {
        Vec::new()
    };
    let hist_ints = orientation_integrals(&gray, w, h, params.orientation_bins);

    let support = params.support_radius();
    let color_radius = params.patch_radius as i64;
    let hist_radius = params.hist_radius();

    let rows: Vec<Vec<f32>> = (0..grid_h)
        .into_par_iter()
        .map(|row| {
            let mut out = Vec::with_capacity(grid_w * dim);
            let mut v = vec![0.0f64; dim];
            for col in 0..grid_w {
                let cu = (origin + col * params.stride) as i64;
                let cv = (origin + row * params.stride) as i64;
                let (s, n) = gray_int.box_sum(cu, cv, support);
                let (s2, _) = gray_sq_int.box_sum(cu, cv, support);
                let mean = s / n;
                let var = (s2 / n - mean * mean).max(0.0);
                if var < params.void_variance {
                    out.extend(std::iter::repeat_n(0.0f32, dim));
                    continue;
                }
                let support_std = var.sqrt().max(params.contrast_floor);
                v.iter_mut().for_each(|x| *x = 0.0);
                let mut k = 0;

                for &scale in &params.scales {
                    let spacing = params.spacing(scale);
                    let half = spacing / 2;
                    let block = &mut v[k..k + (PATCH_SAMPLES * PATCH_SAMPLES) as usize];
                    let mut i = 0;
                    for dy in -2..=2 {
                        for dx in -2..=2 {
                            block[i] =
                                gray_int.clamped_mean(cu + dx * spacing, cv + dy * spacing, half);
                            i += 1;
                        }
                    }
                    let m = block.iter().sum::<f64>() / block.len() as f64;
                    let sd = (block.iter().map(|x| (x - m).powi(2)).sum::<f64>()
                        / block.len() as f64)
                        .sqrt()
                        .max(params.contrast_floor);
                    let norm = GRAY_WEIGHT / (sd * (block.len() as f64).sqrt());
                    block.iter_mut().for_each(|x| *x = (*x - m) * norm);
                    k += block.len();
                }

                let hist = &mut v[k..k + params.orientation_bins];
                for (b, int) in hist_ints.iter().enumerate() {
                    hist[b] = int.box_sum(cu, cv, hist_radius).0;
                }
                let hn = hist.iter().map(|x| x * x).sum::<f64>().sqrt();
                if hn > 1e-12 {
                    hist.iter_mut().for_each(|x| *x *= HIST_WEIGHT / hn);
                }
                k += params.orientation_bins;

                if !color_ints.is_empty() {
                    let gm = gray_int.box_mean(cu, cv, color_radius);
                    for (c, int) in color_ints.iter().enumerate() {
                        v[k + c] =
                            COLOR_WEIGHT * (int.box_mean(cu, cv, color_radius) - gm) / support_std;
                    }
                }

                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    out.extend(v.iter().map(|x| (x / norm) as f32));
                } else {
                    out.extend(std::iter::repeat_n(0.0f32, dim));
                }
            }
            out
        })
        .collect();

    Ok(DescriptorMap {
        grid_h,
        grid_w,
        dim,
        stride: params.stride,
        origin_u: origin as f32,
        origin_v: origin as f32,
        source_w: img.width(),
        source_h: img.height(),
        data: rows.concat(),
    })
}

/// One summed-area table per orientation bin, magnitude-weighted with linear
/// interpolation between neighbouring bins.
fn orientation_integrals(gray: &[f64], w: usize, h: usize, bins: usize) -> Vec<Integral> {
    let mut planes = vec![vec![0.0; w * h]; bins];
    let at = |x: usize, y: usize| gray[y * w + x];
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let gx = (at(xr, y) - at(xl, y)) / (xr - xl).max(1) as f64;
            let gy = (at(x, yd) - at(x, yu)) / (yd - yu).max(1) as f64;
            let mag = gx.hypot(gy);
            if mag == 0.0 {
                continue;
            }
            let pos = (gy.atan2(gx) / std::f64::consts::TAU).rem_euclid(1.0) * bins as f64;
            let b0 = pos.floor() as usize % bins;
            let frac = pos - pos.floor();
            planes[b0][y * w + x] += mag * (1.0 - frac);
            planes[(b0 + 1) % bins][y * w + x] += mag * frac;
        }
    }
    planes.iter().map(|p| Integral::new(p, w, h)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::displacement::Displacement;
    use crate::gel_sim::{render, ScenePreset};
    use crate::sensor::SensorCalibration;

    fn gear_image(offset: Displacement) -> TactileImage {
        let scene = ScenePreset::by_name("gear").unwrap().scene.with_noise(0.0);
        render(&scene, &offset, &SensorCalibration::working(), 0).unwrap()
    }

    #[test]
    fn default_layout() {
        let p = DescriptorParams::default();
        assert_eq!(p.dim(), 61);
        assert_eq!(p.origin(), 2.0);
        let map = extract(&gear_image(Displacement::IDENTITY), &p).unwrap();
        assert_eq!((map.grid_w, map.grid_h), (74, 56));
        assert_eq!(map.data.len(), 74 * 56 * 61);
        let last = map.cell_to_px((map.grid_h - 1) as f64, (map.grid_w - 1) as f64);
        assert!(last.0 < 298.0 && last.1 < 224.0);
    }

    #[test]
    fn normalization_invariant() {
        let scene = ScenePreset::by_name("gear").unwrap().scene;
        let img = render(
            &scene,
            &Displacement::new(0.3, 0.2, 0.1),
            &SensorCalibration::working(),
            4,
        )
        .unwrap();
        for image in [img, gear_image(Displacement::IDENTITY)] {
            let map = extract(&image, &DescriptorParams::default()).unwrap();
            let mut void = 0;
            for r in 0..map.grid_h {
                for c in 0..map.grid_w {
                    let n: f64 = map
                        .cell(r, c)
                        .iter()
                        .map(|&x| (x as f64).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    if n == 0.0 {
                        void += 1;
                    } else {
                        assert!((n - 1.0).abs() <= 1e-4, "norm {n}");
                    }
                }
            }
            assert!(void < map.cell_count());
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let img = gear_image(Displacement::new(1.0, 0.5, 0.0));
        let a = extract(&img, &DescriptorParams::default()).unwrap();
        let b = extract(&img, &DescriptorParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_small_and_bad_params() {
        let cal = SensorCalibration::working();
        let img = TactileImage::new(20, 20, 1, vec![0; 400], cal).unwrap();
        assert!(matches!(
            extract(&img, &DescriptorParams::default()),
            Err(DescriptorError::ImageTooSmall { .. })
        ));
        let p = DescriptorParams {
            orientation_bins: 3,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = DescriptorParams {
            stride: 0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn flat_image_is_all_void() {
        let cal = SensorCalibration::working();
        let img = TactileImage::new(298, 224, 3, vec![115; 298 * 224 * 3], cal).unwrap();
        assert!(extract(&img, &DescriptorParams::default())
            .unwrap()
            .all_void());
    }

    #[test]
    fn cosine_examples() {
        let v = [0.6f32, 0.8, 0.0];
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-6);
        assert!((cosine_similarity(&v, &neg).unwrap() + 1.0).abs() < 1e-6);
        assert!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-12);
        assert_eq!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(),
            f64::NEG_INFINITY
        );
        assert_eq!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(DescriptorError::DimMismatch(1, 2))
        );
    }

    fn shifted(img: &TactileImage, du: i64) -> TactileImage {
        let (w, h, c) = (
            img.width() as i64,
            img.height() as i64,
            img.channels() as i64,
        );
        let mut px = vec![0u8; img.pixels().len()];
        for y in 0..h {
            for x in 0..w {
                let sx = (x - du).clamp(0, w - 1);
                for ch in 0..c {
                    px[((y * w + x) * c + ch) as usize] = img.pixel(sx as u32, y as u32, ch as u8);
                }
            }
        }
        TactileImage::new(
            img.width(),
            img.height(),
            img.channels(),
            px,
            *img.calibration(),
        )
        .unwrap()
    }

    #[test]
    fn stride_shift_equivariance() {
        let params = DescriptorParams::default();
        let img = gear_image(Displacement::IDENTITY);
        let moved = shifted(&img, params.stride as i64);
        let a = extract(&img, &params).unwrap();
        let b = extract(&moved, &params).unwrap();
        let margin = (params.support_radius() as usize).div_ceil(params.stride) + 2;
        let mut min_cos: f64 = 1.0;
        for r in margin..a.grid_h - margin {
            for c in margin..a.grid_w - margin - 1 {
                if a.is_void(r, c) {
                    continue;
                }
                let cos = cosine_similarity(a.cell(r, c), b.cell(r, c + 1)).unwrap();
                min_cos = min_cos.min(cos);
            }
        }
        assert!(min_cos >= 0.99, "min interior cosine {min_cos}");
    }

    #[test]
    fn brightness_invariance() {
        let params = DescriptorParams::default();
        let img = gear_image(Displacement::IDENTITY);
        let bright: Vec<u8> = img
            .pixels()
            .iter()
            .map(|&p| (p as f64 * 1.2).round().min(255.0) as u8)
            .collect();
        let bright =
            TactileImage::new(img.width(), img.height(), 3, bright, *img.calibration()).unwrap();
        let a = extract(&img, &params).unwrap();
        let b = extract(&bright, &params).unwrap();
        let mut worst: f64 = 0.0;
        for r in 0..a.grid_h {
            for c in 0..a.grid_w {
                if a.is_void(r, c) || b.is_void(r, c) {
                    continue;
                }
                worst = worst.max(1.0 - cosine_similarity(a.cell(r, c), b.cell(r, c)).unwrap());
            }
        }
        assert!(worst < 0.05, "worst cosine drop {worst}");
    }
}
