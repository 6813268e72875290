//! Keypoint correspondence: for each goal keypoint, the most similar cell of
//! the current descriptor map, refined to sub-cell precision and scored.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{cosine_similarity, DescriptorError, DescriptorMap};
use crate::sensor::KeypointSet;

#[derive(Debug, Error, PartialEq)]
pub enum CorrespondenceError {
    #[error("current descriptor map has no contact (all cells void)")]
    NoContact,
    #[error("goal keypoint {index} sits on a void descriptor")]
    VoidKeypoint { index: usize },
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubpixelMethod {
    /// Independent parabolas along u and v.
    Separable,
    /// One quadratic surface with a u·v term.
    #[default]
    Quadratic2d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrespondOpts {
    pub subpixel: bool,
    pub subpixel_method: SubpixelMethod,
    pub min_similarity: f64,
    pub min_ratio: f64,
    /// Cells closer than this to the best cell are skipped when looking for
    /// the runner-up.
    pub suppression_radius_cells: f64,
    /// Drop low-confidence matches before estimation when at least the
    /// estimator's minimum remain.
    pub exclude_low_confidence: bool,
    /// Subtract the offset the matcher reports when matching the goal map
    /// against itself, cancelling grid-phase bias near the goal pose.
    pub self_calibrate: bool,
}

impl Default for CorrespondOpts {
    fn default() -> Self {
        Self {
            subpixel: true,
            subpixel_method: SubpixelMethod::default(),
            min_similarity: 0.7,
            min_ratio: 1.05,
            suppression_radius_cells: 3.0,
            exclude_low_confidence: false,
            self_calibrate: true,
        }
    }
}

mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub goal_point: (f64, f64),
    pub found_point: (f64, f64),
    /// Similarity at the refined point, never below the best cell's.
    pub similarity: f64,
    /// Best over runner-up similarity; `null`/∞ when the runner-up is not positive.
    #[serde(with = "unbounded")]
    pub ratio: f64,
    pub confident: bool,
    /// The goal keypoint lay outside the goal grid and was clamped to it.
    #[serde(default)]
    pub goal_clamped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointDescriptor {
    pub vector: Vec<f32>,
    pub clamped: bool,
}

/// Bilinear blend of the four cells around `p`, re-normalised.
pub fn keypoint_descriptor(map: &DescriptorMap, p: (f64, f64)) -> KeypointDescriptor {
    let (r, c) = map.px_to_cell(p);
    let max_r = (map.grid_h - 1) as f64;
    let max_c = (map.grid_w - 1) as f64;
    let rc = r.clamp(0.0, max_r);
    let cc = c.clamp(0.0, max_c);
    let clamped = rc != r || cc != c;

    let r0 = rc.floor() as usize;
    let c0 = cc.floor() as usize;
    let r1 = (r0 + 1).min(map.grid_h - 1);
    let c1 = (c0 + 1).min(map.grid_w - 1);
    let fr = rc - r0 as f64;
    let fc = cc - c0 as f64;

    let mut acc = vec![0.0f64; map.dim];
    for (row, col, wgt) in [
        (r0, c0, (1.0 - fr) * (1.0 - fc)),
        (r0, c1, (1.0 - fr) * fc),
        (r1, c0, fr * (1.0 - fc)),
        (r1, c1, fr * fc),
    ] {
        if wgt == 0.0 {
            continue;
        }
        for (a, &x) in acc.iter_mut().zip(map.cell(row, col)) {
            *a += wgt * x as f64;
        }
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    let vector = if norm > 0.0 {
        acc.iter().map(|x| (x / norm) as f32).collect()
    } else {
        vec![0.0; map.dim]
    };
    KeypointDescriptor { vector, clamped }
}

/// Cosine similarity of `query` against every cell, row-major; void cells are `-∞`.
pub fn similarity_field(map: &DescriptorMap, query: &[f32]) -> Result<Vec<f64>, DescriptorError> {
    (0..map.cell_count())
        .map(|i| cosine_similarity(query, &map.data[i * map.dim..(i + 1) * map.dim]))
        .collect()
}

/// Parabola vertex along each axis of a 3×3 neighbourhood (`[row][col]`),
/// returned as `(du, dv)` in cells, clamped to ±0.5.
pub fn refine_subpixel(n: &[[f64; 3]; 3]) -> (f64, f64) {
    let vertex = |minus: f64, center: f64, plus: f64| {
        let curvature = minus - 2.0 * center + plus;
        if !(minus.is_finite() && plus.is_finite()) || curvature.is_nan() || curvature >= 0.0 {
            return 0.0;
        }
        ((minus - plus) / (2.0 * curvature)).clamp(-0.5, 0.5)
    };
    (
        vertex(n[1][0], n[1][1], n[1][2]),
        vertex(n[0][1], n[1][1], n[2][1]),
    )
}

/// Least-squares quadratic surface over the 3×3 neighbourhood, cross term
/// included. Falls back to [`refine_subpixel`] when the neighbourhood is
/// incomplete, the surface is not a maximum, or its vertex leaves the
/// neighbourhood.
pub fn refine_subpixel_2d(n: &[[f64; 3]; 3]) -> (f64, f64) {
    if n.iter().flatten().any(|s| !s.is_finite()) {
        return refine_subpixel(n);
    }
    let col = |c: usize| n[0][c] + n[1][c] + n[2][c];
    let row = |r: usize| n[r][0] + n[r][1] + n[r][2];
    let b = (col(2) - col(0)) / 6.0;
    let c = (row(2) - row(0)) / 6.0;
    let d = (col(0) - 2.0 * col(1) + col(2)) / 6.0;
    let f = (row(0) - 2.0 * row(1) + row(2)) / 6.0;
    let e = (n[2][2] - n[2][0] - n[0][2] + n[0][0]) / 4.0;
    let det = 4.0 * d * f - e * e;
    if !(d < 0.0 && det > 0.0) {
        return refine_subpixel(n);
    }
    let du = (e * c - 2.0 * f * b) / det;
    let dv = (e * b - 2.0 * d * c) / det;
    if du.abs() > 1.0 || dv.abs() > 1.0 {
        return refine_subpixel(n);
    }
    (du.clamp(-0.5, 0.5), dv.clamp(-0.5, 0.5))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub row: usize,
    pub col: usize,
    pub similarity: f64,
    /// Sub-cell offset `(du, dv)`.
    pub offset: (f64, f64),
    /// Best similarity further than the suppression radius from the peak.
    pub runner_up: Option<f64>,
}

impl Peak {
    pub fn ratio(&self) -> f64 {
        match self.runner_up {
            Some(s) if s > 0.0 => self.similarity / s,
            _ => f64::INFINITY,
        }
    }
}

/// Arg-max of a similarity field (ties to the lowest row, then column).
pub fn locate_peak(
    field: &[f64],
    grid_h: usize,
    grid_w: usize,
    opts: &CorrespondOpts,
) -> Option<Peak> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in field.iter().enumerate() {
        if s.is_finite() && best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    let (idx, similarity) = best?;
    let (row, col) = (idx / grid_w, idx % grid_w);

    let radius2 = opts.suppression_radius_cells * opts.suppression_radius_cells;
    let runner_up = field
        .iter()
        .enumerate()
        .filter(|&(i, s)| {
            let dr = (i / grid_w) as f64 - row as f64;
            let dc = (i % grid_w) as f64 - col as f64;
            s.is_finite() && dr * dr + dc * dc > radius2
        })
        .map(|(_, &s)| s)
        .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s))));

    let offset = if opts.subpixel {
        let mut n = [[f64::NEG_INFINITY; 3]; 3];
        for (dr, line) in n.iter_mut().enumerate() {
            for (dc, slot) in line.iter_mut().enumerate() {
                let (r, c) = (row as i64 + dr as i64 - 1, col as i64 + dc as i64 - 1);
                if r >= 0 && c >= 0 && (r as usize) < grid_h && (c as usize) < grid_w {
                    *slot = field[r as usize * grid_w + c as usize];
                }
            }
        }
        match opts.subpixel_method {
            SubpixelMethod::Separable => refine_subpixel(&n),
            SubpixelMethod::Quadratic2d => refine_subpixel_2d(&n),
        }
    } else {
        (0.0, 0.0)
    };

    Some(Peak {
        row,
        col,
        similarity,
        offset,
        runner_up,
    })
}

fn peak_px(map: &DescriptorMap, peak: &Peak) -> (f64, f64) {
    map.cell_to_px(
        peak.row as f64 + peak.offset.1,
        peak.col as f64 + peak.offset.0,
    )
}

/// Finds, for every goal keypoint, its best match in `current`.
pub fn correspond(
    goal: &DescriptorMap,
    current: &DescriptorMap,
    keypoints: &KeypointSet,
    opts: &CorrespondOpts,
) -> Result<Vec<Match>, CorrespondenceError> {
    if goal.dim != current.dim {
        return Err(DescriptorError::DimMismatch(goal.dim, current.dim).into());
    }
    if current.all_void() {
        return Err(CorrespondenceError::NoContact);
    }
    keypoints
        .points()
        .iter()
        .enumerate()
        .map(|(index, &p)| {
            let kd = keypoint_descriptor(goal, p);
            if kd.vector.iter().all(|&x| x == 0.0) {
                return Err(CorrespondenceError::VoidKeypoint { index });
            }
            let field = similarity_field(current, &kd.vector)?;
            let peak = locate_peak(&field, current.grid_h, current.grid_w, opts)
                .ok_or(CorrespondenceError::NoContact)?;
            let (mut u, mut v) = peak_px(current, &peak);
            if opts.self_calibrate {
                let own = similarity_field(goal, &kd.vector)?;
                if let Some(self_peak) = locate_peak(&own, goal.grid_h, goal.grid_w, opts) {
                    let (su, sv) = peak_px(goal, &self_peak);
                    u -= su - p.0;
                    v -= sv - p.1;
                }
            }
            let found_point = (
                u.clamp(0.0, current.source_w as f64 - 1.0),
                v.clamp(0.0, current.source_h as f64 - 1.0),
            );
            let ratio = peak.ratio();
            let at_found = cosine_similarity(
                &kd.vector,
                &keypoint_descriptor(current, found_point).vector,
            )?;
            let similarity = peak.similarity.max(at_found).min(1.0);
            Ok(Match {
                goal_point: p,
                found_point,
                similarity,
                ratio,
                confident: similarity >= opts.min_similarity && ratio >= opts.min_ratio,
                goal_clamped: kd.clamped,
            })
        })
        .collect()
}

/// Keypoint pairs handed to the estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub goal: KeypointSet,
    pub current: KeypointSet,
    /// Fewer than `min_k` confident matches were available.
    pub low_confidence: bool,
}

/// Picks the matches used for estimation. With `confident_only`, the
/// confident subset is used when it still has `min_k` members; otherwise all
/// matches are used and the selection is flagged.
pub fn select_matches(matches: &[Match], confident_only: bool, min_k: usize) -> Option<Selection> {
    let confident: Vec<&Match> = matches.iter().filter(|m| m.confident).collect();
    let low_confidence = confident.len() < min_k;
    let chosen: Vec<&Match> = if confident_only && confident.len() >= min_k {
        confident
    } else {
        matches.iter().collect()
    };
    let goal = KeypointSet::new(chosen.iter().map(|m| m.goal_point).collect()).ok()?;
    let current = KeypointSet::new(chosen.iter().map(|m| m.found_point).collect()).ok()?;
    Some(Selection {
        goal,
        current,
        low_confidence,
    })
}
