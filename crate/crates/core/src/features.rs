//! Scale-space keypoints, gradient-histogram descriptors and ratio-test
//! matching.
//!
//! This follows the classic SIFT construction: a Gaussian pyramid with
//! `scales_per_octave + 3` levels per octave, difference-of-Gaussian
//! extrema refined by a quadratic fit, contrast and edge rejection, 36-bin
//! orientation assignment and 4x4x8 descriptors.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
#[allow(unused_imports)]
use num_traits::Float as _;
use serde::{Deserialize, Serialize};

use crate::epipolar::Correspondence;
use crate::image::{Frame, Plane};
use crate::{Error, Result};

/// Blur the input is assumed to already carry, in pixels.
const ASSUMED_BLUR: f64 = 0.5;
const BORDER: usize = 5;
const MAX_REFINE_STEPS: usize = 5;
const ORI_BINS: usize = 36;
const ORI_PEAK_RATIO: f64 = 0.8;
const ORI_SIGMA_FACTOR: f64 = 1.5;
const DESC_WIDTH: usize = 4;
const DESC_BINS: usize = 8;
const DESC_LEN: usize = DESC_WIDTH * DESC_WIDTH * DESC_BINS;
const DESC_CELL_FACTOR: f64 = 3.0;
const DESC_CLIP: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub octaves: usize,
    pub scales_per_octave: usize,
    pub base_sigma: f64,
    pub contrast_threshold: f64,
    pub edge_ratio_threshold: f64,
    pub ratio_threshold: f64,
    pub mutual: bool,
    pub max_keypoints: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            octaves: 4,
            scales_per_octave: 3,
            base_sigma: 1.6,
            contrast_threshold: 0.03,
            edge_ratio_threshold: 10.0,
            ratio_threshold: 0.8,
            mutual: true,
            max_keypoints: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Octave {
    /// `scales_per_octave + 3` Gaussian levels.
    pub gaussians: Vec<Plane>,
    /// `scales_per_octave + 2` difference-of-Gaussian levels.
    pub dogs: Vec<Plane>,
}

#[derive(Debug, Clone)]
pub struct ScaleSpace {
    pub octaves: Vec<Octave>,
    pub scales_per_octave: usize,
    pub base_sigma: f64,
}

impl ScaleSpace {
    /// Blur of level `(octave, scale)` measured in input-image pixels.
    pub fn effective_sigma(&self, octave: usize, scale: f64) -> f64 {
        effective_sigma(self.base_sigma, self.scales_per_octave, octave, scale)
    }
}

pub fn effective_sigma(base_sigma: f64, scales_per_octave: usize, octave: usize, scale: f64) -> f64 {
    base_sigma * 2f64.powf(octave as f64 + scale / scales_per_octave as f64)
}

pub fn build_scale_space(
    frame: &Frame,
    octaves: usize,
    scales_per_octave: usize,
    base_sigma: f64,
) -> Result<ScaleSpace> {
    if octaves == 0 {
        return Err(Error::contract("scale space needs at least one octave"));
    }
    if scales_per_octave < 3 {
        return Err(Error::contract("scale space needs at least 3 scales per octave"));
    }
    if !(base_sigma > ASSUMED_BLUR) {
        return Err(Error::contract(format!("base sigma must exceed {ASSUMED_BLUR}")));
    }
    let min_dim = frame.width().min(frame.height());
    let needed = (1usize << octaves) * 16;
    if min_dim < needed {
        let fit = (min_dim / 16).max(1).ilog2();
        return Err(Error::contract(format!(
            "{octaves} octaves need frames of at least {needed} px per edge, got {min_dim}; use at most {fit} octaves"
        )));
    }
    let levels = scales_per_octave + 3;
    let k = 2f64.powf(1.0 / scales_per_octave as f64);
    // Incremental blur between consecutive levels, in octave pixels.
    let steps: Vec<f64> = (1..levels)
        .map(|s| {
            let prev = base_sigma * k.powi(s as i32 - 1);
            let next = prev * k;
            (next * next - prev * prev).sqrt()
        })
        .collect();

    let mut out = Vec::with_capacity(octaves);
    let mut seed_level = frame
        .to_plane()
        .blurred((base_sigma * base_sigma - ASSUMED_BLUR * ASSUMED_BLUR).sqrt());
    for _ in 0..octaves {
        let mut gaussians = Vec::with_capacity(levels);
        gaussians.push(seed_level);
        for step in &steps {
            let next = gaussians.last().expect("non-empty").blurred(*step);
            gaussians.push(next);
        }
        let dogs = gaussians.windows(2).map(|w| w[1].sub(&w[0])).collect();
        seed_level = gaussians[scales_per_octave].downsample2();
        out.push(Octave { gaussians, dogs });
    }
    Ok(ScaleSpace {
        octaves: out,
        scales_per_octave,
        base_sigma,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    /// Position in input-image pixels.
    pub x: f64,
    pub y: f64,
    /// Detection sigma in input-image pixels.
    pub scale: f64,
    /// Dominant gradient direction in `[0, 2 pi)`, image axes (y down).
    pub orientation: f64,
    /// Interpolated |DoG| at the extremum.
    pub response: f64,
    pub octave: usize,
    /// Integer DoG layer the extremum was refined to.
    pub layer: usize,
    /// Sigma relative to the octave's own pixel grid.
    pub octave_sigma: f64,
}

struct Extremum {
    octave: usize,
    layer: usize,
    x: f64,
    y: f64,
    octave_sigma: f64,
    response: f64,
}

/// Detect oriented keypoints in a scale space. Keypoints are sorted by
/// descending response.
pub fn detect_keypoints(space: &ScaleSpace, contrast_threshold: f64, edge_ratio_threshold: f64) -> Vec<Keypoint> {
    let mut keypoints = Vec::new();
    for (o, octave) in space.octaves.iter().enumerate() {
        let dogs = &octave.dogs;
        let (w, h) = (dogs[0].width, dogs[0].height);
        if w <= 2 * BORDER || h <= 2 * BORDER {
            continue;
        }
        for s in 1..dogs.len() - 1 {
            for y in BORDER..h - BORDER {
                for x in BORDER..w - BORDER {
                    let v = dogs[s].at(x, y);
                    if v.abs() <= 0.5 * contrast_threshold || !is_extremum(dogs, s, x, y) {
                        continue;
                    }
                    if let Some(ext) = refine(space, o, s, x, y, contrast_threshold, edge_ratio_threshold) {
                        let scale = 2f64.powi(o as i32);
                        for orientation in orientations(&octave.gaussians[ext.layer], ext.x, ext.y, ext.octave_sigma) {
                            keypoints.push(Keypoint {
                                x: ext.x * scale,
                                y: ext.y * scale,
                                scale: ext.octave_sigma * scale,
                                orientation,
                                response: ext.response,
                                octave: ext.octave,
                                layer: ext.layer,
                                octave_sigma: ext.octave_sigma,
                            });
                        }
                    }
                }
            }
        }
    }
    keypoints.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
            .then(a.orientation.total_cmp(&b.orientation))
    });
    keypoints
}

fn is_extremum(dogs: &[Plane], s: usize, x: usize, y: usize) -> bool {
    let v = dogs[s].at(x, y);
    let (mut is_max, mut is_min) = (v > 0.0, v < 0.0);
    for level in &dogs[s - 1..=s + 1] {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                let n = level.at(xx, yy);
                is_max &= v >= n;
                is_min &= v <= n;
            }
        }
        if !is_max && !is_min {
            return false;
        }
    }
    is_max || is_min
}

fn refine(
    space: &ScaleSpace,
    o: usize,
    s0: usize,
    x0: usize,
    y0: usize,
    contrast_threshold: f64,
    edge_ratio: f64,
) -> Option<Extremum> {
    let dogs = &space.octaves[o].dogs;
    let (w, h) = (dogs[0].width as isize, dogs[0].height as isize);
    let (mut x, mut y, mut s) = (x0 as isize, y0 as isize, s0 as isize);
    let mut offset = Vector3::zeros();
    let mut grad = Vector3::zeros();
    let mut converged = false;
    for _ in 0..MAX_REFINE_STEPS {
        let d = |ds: isize, dx: isize, dy: isize| dogs[(s + ds) as usize].at((x + dx) as usize, (y + dy) as usize);
        let v = d(0, 0, 0);
        grad = Vector3::new(
            (d(0, 1, 0) - d(0, -1, 0)) / 2.0,
            (d(0, 0, 1) - d(0, 0, -1)) / 2.0,
            (d(1, 0, 0) - d(-1, 0, 0)) / 2.0,
        );
        let dxx = d(0, 1, 0) + d(0, -1, 0) - 2.0 * v;
        let dyy = d(0, 0, 1) + d(0, 0, -1) - 2.0 * v;
        let dss = d(1, 0, 0) + d(-1, 0, 0) - 2.0 * v;
        let dxy = (d(0, 1, 1) - d(0, 1, -1) - d(0, -1, 1) + d(0, -1, -1)) / 4.0;
        let dxs = (d(1, 1, 0) - d(1, -1, 0) - d(-1, 1, 0) + d(-1, -1, 0)) / 4.0;
        let dys = (d(1, 0, 1) - d(1, 0, -1) - d(-1, 0, 1) + d(-1, 0, -1)) / 4.0;
        let hess = Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
        offset = -(hess.lu().solve(&grad)?);
        if offset.iter().all(|c| c.abs() < 0.5) {
            converged = true;
            break;
        }
        if offset.iter().any(|c| !c.is_finite() || c.abs() > (w.max(h)) as f64) {
            return None;
        }
        x += offset.x.round() as isize;
        y += offset.y.round() as isize;
        s += offset.z.round() as isize;
        if s < 1 || s >= dogs.len() as isize - 1 {
            return None;
        }
        if x < BORDER as isize || y < BORDER as isize || x >= w - BORDER as isize || y >= h - BORDER as isize {
            return None;
        }
    }
    if !converged {
        return None;
    }
    let (xu, yu, su) = (x as usize, y as usize, s as usize);
    let level = &dogs[su];
    let value = level.at(xu, yu) + 0.5 * grad.dot(&offset);
    if value.abs() < contrast_threshold {
        return None;
    }
    let v = level.at(xu, yu);
    let dxx = level.at(xu + 1, yu) + level.at(xu - 1, yu) - 2.0 * v;
    let dyy = level.at(xu, yu + 1) + level.at(xu, yu - 1) - 2.0 * v;
    let dxy = (level.at(xu + 1, yu + 1) - level.at(xu + 1, yu - 1) - level.at(xu - 1, yu + 1)
        + level.at(xu - 1, yu - 1))
        / 4.0;
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    if det <= 0.0 || tr * tr * edge_ratio >= (edge_ratio + 1.0).powi(2) * det {
        return None;
    }
    let layer_pos = s as f64 + offset.z;
    Some(Extremum {
        octave: o,
        layer: su,
        x: x as f64 + offset.x,
        y: y as f64 + offset.y,
        octave_sigma: space.base_sigma * 2f64.powf(layer_pos / space.scales_per_octave as f64),
        response: value.abs(),
    })
}

/// Floating-point `rem_euclid`: result in `[0, m)`.
#[inline]
fn wrap(a: f64, m: f64) -> f64 {
    let r = a % m;
    let r = if r < 0.0 { r + m } else { r };
    if r >= m {
        0.0
    } else {
        r
    }
}

#[inline]
fn gradient(img: &Plane, x: usize, y: usize) -> (f64, f64) {
    (
        img.at(x + 1, y) - img.at(x - 1, y),
        img.at(x, y + 1) - img.at(x, y - 1),
    )
}

/// Dominant orientations from a smoothed 36-bin gradient histogram. Every
/// local peak within 80% of the maximum yields one orientation.
fn orientations(img: &Plane, x: f64, y: f64, sigma: f64) -> Vec<f64> {
    let weight_sigma = ORI_SIGMA_FACTOR * sigma;
    let radius = (3.0 * weight_sigma).round() as isize;
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    let mut hist = [0.0f64; ORI_BINS];
    let denom = 2.0 * weight_sigma * weight_sigma;
    for dy in -radius..=radius {
        let yy = cy + dy;
        if yy <= 0 || yy >= img.height as isize - 1 {
            continue;
        }
        for dx in -radius..=radius {
            let xx = cx + dx;
            if xx <= 0 || xx >= img.width as isize - 1 {
                continue;
            }
            let (gx, gy) = gradient(img, xx as usize, yy as usize);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let weight = (-((dx * dx + dy * dy) as f64) / denom).exp();
            let angle = wrap(gy.atan2(gx), 2.0 * PI);
            let bin = ((angle * ORI_BINS as f64 / (2.0 * PI)).round() as usize) % ORI_BINS;
            hist[bin] += weight * mag;
        }
    }
    let mut smooth = [0.0f64; ORI_BINS];
    for (i, out) in smooth.iter_mut().enumerate() {
        let at = |k: isize| hist[(i as isize + k).rem_euclid(ORI_BINS as isize) as usize];
        *out = (at(-2) + at(2)) / 16.0 + (at(-1) + at(1)) * 4.0 / 16.0 + at(0) * 6.0 / 16.0;
    }
    let max = smooth.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for i in 0..ORI_BINS {
        let left = smooth[(i + ORI_BINS - 1) % ORI_BINS];
        let right = smooth[(i + 1) % ORI_BINS];
        let c = smooth[i];
        if c > left && c > right && c >= ORI_PEAK_RATIO * max {
            let shift = 0.5 * (left - right) / (left - 2.0 * c + right);
            let bin = wrap(i as f64 + shift, ORI_BINS as f64);
            out.push(wrap(bin * 2.0 * PI / ORI_BINS as f64, 2.0 * PI));
        }
    }
    out
}

/// Unit-length 128-dimensional gradient-histogram descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub values: Vec<f64>,
}

impl Descriptor {
    pub fn distance_squared(&self, other: &Descriptor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn distance(&self, other: &Descriptor) -> f64 {
        self.distance_squared(other).sqrt()
    }

    /// L2-normalize, clip entries at 0.2 and renormalize. Returns `None` for
    /// an all-zero histogram.
    pub fn from_histogram(mut values: Vec<f64>) -> Option<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return None;
        }
        for v in &mut values {
            *v = (*v / norm).min(DESC_CLIP);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut values {
            *v /= norm;
        }
        Some(Self { values })
    }
}

/// Descriptors for keypoints detected in `space`. Keypoints whose sampling
/// window leaves the image are dropped; the returned keypoints line up with
/// the descriptors.
pub fn compute_descriptors(space: &ScaleSpace, keypoints: &[Keypoint]) -> FrameFeatures {
    let mut out = FrameFeatures::default();
    for kp in keypoints {
        let img = &space.octaves[kp.octave].gaussians[kp.layer];
        match raw_descriptor(img, kp).and_then(Descriptor::from_histogram) {
            Some(d) => {
                out.keypoints.push(*kp);
                out.descriptors.push(d);
            }
            None => out.skipped += 1,
        }
    }
    out
}

/// Support radius of the descriptor window in octave pixels.
fn descriptor_radius(octave_sigma: f64) -> f64 {
    let cell = DESC_CELL_FACTOR * octave_sigma;
    cell * core::f64::consts::SQRT_2 * (DESC_WIDTH as f64 + 1.0) / 2.0
}

fn raw_descriptor(img: &Plane, kp: &Keypoint) -> Option<Vec<f64>> {
    let scale = 2f64.powi(kp.octave as i32);
    let (x, y) = (kp.x / scale, kp.y / scale);
    let cell = DESC_CELL_FACTOR * kp.octave_sigma;
    let radius = descriptor_radius(kp.octave_sigma).ceil() as isize;
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    if cx - radius < 1 || cy - radius < 1 || cx + radius >= img.width as isize - 1 || cy + radius >= img.height as isize - 1 {
        return None;
    }
    let (sin, cos) = kp.orientation.sin_cos();
    let half = DESC_WIDTH as f64 / 2.0;
    // Gaussian weight with sigma equal to half the window, in cell units.
    let denom = 2.0 * half * half;
    let bins_per_rad = DESC_BINS as f64 / (2.0 * PI);
    let mut hist = vec![0.0f64; DESC_LEN];
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let (fx, fy) = ((cx + dx) as f64 - x, (cy + dy) as f64 - y);
            let u = (cos * fx + sin * fy) / cell;
            let v = (-sin * fx + cos * fy) / cell;
            let cbin = u + half - 0.5;
            let rbin = v + half - 0.5;
            if cbin <= -1.0 || rbin <= -1.0 || cbin >= DESC_WIDTH as f64 || rbin >= DESC_WIDTH as f64 {
                continue;
            }
            let (gx, gy) = gradient(img, (cx + dx) as usize, (cy + dy) as usize);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let weight = (-(u * u + v * v) / denom).exp();
            let angle = wrap(gy.atan2(gx) - kp.orientation, 2.0 * PI);
            let obin = angle * bins_per_rad;
            trilinear(&mut hist, rbin, cbin, obin, mag * weight);
        }
    }
    Some(hist)
}

fn trilinear(hist: &mut [f64], rbin: f64, cbin: f64, obin: f64, value: f64) {
    let (r0, c0, o0) = (rbin.floor(), cbin.floor(), obin.floor());
    let (dr, dc, dori) = (rbin - r0, cbin - c0, obin - o0);
    let (r0, c0, o0) = (r0 as isize, c0 as isize, o0 as isize);
    for (ri, wr) in [(r0, 1.0 - dr), (r0 + 1, dr)] {
        if ri < 0 || ri >= DESC_WIDTH as isize {
            continue;
        }
        for (ci, wc) in [(c0, 1.0 - dc), (c0 + 1, dc)] {
            if ci < 0 || ci >= DESC_WIDTH as isize {
                continue;
            }
            for (oi, wo) in [(o0, 1.0 - dori), (o0 + 1, dori)] {
                let ob = oi.rem_euclid(DESC_BINS as isize) as usize;
                let idx = (ri as usize * DESC_WIDTH + ci as usize) * DESC_BINS + ob;
                hist[idx] += value * wr * wc * wo;
            }
        }
    }
}

/// Keypoints and descriptors of one frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameFeatures {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
    /// Keypoints dropped because their descriptor window left the image.
    pub skipped: usize,
}

/// Detect, cap and describe keypoints of one frame.
pub fn extract_features(frame: &Frame, cfg: &FeatureConfig) -> Result<FrameFeatures> {
    let space = build_scale_space(frame, cfg.octaves, cfg.scales_per_octave, cfg.base_sigma)?;
    let mut keypoints = detect_keypoints(&space, cfg.contrast_threshold, cfg.edge_ratio_threshold);
    keypoints.truncate(cfg.max_keypoints);
    Ok(compute_descriptors(&space, &keypoints))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: f64,
    /// Nearest over second-nearest distance; 0 when `b` has one element.
    pub ratio: f64,
}

/// Ratio-test matching of `a` against `b`, optionally keeping only mutual
/// nearest neighbours.
pub fn match_descriptors(a: &[Descriptor], b: &[Descriptor], ratio_threshold: f64, mutual: bool) -> Result<Vec<Match>> {
    if !(ratio_threshold > 0.0 && ratio_threshold <= 1.0) {
        return Err(Error::contract(format!("ratio threshold must be in (0, 1], got {ratio_threshold}")));
    }
    if a.is_empty() || b.is_empty() {
        return Ok(Vec::new());
    }
    // best_for_b[j] = (squared distance, index into a)
    let mut best_for_b = vec![(f64::INFINITY, usize::MAX); b.len()];
    let mut candidates = Vec::with_capacity(a.len());
    for (i, da) in a.iter().enumerate() {
        let (mut d1, mut j1, mut d2) = (f64::INFINITY, usize::MAX, f64::INFINITY);
        for (j, db) in b.iter().enumerate() {
            let d = da.distance_squared(db);
            if d < d1 {
                d2 = d1;
                d1 = d;
                j1 = j;
            } else if d < d2 {
                d2 = d;
            }
            if d < best_for_b[j].0 {
                best_for_b[j] = (d, i);
            }
        }
        let (d1, d2) = (d1.sqrt(), d2.sqrt());
        let ratio = if b.len() == 1 {
            0.0
        } else if d2 > 0.0 {
            d1 / d2
        } else {
            // Two exact duplicates: ambiguous.
            1.0
        };
        candidates.push(Match {
            index_a: i,
            index_b: j1,
            distance: d1,
            ratio,
        });
    }
    Ok(candidates
        .into_iter()
        .filter(|m| m.ratio < ratio_threshold)
        .filter(|m| !mutual || best_for_b[m.index_b].1 == m.index_a)
        .collect())
}

/// Pixel correspondences for a set of matches.
pub fn correspondences(a: &[Keypoint], b: &[Keypoint], matches: &[Match]) -> Vec<Correspondence> {
    matches
        .iter()
        .map(|m| {
            let (p, q) = (&a[m.index_a], &b[m.index_b]);
            Correspondence::new([p.x, p.y], [q.x, q.y])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{render_dots, DotStyle};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn grid_points(n: usize, w: usize, h: usize, margin: f64, seed: u64) -> Vec<Option<[f64; 2]>> {
        let cols = 10;
        let rows = n.div_ceil(cols);
        let mut rng = crate::seed::rng(seed);
        (0..n)
            .map(|i| {
                let (c, r) = ((i % cols) as f64, (i / cols) as f64);
                let x = margin + (w as f64 - 2.0 * margin) * (c + 0.5) / cols as f64 + rng.random_range(-2.0..2.0);
                let y = margin + (h as f64 - 2.0 * margin) * (r + 0.5) / rows as f64 + rng.random_range(-2.0..2.0);
                Some([x, y])
            })
            .collect()
    }

    fn random_descriptors(n: usize, seed: u64) -> Vec<Descriptor> {
        let mut rng = crate::seed::rng(seed);
        (0..n)
            .map(|_| Descriptor::from_histogram((0..DESC_LEN).map(|_| rng.random::<f64>()).collect()).unwrap())
            .collect()
    }

    #[test]
    fn sigma_schedule() {
        assert!((effective_sigma(1.6, 3, 1, 0.0) - 3.2).abs() < 1e-12);
        assert!((effective_sigma(1.6, 3, 0, 3.0) - 3.2).abs() < 1e-12);
    }

    #[test]
    fn constant_frame_has_flat_dog_and_no_keypoints() {
        let f = Frame::constant(128, 128, 0.6).unwrap();
        let space = build_scale_space(&f, 3, 3, 1.6).unwrap();
        for o in &space.octaves {
            assert_eq!(o.gaussians.len(), 6);
            assert_eq!(o.dogs.len(), 5);
            for d in &o.dogs {
                assert!(d.data.iter().all(|v| v.abs() < 1e-12));
            }
        }
        assert!(detect_keypoints(&space, 0.03, 10.0).is_empty());
    }

    #[test]
    fn too_many_octaves_is_rejected() {
        let f = Frame::constant(100, 200, 0.6).unwrap();
        let err = build_scale_space(&f, 3, 3, 1.6).unwrap_err();
        assert!(matches!(err, Error::Contract(ref m) if m.contains("at most 2 octaves")));
        assert!(build_scale_space(&f, 2, 2, 1.6).is_err());
    }

    #[test]
    fn octave_sizes_halve() {
        let f = Frame::constant(128, 96, 0.1).unwrap();
        let space = build_scale_space(&f, 2, 3, 1.6).unwrap();
        assert_eq!((space.octaves[1].dogs[0].width, space.octaves[1].dogs[0].height), (64, 48));
    }

    #[test]
    fn blob_response_peaks_at_predicted_level() {
        // Continuous model: a Gaussian blob of std b, seen through total blur
        // s, has centre value A b^2 / (b^2 + s^2).
        let (w, b) = (128usize, 4.0f64);
        let px: Vec<f64> = (0..w * w)
            .map(|i| {
                let (x, y) = ((i % w) as f64 - 64.0, (i / w) as f64 - 64.0);
                (-(x * x + y * y) / (2.0 * b * b)).exp()
            })
            .collect();
        let frame = Frame::new(w, w, px).unwrap();
        let space = build_scale_space(&frame, 3, 3, 1.6).unwrap();
        let applied = |o: usize, s: usize| {
            let e = space.effective_sigma(o, s as f64);
            e * e - ASSUMED_BLUR * ASSUMED_BLUR
        };
        let model = |o: usize, s: usize| {
            b * b / (b * b + applied(o, s + 1)) - b * b / (b * b + applied(o, s))
        };
        let mut measured = Vec::new();
        let mut predicted = Vec::new();
        for (o, oct) in space.octaves.iter().enumerate() {
            let c = 64 >> o;
            for s in 0..oct.dogs.len() {
                measured.push(((o, s), oct.dogs[s].at(c, c).abs()));
                predicted.push(((o, s), model(o, s).abs()));
            }
        }
        let argmax = |v: &[((usize, usize), f64)]| v.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
        let (mo, ms) = argmax(&measured);
        let (po, ps) = argmax(&predicted);
        assert_eq!(
            space.effective_sigma(mo, ms as f64),
            space.effective_sigma(po, ps as f64),
            "measured {:?} predicted {:?}",
            (mo, ms),
            (po, ps)
        );
    }

    #[test]
    fn detects_dot_grid() {
        let (w, h) = (256, 256);
        let pts = grid_points(50, w, h, 20.0, 1);
        let frame = render_dots(&pts, w, h, &DotStyle::default()).unwrap();
        let space = build_scale_space(&frame, 4, 3, 1.6).unwrap();
        let kps = detect_keypoints(&space, 0.03, 10.0);
        let hits = pts
            .iter()
            .flatten()
            .filter(|p| kps.iter().any(|k| (k.x - p[0]).hypot(k.y - p[1]) < 1.5))
            .count();
        assert!(hits >= 40, "{hits} of 50 dots detected");
        for k in &kps {
            assert!(k.x >= 0.0 && k.x < w as f64 && k.y >= 0.0 && k.y < h as f64);
            assert!(k.scale > 0.0 && k.response > 0.03);
            assert!((0.0..2.0 * PI).contains(&k.orientation));
        }
    }

    #[test]
    fn step_edge_has_no_keypoints_on_the_edge() {
        let (w, h) = (128, 128);
        let px = (0..w * h).map(|i| if i % w < 64 { 0.1 } else { 0.9 }).collect();
        let frame = Frame::new(w, h, px).unwrap();
        let space = build_scale_space(&frame, 3, 3, 1.6).unwrap();
        let kps = detect_keypoints(&space, 0.03, 10.0);
        assert!(kps.iter().all(|k| (k.x - 63.5).abs() > 3.0 * k.scale), "{} keypoints", kps.len());
    }

    #[test]
    fn detection_is_translation_equivariant() {
        let (w, h) = (256, 256);
        let pts = grid_points(50, w, h, 30.0, 2);
        let shifted: Vec<_> = pts.iter().map(|p| p.map(|[x, y]| [x + 8.0, y + 4.0])).collect();
        let style = DotStyle::default();
        let a = extract_features(&render_dots(&pts, w, h, &style).unwrap(), &FeatureConfig::default()).unwrap();
        let b = extract_features(&render_dots(&shifted, w, h, &style).unwrap(), &FeatureConfig::default()).unwrap();
        let mut checked = 0;
        for k in &a.keypoints {
            let (x, y) = (k.x + 8.0, k.y + 4.0);
            if x < 40.0 || y < 40.0 || x > 216.0 || y > 216.0 {
                continue;
            }
            let d = b.keypoints.iter().map(|q| (q.x - x).hypot(q.y - y)).fold(f64::INFINITY, f64::min);
            assert!(d < 0.5, "keypoint at ({x}, {y}) moved by {d}");
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn descriptors_are_unit_and_clipped() {
        let (w, h) = (256, 256);
        let pts = grid_points(60, w, h, 10.0, 3);
        let frame = render_dots(&pts, w, h, &DotStyle::default()).unwrap();
        let f = extract_features(&frame, &FeatureConfig::default()).unwrap();
        assert!(!f.descriptors.is_empty());
        for d in &f.descriptors {
            assert_eq!(d.values.len(), 128);
            let n: f64 = d.values.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            assert!(d.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn clipping_rule() {
        let mut hist = vec![0.0; 128];
        hist[0] = 10.0;
        hist[1] = 1.0;
        hist[2] = 1.0;
        let d = Descriptor::from_histogram(hist).unwrap();
        // After the first normalization entry 0 is clipped to 0.2 while the
        // others stay at 1/sqrt(102) before the final renormalization.
        let small = 1.0 / 102f64.sqrt();
        let norm = (0.04 + 2.0 * small * small).sqrt();
        assert!((d.values[0] - 0.2 / norm).abs() < 1e-12);
        assert!((d.values[1] - small / norm).abs() < 1e-12);
        assert!(Descriptor::from_histogram(vec![0.0; 128]).is_none());
    }

    #[test]
    fn uniform_gradient_concentrates_in_one_orientation_bin() {
        let (w, h) = (64usize, 64usize);
        let img = Plane {
            width: w,
            height: h,
            data: (0..w * h).map(|i| 0.01 * (i % w) as f64).collect(),
        };
        let kp = Keypoint {
            x: 32.0,
            y: 32.0,
            scale: 2.0,
            orientation: 0.0,
            response: 1.0,
            octave: 0,
            layer: 1,
            octave_sigma: 2.0,
        };
        let raw = raw_descriptor(&img, &kp).unwrap();
        for cell in raw.chunks(DESC_BINS) {
            let total: f64 = cell.iter().sum();
            assert!(cell[0] >= 0.999 * total, "{cell:?}");
        }
    }

    #[test]
    fn descriptor_window_off_image_is_skipped() {
        let frame = render_dots(&[Some([6.0, 6.0]), Some([128.0, 128.0])], 256, 256, &DotStyle::default()).unwrap();
        let space = build_scale_space(&frame, 4, 3, 1.6).unwrap();
        let mut kps = detect_keypoints(&space, 0.03, 10.0);
        kps.iter_mut().for_each(|k| {
            k.x = 6.0;
            k.y = 6.0;
        });
        let d = compute_descriptors(&space, &kps);
        assert!(d.descriptors.is_empty());
        assert_eq!(d.skipped, kps.len());
    }

    #[test]
    fn rotation_by_90_degrees_preserves_descriptors() {
        // Odd edge length keeps every octave's sampling grid aligned under
        // the rotation (x, y) -> (n - 1 - y, x).
        let n = 257usize;
        let mut rng = crate::seed::rng(4);
        let pts: Vec<Option<[f64; 2]>> = (0..150)
            .map(|_| Some([rng.random_range(20.0..237.0), rng.random_range(20.0..237.0)]))
            .collect();
        let frame = render_dots(&pts, n, n, &DotStyle::default()).unwrap();
        let rotated_px: Vec<f64> = (0..n * n)
            .map(|i| {
                let (x, y) = (i % n, i / n);
                // new(x, y) = old(y, n - 1 - x)
                frame.get(y, n - 1 - x)
            })
            .collect();
        let rotated = Frame::new(n, n, rotated_px).unwrap();
        let cfg = FeatureConfig::default();
        let a = extract_features(&frame, &cfg).unwrap();
        let b = extract_features(&rotated, &cfg).unwrap();
        let mut compared = 0;
        for (ka, da) in a.keypoints.iter().zip(&a.descriptors) {
            let (x, y) = (n as f64 - 1.0 - ka.y, ka.x);
            let expect_ori = wrap(ka.orientation + PI / 2.0, 2.0 * PI);
            let found = b.keypoints.iter().zip(&b.descriptors).find(|(kb, _)| {
                let dori = wrap(kb.orientation - expect_ori, 2.0 * PI);
                (kb.x - x).hypot(kb.y - y) < 1e-6 && dori.min(2.0 * PI - dori) < 1e-6
            });
            if let Some((_, db)) = found {
                assert!(da.distance(db) < 0.15, "distance {}", da.distance(db));
                compared += 1;
            }
        }
        assert!(compared * 10 >= a.keypoints.len() * 8, "{compared} of {}", a.keypoints.len());
    }

    #[test]
    fn identical_lists_match_identically() {
        let d = random_descriptors(50, 1);
        let m = match_descriptors(&d, &d, 0.8, true).unwrap();
        assert_eq!(m.len(), 50);
        for (i, mm) in m.iter().enumerate() {
            assert_eq!((mm.index_a, mm.index_b), (i, i));
            assert_eq!(mm.ratio, 0.0);
            assert_eq!(mm.distance, 0.0);
        }
    }

    #[test]
    fn noisy_copies_match_by_nearest_neighbour() {
        let a = random_descriptors(200, 2);
        let mut rng = crate::seed::rng(3);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let b: Vec<Descriptor> = a
            .iter()
            .map(|d| {
                let v = d.values.iter().map(|x| (x + noise.sample(&mut rng)).abs()).collect();
                Descriptor::from_histogram(v).unwrap()
            })
            .collect();
        // Brute-force oracle: index of the nearest b for every a.
        let oracle: Vec<usize> = a
            .iter()
            .map(|da| {
                (0..b.len())
                    .min_by(|&i, &j| da.distance(&b[i]).total_cmp(&da.distance(&b[j])))
                    .unwrap()
            })
            .collect();
        assert!(oracle.iter().enumerate().filter(|(i, j)| i == *j).count() >= 199);
        let m = match_descriptors(&a, &b, 0.8, true).unwrap();
        let identity = m.iter().filter(|mm| mm.index_a == mm.index_b).count();
        assert!(identity * 100 >= 95 * a.len(), "{identity}");
        for mm in &m {
            assert_eq!(mm.index_b, oracle[mm.index_a]);
            assert!(mm.ratio < 0.8);
        }
    }

    #[test]
    fn matching_edge_cases() {
        let a = random_descriptors(1, 5);
        let b = random_descriptors(1, 6);
        let m = match_descriptors(&a, &b, 0.8, true).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].ratio, 0.0);
        assert!(match_descriptors(&[], &b, 0.8, true).unwrap().is_empty());
        assert!(match_descriptors(&a, &[], 0.8, true).unwrap().is_empty());
        assert!(match_descriptors(&a, &b, 0.0, true).is_err());
        assert!(match_descriptors(&a, &b, 1.5, true).is_err());
    }

    #[test]
    fn ratio_one_without_mutual_returns_one_match_per_query() {
        let a = random_descriptors(40, 7);
        let b = random_descriptors(60, 8);
        let m = match_descriptors(&a, &b, 1.0, false).unwrap();
        assert_eq!(m.len(), a.len());
        let strict = match_descriptors(&a, &b, 0.9, false).unwrap();
        assert!(strict.iter().all(|mm| mm.ratio < 0.9));
    }
}
