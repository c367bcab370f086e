//! Grayscale frames, Gaussian filtering and SSIM.
//!
//! All convolutions use reflect padding (`d c b | a b c d | c b a`).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float as _;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Smallest accepted frame edge, in pixels.
pub const MIN_FRAME_DIM: usize = 16;

/// A single luminance image with values in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width < MIN_FRAME_DIM || height < MIN_FRAME_DIM {
            return Err(Error::contract(format!(
                "frame is {width}x{height}, both edges must be at least {MIN_FRAME_DIM}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::contract(format!(
                "pixel buffer has {} values, expected {}",
                pixels.len(),
                width * height
            )));
        }
        if let Some(i) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::contract(format!(
                "pixel {i} is {} (must be finite and in [0, 1])",
                pixels[i]
            )));
        }
        Ok(Self { width, height, pixels })
    }

    /// Frame filled with a single value.
    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Build a frame from arbitrary samples, clamping them into `[0, 1]`.
    /// Non-finite samples become 0.
    pub fn from_clamped(width: usize, height: usize, mut pixels: Vec<f64>) -> Result<Self> {
        for p in &mut pixels {
            *p = if p.is_finite() { p.clamp(0.0, 1.0) } else { 0.0 };
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn diagonal(&self) -> f64 {
        let (w, h) = (self.width as f64, self.height as f64);
        (w * w + h * h).sqrt()
    }

    pub fn to_plane(&self) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.pixels.clone(),
        }
    }

    fn same_shape(&self, other: &Frame) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Unconstrained real-valued image, used for intermediate results such as
/// pyramid levels and difference-of-Gaussian images.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn blurred(&self, sigma: f64) -> Plane {
        let mut out = self.clone();
        blur_in_place(&mut out.data, self.width, self.height, sigma);
        out
    }

    /// Keep every second pixel in each direction.
    pub fn downsample2(&self) -> Plane {
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(self.at(2 * x, 2 * y));
            }
        }
        Plane { width: w, height: h, data }
    }

    pub fn sub(&self, other: &Plane) -> Plane {
        debug_assert_eq!(self.data.len(), other.data.len());
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }
}

/// Map an out-of-range index back into `0..n` by mirroring about the edge
/// samples (the edge sample itself is not repeated).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Normalized 1-D Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    gaussian_kernel_with_radius(sigma, radius as usize)
}

pub fn gaussian_kernel_with_radius(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| {
            let x = i as f64;
            (-(x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur of a row-major buffer, reflect-padded.
pub fn blur_in_place(data: &mut [f64], width: usize, height: usize, sigma: f64) {
    let kernel = gaussian_kernel(sigma);
    convolve_separable(data, width, height, &kernel);
}

fn convolve_separable(data: &mut [f64], width: usize, height: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    let mut line = vec![0.0; width.max(height)];
    for y in 0..height {
        let row = &mut data[y * width..(y + 1) * width];
        line[..width].copy_from_slice(row);
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                acc += w * line[reflect_index(x as isize + k as isize - r, width)];
            }
            row[x] = acc;
        }
    }
    for x in 0..width {
        for y in 0..height {
            line[y] = data[y * width + x];
        }
        for y in 0..height {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                acc += w * line[reflect_index(y as isize + k as isize - r, height)];
            }
            data[y * width + x] = acc;
        }
    }
}

pub fn gaussian_blur(frame: &Frame, sigma: f64) -> Result<Frame> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::contract(format!("blur sigma must be positive, got {sigma}")));
    }
    let mut pixels = frame.pixels.clone();
    blur_in_place(&mut pixels, frame.width, frame.height, sigma);
    // Rounding can push a saturated pixel a few ulps outside the unit range.
    for p in &mut pixels {
        *p = p.clamp(0.0, 1.0);
    }
    Ok(Frame {
        width: frame.width,
        height: frame.height,
        pixels,
    })
}

/// SSIM parameters. The defaults are the usual 11x11 Gaussian window with
/// sigma 1.5 and `K1 = 0.01`, `K2 = 0.03` on a unit dynamic range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

/// Mean SSIM with default parameters.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

/// Mean SSIM over every position where the window fits entirely inside the
/// frame.
pub fn ssim_with(a: &Frame, b: &Frame, params: &SsimParams) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::contract(format!(
            "ssim of {}x{} and {}x{} frames",
            a.width, a.height, b.width, b.height
        )));
    }
    let win = params.window;
    if win.is_multiple_of(2) || win == 0 {
        return Err(Error::contract("ssim window must be odd"));
    }
    if a.width.min(a.height) < win {
        return Err(Error::contract(format!(
            "ssim needs frames of at least {win} pixels per edge"
        )));
    }
    let kernel = gaussian_kernel_with_radius(params.sigma, win / 2);
    let (w, h) = (a.width, a.height);
    let ab: Vec<f64> = a.pixels.iter().zip(&b.pixels).map(|(x, y)| x * y).collect();
    let aa: Vec<f64> = a.pixels.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = b.pixels.iter().map(|x| x * x).collect();
    let mu_a = filter_valid(&a.pixels, w, h, &kernel);
    let mu_b = filter_valid(&b.pixels, w, h, &kernel);
    let e_aa = filter_valid(&aa, w, h, &kernel);
    let e_bb = filter_valid(&bb, w, h, &kernel);
    let e_ab = filter_valid(&ab, w, h, &kernel);

    let c1 = (params.k1 * params.dynamic_range).powi(2);
    let c2 = (params.k2 * params.dynamic_range).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

/// Separable correlation keeping only fully-supported outputs.
fn filter_valid(data: &[f64], width: usize, height: usize, kernel: &[f64]) -> Vec<f64> {
    let n = kernel.len();
    let ow = width - n + 1;
    let oh = height - n + 1;
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        let src = &data[y * width..(y + 1) * width];
        for x in 0..ow {
            rows[y * ow + x] = kernel.iter().zip(&src[x..x + n]).map(|(k, v)| k * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                acc += w * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean SSIM between the first frame and every later frame. Lower values
/// mean more motion.
pub fn motion_level(frames: &[Frame]) -> Result<f64> {
    motion_level_with(frames, &SsimParams::default())
}

pub fn motion_level_with(frames: &[Frame], params: &SsimParams) -> Result<f64> {
    let (first, rest) = frames
        .split_first()
        .filter(|(_, rest)| !rest.is_empty())
        .ok_or_else(|| Error::contract("motion level needs at least 2 frames"))?;
    let mut total = 0.0;
    for f in rest {
        total += ssim_with(first, f, params)?;
    }
    Ok(total / rest.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noise_frame(w: usize, h: usize, seed: u64) -> Frame {
        let mut rng = crate::seed::rng(seed);
        let px = (0..w * h).map(|_| rng.random::<f64>()).collect();
        Frame::new(w, h, px).unwrap()
    }

    /// Direct windowed-statistics SSIM, written independently of the
    /// separable path.
    fn ssim_oracle(a: &Frame, b: &Frame) -> f64 {
        let r = 5isize;
        let mut g = [[0.0f64; 11]; 11];
        let mut s = 0.0;
        for (i, row) in g.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let dx = i as f64 - 5.0;
                let dy = j as f64 - 5.0;
                *v = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
                s += *v;
            }
        }
        let (c1, c2) = (0.0001, 0.0009);
        let mut total = 0.0;
        let mut count = 0.0;
        for cy in r..(a.height() as isize - r) {
            for cx in r..(a.width() as isize - r) {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let w = g[i][j] / s;
                        let (x, y) = ((cx - r + j as isize) as usize, (cy - r + i as isize) as usize);
                        ma += w * a.get(x, y);
                        mb += w * b.get(x, y);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let w = g[i][j] / s;
                        let (x, y) = ((cx - r + j as isize) as usize, (cy - r + i as isize) as usize);
                        let (da, db) = (a.get(x, y) - ma, b.get(x, y) - mb);
                        va += w * da * da;
                        vb += w * db * db;
                        cov += w * da * db;
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn frame_rejects_bad_buffers() {
        assert!(Frame::new(15, 16, vec![0.0; 240]).is_err());
        assert!(Frame::new(16, 16, vec![0.0; 255]).is_err());
        let mut px = vec![0.0; 256];
        px[3] = 1.5;
        assert!(Frame::new(16, 16, px.clone()).is_err());
        px[3] = f64::NAN;
        assert!(Frame::new(16, 16, px).is_err());
    }

    #[test]
    fn reflect_padding_mirrors_without_repeating_edge() {
        let idx: Vec<usize> = (-3..8).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect_index(-7, 3), 1);
    }

    #[test]
    fn blur_keeps_constant_images() {
        let f = Frame::constant(20, 17, 0.37).unwrap();
        for sigma in [0.5, 1.0, 3.3, 9.0] {
            let g = gaussian_blur(&f, sigma).unwrap();
            for p in g.pixels() {
                assert!((p - 0.37).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn blur_impulse_center_is_squared_kernel_center() {
        let mut px = vec![0.0; 33 * 33];
        px[16 * 33 + 16] = 1.0;
        let f = Frame::new(33, 33, px).unwrap();
        let g = gaussian_blur(&f, 1.0).unwrap();
        // Kernel radius 3: weights exp(-i^2/2) for i in -3..=3.
        let norm: f64 = (-3..=3).map(|i: i32| (-(i * i) as f64 / 2.0).exp()).sum();
        let center = 1.0 / norm;
        assert!((g.get(16, 16) - center * center).abs() < 1e-15);
        let total: f64 = g.pixels().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn blur_rejects_nonpositive_sigma() {
        let f = Frame::constant(16, 16, 0.5).unwrap();
        assert!(gaussian_blur(&f, 0.0).is_err());
        assert!(gaussian_blur(&f, -1.0).is_err());
    }

    #[test]
    fn blur_is_linear() {
        let mut rng = crate::seed::rng(3);
        let f: Vec<f64> = (0..32 * 32).map(|_| rng.random()).collect();
        let g: Vec<f64> = (0..32 * 32).map(|_| rng.random()).collect();
        let (alpha, beta) = (1.7, -0.4);
        let mut combo: Vec<f64> = f.iter().zip(&g).map(|(a, b)| alpha * a + beta * b).collect();
        let (mut bf, mut bg) = (f.clone(), g.clone());
        blur_in_place(&mut combo, 32, 32, 1.3);
        blur_in_place(&mut bf, 32, 32, 1.3);
        blur_in_place(&mut bg, 32, 32, 1.3);
        for i in 0..combo.len() {
            assert!((combo[i] - (alpha * bf[i] + beta * bg[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_self_is_exactly_one() {
        let f = noise_frame(40, 30, 1);
        assert_eq!(ssim(&f, &f).unwrap(), 1.0);
    }

    #[test]
    fn ssim_of_inverted_checkerboard_is_negative() {
        let (w, h) = (32, 32);
        let px: Vec<f64> = (0..w * h)
            .map(|i| if (i % w + i / w) % 2 == 0 { 1.0 } else { 0.0 })
            .collect();
        let inv: Vec<f64> = px.iter().map(|p| 1.0 - p).collect();
        let a = Frame::new(w, h, px).unwrap();
        let b = Frame::new(w, h, inv).unwrap();
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ssim_matches_direct_window_oracle_on_noise() {
        let a = noise_frame(64, 64, 7);
        let b = noise_frame(64, 64, 8);
        let got = ssim(&a, &b).unwrap();
        let want = ssim_oracle(&a, &b);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!(got.abs() < 0.05);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = noise_frame(24, 20, 11);
        let b = noise_frame(24, 20, 12);
        let d = ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap();
        assert!(d.abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_mismatched_or_tiny_frames() {
        let a = noise_frame(24, 20, 1);
        let b = noise_frame(20, 24, 1);
        assert!(matches!(ssim(&a, &b), Err(Error::Contract(_))));
        let p = SsimParams { window: 21, ..Default::default() };
        assert!(ssim_with(&a, &a, &p).is_err());
    }

    #[test]
    fn motion_level_cases() {
        let f = noise_frame(32, 32, 5);
        assert_eq!(motion_level(&[f.clone(), f.clone(), f.clone()]).unwrap(), 1.0);
        let c = Frame::constant(32, 32, 0.2).unwrap();
        assert_eq!(motion_level(&[c.clone(), c.clone()]).unwrap(), 1.0);
        assert!(motion_level(core::slice::from_ref(&f)).is_err());

        let frames: Vec<Frame> = (0..5).map(|s| noise_frame(64, 64, 100 + s)).collect();
        let level = motion_level(&frames).unwrap();
        let oracle: f64 = frames[1..].iter().map(|g| ssim_oracle(&frames[0], g)).sum::<f64>() / 4.0;
        assert!((level - oracle).abs() < 1e-12);
        assert!(level.abs() < 0.05);
    }
}
