//! Ground-truth scenes, camera trajectories and controllable degradations.
//!
//! Every generator is a pure function of its arguments and seed. Degradations
//! are applied to projected points (not pixels) so correspondence-level
//! experiments see no detector noise; [`render_dots`] covers the pixel path.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
#[allow(unused_imports)]
use num_traits::Float as _;
use serde::{Deserialize, Serialize};

use crate::epipolar::{CameraMatrix, Correspondence};
use crate::image::{blur_in_place, Frame};
use crate::{seed, Error, Result};

// Stream tags for seed derivation.
const SCENE: u64 = 1;
const JITTER: u64 = 2;
const OUTLIER: u64 = 3;
const DYNAMIC: u64 = 4;
const INTENSITY: u64 = 5;
const TEXTURE: u64 = 6;
const RIG: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub points: Vec<Vector3<f64>>,
    pub seed: u64,
    /// Points lie in `[-extent, extent]^3`.
    pub extent: f64,
}

/// Uniform points in the cube `[-extent, extent]^3`.
pub fn generate_scene(n_points: usize, extent: f64, seed: u64) -> Result<Scene> {
    if n_points < 8 {
        return Err(Error::contract(format!("scene needs at least 8 points, got {n_points}")));
    }
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(Error::contract("scene extent must be positive"));
    }
    let mut rng = seed::rng(seed::derive(seed, &[SCENE]));
    let points = (0..n_points)
        .map(|_| {
            Vector3::new(
                rng.random_range(-extent..=extent),
                rng.random_range(-extent..=extent),
                rng.random_range(-extent..=extent),
            )
        })
        .collect();
    Ok(Scene { points, seed, extent })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.focal, 0.0, self.cx, 0.0, self.focal, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] < self.width as f64 && p[1] < self.height as f64
    }
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self {
            focal: 420.0,
            cx: 128.0,
            cy: 128.0,
            width: 256,
            height: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    /// Cameras on a horizontal circle around the origin, looking at it.
    Orbit,
    /// Forward translation along a fixed viewing axis.
    Dolly,
    /// Partial orbit whose height changes linearly.
    Arc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub n_frames: usize,
    pub intrinsics: Intrinsics,
    /// Std-dev of Gaussian noise added to every projected point, in px.
    pub jitter_sigma: f64,
    /// Share of each pair's correspondences replaced by random points.
    pub outlier_fraction: f64,
    /// Share of world points that move with constant velocity.
    pub dynamic_fraction: f64,
    /// Speed of dynamic points in world units per frame.
    pub dynamic_speed: f64,
    /// Distance of orbit / arc cameras from the origin, and the start
    /// distance of a dolly.
    pub radius: f64,
    /// Angle covered by orbit and arc trajectories. The spacing between
    /// consecutive frames is `sweep / n_frames`.
    pub sweep_degrees: f64,
    /// Total height change of an arc, or total travel of a dolly.
    pub travel: f64,
    pub seed: u64,
}

impl TrajectorySpec {
    pub fn new(kind: TrajectoryKind, n_frames: usize) -> Self {
        let sweep_degrees = match kind {
            TrajectoryKind::Orbit => 360.0,
            TrajectoryKind::Arc => 30.0,
            TrajectoryKind::Dolly => 0.0,
        };
        Self {
            kind,
            n_frames,
            intrinsics: Intrinsics::default(),
            jitter_sigma: 0.0,
            outlier_fraction: 0.0,
            dynamic_fraction: 0.0,
            dynamic_speed: 0.05,
            radius: 4.0,
            sweep_degrees,
            travel: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 2 {
            return Err(Error::contract("trajectory needs at least 2 frames"));
        }
        let fractions = [self.outlier_fraction, self.dynamic_fraction];
        if fractions.iter().any(|f| !(0.0..1.0).contains(f)) || fractions.iter().sum::<f64>() >= 1.0 {
            return Err(Error::contract("outlier and dynamic fractions must be in [0, 1) and sum below 1"));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::contract("jitter sigma must be non-negative"));
        }
        if !(self.radius > 0.0) {
            return Err(Error::contract("trajectory radius must be positive"));
        }
        Ok(())
    }
}

pub fn camera_trajectory(spec: &TrajectorySpec) -> Result<Vec<CameraMatrix>> {
    spec.validate()?;
    let k = spec.intrinsics.matrix();
    let up = Vector3::new(0.0, 1.0, 0.0);
    let n = spec.n_frames;
    let step = spec.sweep_degrees.to_radians() / n as f64;
    (0..n)
        .map(|i| {
            let f = i as f64;
            match spec.kind {
                TrajectoryKind::Orbit => {
                    let theta = step * f;
                    let c = Vector3::new(spec.radius * theta.sin(), 0.0, -spec.radius * theta.cos());
                    CameraMatrix::look_at(k, c, Vector3::zeros(), up)
                }
                TrajectoryKind::Arc => {
                    let theta = step * (f - (n - 1) as f64 / 2.0);
                    let h = spec.travel * (f / (n - 1) as f64 - 0.5);
                    let c = Vector3::new(spec.radius * theta.sin(), h, -spec.radius * theta.cos());
                    CameraMatrix::look_at(k, c, Vector3::zeros(), up)
                }
                TrajectoryKind::Dolly => {
                    let z = -spec.radius + spec.travel * f / (n - 1) as f64;
                    CameraMatrix::new(k, Matrix3::identity(), -Vector3::new(0.0, 0.0, z))
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointLabel {
    Clean,
    Jittered,
    Outlier,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledCorrespondence {
    /// Index of the world point.
    pub point: usize,
    pub correspondence: Correspondence,
    pub label: PointLabel,
}

/// Projected observations of a scene along a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedScene {
    pub cameras: Vec<CameraMatrix>,
    pub intrinsics: Intrinsics,
    /// `observations[frame][point]`: observed image position after jitter and
    /// motion, `None` when it falls outside the image.
    pub observations: Vec<Vec<Option<[f64; 2]>>>,
    /// Per world point: `Clean`, `Jittered` or `Dynamic`.
    pub point_labels: Vec<PointLabel>,
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl ProjectedScene {
    pub fn n_frames(&self) -> usize {
        self.observations.len()
    }

    /// Correspondences between frames `i` and `j` for points visible in
    /// both. Exactly `floor(outlier_fraction * n)` of them have their second
    /// point replaced by a uniform random image position.
    pub fn correspondences(&self, i: usize, j: usize) -> Vec<LabeledCorrespondence> {
        let mut out: Vec<LabeledCorrespondence> = self.observations[i]
            .iter()
            .zip(&self.observations[j])
            .enumerate()
            .filter_map(|(p, (a, b))| {
                Some(LabeledCorrespondence {
                    point: p,
                    correspondence: Correspondence::new((*a)?, (*b)?),
                    label: self.point_labels[p],
                })
            })
            .collect();
        let n_out = (self.outlier_fraction * out.len() as f64).floor() as usize;
        if n_out > 0 {
            let mut rng = seed::rng(seed::derive(self.seed, &[OUTLIER, i as u64, j as u64]));
            let (w, h) = (self.intrinsics.width as f64, self.intrinsics.height as f64);
            for k in rand::seq::index::sample(&mut rng, out.len(), n_out) {
                let lc = &mut out[k];
                lc.correspondence.x_prime = [rng.random_range(0.0..w), rng.random_range(0.0..h)];
                lc.label = PointLabel::Outlier;
            }
        }
        out
    }

    /// Observed points of one frame, indexed by world point.
    pub fn frame_points(&self, frame: usize) -> &[Option<[f64; 2]>] {
        &self.observations[frame]
    }
}

pub fn project_scene(scene: &Scene, cameras: &[CameraMatrix], spec: &TrajectorySpec) -> Result<ProjectedScene> {
    spec.validate()?;
    let n = scene.points.len();
    let n_dynamic = (spec.dynamic_fraction * n as f64).floor() as usize;
    let mut labels = vec![
        if spec.jitter_sigma > 0.0 {
            PointLabel::Jittered
        } else {
            PointLabel::Clean
        };
        n
    ];
    let mut velocity = vec![Vector3::zeros(); n];
    if n_dynamic > 0 {
        let mut rng = seed::rng(seed::derive(spec.seed, &[DYNAMIC]));
        for p in rand::seq::index::sample(&mut rng, n, n_dynamic) {
            let dir: [f64; 3] = UnitSphere.sample(&mut rng);
            velocity[p] = Vector3::from(dir) * spec.dynamic_speed;
            labels[p] = PointLabel::Dynamic;
        }
    }
    let noise = if spec.jitter_sigma > 0.0 {
        Some(Normal::new(0.0, spec.jitter_sigma).map_err(|_| Error::contract("invalid jitter sigma"))?)
    } else {
        None
    };
    let mut observations = Vec::with_capacity(cameras.len());
    for (f, cam) in cameras.iter().enumerate() {
        let mut rng = seed::rng(seed::derive(spec.seed, &[JITTER, f as u64]));
        let mut frame = Vec::with_capacity(n);
        for (p, x) in scene.points.iter().enumerate() {
            let world = x + velocity[p] * f as f64;
            if cam.depth(&world) <= 0.0 {
                return Err(Error::contract(format!("point {p} is behind the camera in frame {f}")));
            }
            let mut uv = cam.project(&world);
            if let Some(noise) = &noise {
                uv[0] += noise.sample(&mut rng);
                uv[1] += noise.sample(&mut rng);
            }
            frame.push(spec.intrinsics.contains(uv).then_some(uv));
        }
        observations.push(frame);
    }
    Ok(ProjectedScene {
        cameras: cameras.to_vec(),
        intrinsics: spec.intrinsics,
        observations,
        point_labels: labels,
        outlier_fraction: spec.outlier_fraction,
        seed: spec.seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DotStyle {
    /// Gaussian std-dev of each dot in px (at least 0.8). The detector only
    /// searches DoG levels from σ = 1.6 upward, so dots much below 2.5 px
    /// are rendered fine but rarely detected.
    pub dot_sigma: f64,
    pub intensity_seed: u64,
    /// Amplitude of a fixed smooth background texture; 0 disables it.
    pub texture_amplitude: f64,
}

impl Default for DotStyle {
    fn default() -> Self {
        Self {
            dot_sigma: 2.5,
            intensity_seed: 0,
            texture_amplitude: 0.0,
        }
    }
}

/// Intensity of the dot for world point `index`, in `[0.4, 1.0]`.
pub fn dot_intensity(intensity_seed: u64, index: usize) -> f64 {
    let mut rng = seed::rng(seed::derive(intensity_seed, &[INTENSITY, index as u64]));
    rng.random_range(0.4..=1.0)
}

/// Splat each visible point as an isotropic Gaussian. Point `i` always has
/// the same intensity, so the same world point looks alike across frames.
pub fn render_dots(points: &[Option<[f64; 2]>], width: usize, height: usize, style: &DotStyle) -> Result<Frame> {
    if !(style.dot_sigma >= 0.8) {
        return Err(Error::contract(format!("dot sigma must be at least 0.8, got {}", style.dot_sigma)));
    }
    let mut px = vec![0.0; width * height];
    if style.texture_amplitude > 0.0 {
        let mut rng = seed::rng(seed::derive(style.intensity_seed, &[TEXTURE]));
        let mut tex: Vec<f64> = (0..width * height).map(|_| rng.random::<f64>()).collect();
        blur_in_place(&mut tex, width, height, 2.0);
        let (lo, hi) = tex.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        let span = (hi - lo).max(1e-12);
        for (p, t) in px.iter_mut().zip(&tex) {
            *p = style.texture_amplitude * (t - lo) / span;
        }
    }
    let s = style.dot_sigma;
    let radius = (4.0 * s).ceil() as isize;
    let inv = 1.0 / (2.0 * s * s);
    for (i, p) in points.iter().enumerate() {
        let Some([u, v]) = *p else { continue };
        let amp = dot_intensity(style.intensity_seed, i);
        let (cu, cv) = (u.round() as isize, v.round() as isize);
        for y in (cv - radius).max(0)..=(cv + radius).min(height as isize - 1) {
            for x in (cu - radius).max(0)..=(cu + radius).min(width as isize - 1) {
                let dx = x as f64 - u;
                let dy = y as f64 - v;
                px[y as usize * width + x as usize] += amp * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    Frame::from_clamped(width, height, px)
}

/// Frames of a projected scene rendered as dots.
pub fn render_video(projected: &ProjectedScene, style: &DotStyle) -> Result<Vec<Frame>> {
    let (w, h) = (projected.intrinsics.width, projected.intrinsics.height);
    projected
        .observations
        .iter()
        .map(|obs| render_dots(obs, w, h, style))
        .collect()
}

/// Two cameras at random positions 4-6 units from the origin, both looking
/// roughly at it, with distinct random intrinsics. Points generated by
/// [`generate_scene`] with extent 1 are in front of both.
pub fn random_rig(seed: u64) -> (CameraMatrix, CameraMatrix) {
    let mut rng = seed::rng(seed::derive(seed, &[RIG]));
    let camera = |rng: &mut rand_chacha::ChaCha8Rng| loop {
        let focal = rng.random_range(400.0..900.0);
        let k = Matrix3::new(
            focal,
            0.0,
            rng.random_range(280.0..360.0),
            0.0,
            focal * rng.random_range(0.95..1.05),
            rng.random_range(200.0..280.0),
            0.0,
            0.0,
            1.0,
        );
        let dir: [f64; 3] = UnitSphere.sample(rng);
        let center = Vector3::from(dir) * rng.random_range(4.0..6.0);
        let target = Vector3::new(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        );
        let up = Vector3::new(rng.random_range(-0.2..0.2), 1.0, rng.random_range(-0.2..0.2));
        if let Ok(cam) = CameraMatrix::look_at(k, center, target, up) {
            return cam;
        }
    };
    loop {
        let a = camera(&mut rng);
        let b = camera(&mut rng);
        let (ca, cb) = (a.center(), b.center());
        // Keep a useful baseline and avoid near-opposite views.
        let angle = (ca.dot(&cb) / (ca.norm() * cb.norm())).acos();
        if angle > 0.15 && angle < 0.5 * PI {
            return (a, b);
        }
    }
}
