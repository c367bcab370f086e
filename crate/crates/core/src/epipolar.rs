//! Two-view epipolar geometry: fundamental-matrix estimation, epipolar
//! residuals and the camera-matrix construction used as ground truth.
//!
//! Points are pixel coordinates; the homogeneous form is `(x, y, 1)`. A
//! correspondence `(x, x')` satisfies `x'^T F x = 0` for the true `F`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Vector3, Vector4};
use rand::seq::index;
#[allow(unused_imports)]
use num_traits::Float as _;
use serde::{Deserialize, Serialize};

use crate::{seed, Error, Result};

/// Value reported for a residual whose denominator vanishes (the point sits
/// on an epipole). Such residuals carry `capped = true`.
pub const ERROR_CAP: f64 = 1e6;

const DENOMINATOR_EPS: f64 = 1e-15;
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    /// Point in the first frame.
    pub x: [f64; 2],
    /// Matching point in the second frame.
    pub x_prime: [f64; 2],
}

impl Correspondence {
    pub fn new(x: [f64; 2], x_prime: [f64; 2]) -> Self {
        Self { x, x_prime }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.x_prime).all(|v| v.is_finite())
    }

    pub fn h(&self) -> Vector3<f64> {
        Vector3::new(self.x[0], self.x[1], 1.0)
    }

    pub fn h_prime(&self) -> Vector3<f64> {
        Vector3::new(self.x_prime[0], self.x_prime[1], 1.0)
    }

    /// Same correspondence with the roles of the two frames exchanged.
    pub fn swapped(&self) -> Self {
        Self::new(self.x_prime, self.x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    EightPoint,
    FromCameras,
}

/// Rank-2 fundamental matrix in canonical scale: unit Frobenius norm and the
/// largest-magnitude entry positive.
#[derive(Debug, Clone, PartialEq)]
pub struct FundamentalMatrix {
    m: Matrix3<f64>,
    pub inlier_count: usize,
    pub method: FitMethod,
}

impl FundamentalMatrix {
    /// Canonicalize `m`. Fails when `m` is zero or not finite; the rank is
    /// not touched.
    pub fn from_matrix(m: Matrix3<f64>, method: FitMethod) -> Result<Self> {
        Ok(Self {
            m: canonical_scale(&m)?,
            inlier_count: 0,
            method,
        })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Row-major entries.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[(0, 0)], m[(0, 1)], m[(0, 2)],
            m[(1, 0)], m[(1, 1)], m[(1, 2)],
            m[(2, 0)], m[(2, 1)], m[(2, 2)],
        ]
    }

    pub fn singular_values(&self) -> Vector3<f64> {
        self.m.svd(false, false).singular_values
    }

    pub fn is_rank_two(&self) -> bool {
        let s = self.singular_values();
        s.min() < 1e-8 * s.max()
    }

    pub fn sampson(&self, c: &Correspondence) -> Residual {
        sampson_error(&self.m, c)
    }

    pub fn symmetric(&self, c: &Correspondence) -> Residual {
        symmetric_epipolar_error(&self.m, c)
    }

    pub fn epipole(&self, which: Side) -> Epipole {
        epipole(&self.m, which)
    }

    /// The same geometry expressed for coordinates divided by `scale`, i.e.
    /// `diag(s, s, 1) F diag(s, s, 1)`.
    pub fn rescaled_coordinates(&self, scale: f64) -> Result<Self> {
        let s = Matrix3::new(scale, 0.0, 0.0, 0.0, scale, 0.0, 0.0, 0.0, 1.0);
        let mut out = Self::from_matrix(s * self.m * s, self.method)?;
        out.inlier_count = self.inlier_count;
        Ok(out)
    }
}

fn canonical_scale(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let norm = m.norm();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::Degenerate(format!("cannot normalize matrix with norm {norm}")));
    }
    let mut out = m / norm;
    let mut largest = out[0];
    for v in out.iter() {
        if v.abs() > largest.abs() {
            largest = *v;
        }
    }
    if largest < 0.0 {
        out = -out;
    }
    Ok(out)
}

/// `1 - |<A, B>_F|` for unit-norm matrices: zero when the two are parallel.
pub fn alignment_error(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let dot = a.component_mul(b).sum() / (a.norm() * b.norm());
    1.0 - dot.abs()
}

/// Cross-product matrix `[v]_x`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// An epipolar residual. Points that map onto an epipole have an undefined
/// residual and are reported as [`ERROR_CAP`] with `capped` set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    pub value: f64,
    pub capped: bool,
}

impl Residual {
    fn finite(value: f64) -> Self {
        Self { value, capped: false }
    }

    fn cap() -> Self {
        Self {
            value: ERROR_CAP,
            capped: true,
        }
    }
}

/// Sampson error `(x'^T F x)^2 / ((Fx)_1^2 + (Fx)_2^2 + (F^T x')_1^2 + (F^T x')_2^2)`.
pub fn sampson_error(f: &Matrix3<f64>, c: &Correspondence) -> Residual {
    let x = c.h();
    let xp = c.h_prime();
    let fx = f * x;
    let ftxp = f.transpose() * xp;
    let r = xp.dot(&fx);
    let den = fx.x * fx.x + fx.y * fx.y + ftxp.x * ftxp.x + ftxp.y * ftxp.y;
    if den < DENOMINATOR_EPS * f.norm_squared() {
        return Residual::cap();
    }
    Residual::finite(r * r / den)
}

/// Sum of squared distances from each point to the epipolar line induced by
/// its partner.
pub fn symmetric_epipolar_error(f: &Matrix3<f64>, c: &Correspondence) -> Residual {
    let x = c.h();
    let xp = c.h_prime();
    let line_b = f * x;
    let line_a = f.transpose() * xp;
    let na = line_a.x * line_a.x + line_a.y * line_a.y;
    let nb = line_b.x * line_b.x + line_b.y * line_b.y;
    let floor = DENOMINATOR_EPS * f.norm_squared();
    if na < floor || nb < floor {
        return Residual::cap();
    }
    let r = xp.dot(&line_b);
    Residual::finite(r * r / nb + r * r / na)
}

/// Epipolar residual used for inlier classification and scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpipolarMetric {
    #[default]
    Sampson,
    Symmetric,
}

impl EpipolarMetric {
    pub fn eval(self, f: &Matrix3<f64>, c: &Correspondence) -> Residual {
        match self {
            EpipolarMetric::Sampson => sampson_error(f, c),
            EpipolarMetric::Symmetric => symmetric_epipolar_error(f, c),
        }
    }
}

/// Hartley normalization: translate the centroid to the origin and scale so
/// the mean distance from the origin is `sqrt(2)`. Returns the transformed
/// points and the transform.
pub fn normalize_points(points: &[[f64; 2]]) -> Result<(Vec<[f64; 2]>, Matrix3<f64>)> {
    if points.len() < 2 {
        return Err(Error::contract("normalization needs at least 2 points"));
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let spread = cx.abs().max(cy.abs()).max(1.0);
    if !(mean_dist > 1e-12 * spread) {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let s = core::f64::consts::SQRT_2 / mean_dist;
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let out = points
        .iter()
        .map(|p| [s * (p[0] - cx), s * (p[1] - cy)])
        .collect();
    Ok((out, t))
}

/// Normalized 8-point algorithm.
///
/// Fails with [`Error::Degenerate`] when the design matrix has a
/// multi-dimensional (near) null space, detected as `sigma_1 / sigma_8 > 1e12`.
pub fn eight_point(correspondences: &[Correspondence]) -> Result<FundamentalMatrix> {
    let n = correspondences.len();
    if n < 8 {
        return Err(Error::contract(format!("8-point needs at least 8 correspondences, got {n}")));
    }
    if let Some(i) = correspondences.iter().position(|c| !c.is_finite()) {
        return Err(Error::contract(format!("correspondence {i} has non-finite coordinates")));
    }
    let a: Vec<[f64; 2]> = correspondences.iter().map(|c| c.x).collect();
    let b: Vec<[f64; 2]> = correspondences.iter().map(|c| c.x_prime).collect();
    let (an, ta) = normalize_points(&a)?;
    let (bn, tb) = normalize_points(&b)?;

    // Pad to at least 9 rows so the SVD yields the full right basis.
    let rows = n.max(9);
    let mut design = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in an.iter().zip(&bn).enumerate() {
        let (x, y) = (p[0], p[1]);
        let (xp, yp) = (q[0], q[1]);
        let row = [xp * x, xp * y, xp, yp * x, yp * y, yp, x, y, 1.0];
        for (j, v) in row.iter().enumerate() {
            design[(i, j)] = *v;
        }
    }
    let svd = design.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let largest = svd.singular_values[order[0]];
    let eighth = svd.singular_values[order[7]];
    if !(eighth > 0.0) || largest / eighth > MAX_CONDITION {
        return Err(Error::Degenerate(format!(
            "design matrix condition number {:e} exceeds {MAX_CONDITION:e}",
            largest / eighth
        )));
    }
    let null = v_t.row(order[8]);
    let f_hat = Matrix3::new(
        null[0], null[1], null[2], null[3], null[4], null[5], null[6], null[7], null[8],
    );
    let f_rank2 = enforce_rank_two(&f_hat);
    let f = tb.transpose() * f_rank2 * ta;
    let mut out = FundamentalMatrix::from_matrix(f, FitMethod::EightPoint)?;
    out.inlier_count = n;
    Ok(out)
}

fn enforce_rank_two(m: &Matrix3<f64>) -> Matrix3<f64> {
    let mut svd = m.svd(true, true);
    let smallest = svd.singular_values.imin();
    svd.singular_values[smallest] = 0.0;
    svd.recompose().expect("singular vectors requested")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Residual threshold in px^2; a correspondence is an inlier when its
    /// residual is strictly below it.
    pub inlier_threshold: f64,
    pub seed: u64,
    /// Stop early once this confidence of having drawn an all-inlier sample
    /// is reached. `None` always runs every iteration.
    pub adaptive_confidence: Option<f64>,
    pub metric: EpipolarMetric,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            inlier_threshold: 1.0,
            seed: 0,
            adaptive_confidence: None,
            metric: EpipolarMetric::Sampson,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacFit {
    pub fundamental: FundamentalMatrix,
    pub inliers: Vec<bool>,
    /// Iterations actually evaluated (smaller than configured only in
    /// adaptive mode).
    pub iterations_run: usize,
}

impl RansacFit {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

struct Consensus {
    count: usize,
    mean_error: f64,
}

fn consensus(
    f: &Matrix3<f64>,
    data: &[Correspondence],
    cfg: &RansacConfig,
    mask: Option<&mut Vec<bool>>,
) -> Consensus {
    let mut count = 0;
    let mut sum = 0.0;
    let mut mask = mask;
    for (i, c) in data.iter().enumerate() {
        let r = cfg.metric.eval(f, c);
        let inlier = !r.capped && r.value < cfg.inlier_threshold;
        if inlier {
            count += 1;
            sum += r.value;
        }
        if let Some(m) = mask.as_deref_mut() {
            m[i] = inlier;
        }
    }
    Consensus {
        count,
        mean_error: if count > 0 { sum / count as f64 } else { f64::INFINITY },
    }
}

/// Robust fundamental-matrix fit.
///
/// Iteration `k` draws its minimal sample from an RNG seeded with
/// `seed ^ k`, so the outcome does not depend on evaluation order. The
/// consensus-maximal model wins (ties go to the lower mean inlier residual)
/// and is refit on all of its inliers.
pub fn ransac_fundamental(data: &[Correspondence], cfg: &RansacConfig) -> Result<RansacFit> {
    let n = data.len();
    if n < 8 {
        return Err(Error::contract(format!("RANSAC needs at least 8 correspondences, got {n}")));
    }
    if cfg.iterations == 0 {
        return Err(Error::contract("RANSAC needs at least one iteration"));
    }
    let mut best: Option<(Matrix3<f64>, Consensus)> = None;
    let mut degenerate_samples = 0usize;
    let mut required = cfg.iterations;
    let mut run = 0usize;
    let mut sample = [Correspondence::new([0.0; 2], [0.0; 2]); 8];
    while run < required {
        let mut rng = seed::rng(cfg.seed ^ run as u64);
        run += 1;
        for (slot, i) in sample.iter_mut().zip(index::sample(&mut rng, n, 8)) {
            *slot = data[i];
        }
        let model = match eight_point(&sample) {
            Ok(f) => f,
            Err(_) => {
                degenerate_samples += 1;
                continue;
            }
        };
        let score = consensus(model.matrix(), data, cfg, None);
        let better = match &best {
            None => true,
            Some((_, b)) => {
                score.count > b.count || (score.count == b.count && score.mean_error < b.mean_error)
            }
        };
        if better {
            if let Some(p) = cfg.adaptive_confidence {
                let w = score.count as f64 / n as f64;
                required = required.min(adaptive_iterations(p, w, cfg.iterations));
            }
            best = Some((*model.matrix(), score));
        }
    }
    let (model, score) = match best {
        Some(b) => b,
        None if degenerate_samples == run => {
            return Err(Error::Degenerate("every minimal sample was degenerate".into()))
        }
        None => return Err(Error::EstimationFailed("no iteration produced a model".into())),
    };
    if score.count < 8 {
        return Err(Error::EstimationFailed(format!(
            "best model has only {} inliers",
            score.count
        )));
    }
    let mut mask = vec![false; n];
    consensus(&model, data, cfg, Some(&mut mask));
    let inlier_set: Vec<Correspondence> = data
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(c, _)| *c)
        .collect();
    let mut refit = eight_point(&inlier_set)?;
    let final_score = consensus(refit.matrix(), data, cfg, Some(&mut mask));
    if final_score.count < 8 {
        return Err(Error::EstimationFailed(format!(
            "refit model has only {} inliers",
            final_score.count
        )));
    }
    refit.inlier_count = final_score.count;
    Ok(RansacFit {
        fundamental: refit,
        inliers: mask,
        iterations_run: run,
    })
}

/// Number of draws needed to hit an all-inlier 8-sample with probability
/// `confidence` when the inlier ratio is `w`.
fn adaptive_iterations(confidence: f64, w: f64, cap: usize) -> usize {
    let good = w.powi(8);
    if good <= 0.0 {
        return cap;
    }
    if good >= 1.0 {
        return 1;
    }
    let k = (1.0 - confidence).ln() / (1.0 - good).ln();
    if !k.is_finite() || k >= cap as f64 {
        cap
    } else {
        (k.ceil() as usize).max(1)
    }
}

/// Pinhole camera `P = K [R | t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraMatrix {
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl CameraMatrix {
    pub fn new(k: Matrix3<f64>, r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self> {
        let upper = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0;
        if !upper || !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0 && k[(2, 2)] > 0.0) {
            return Err(Error::contract("intrinsics must be upper-triangular with positive diagonal"));
        }
        let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
        if ortho > 1e-9 || r.determinant() < 0.0 {
            return Err(Error::contract(format!("rotation is not orthonormal (error {ortho:e})")));
        }
        Ok(Self { k, r, t })
    }

    /// Camera at world position `center` looking towards `target`, with the
    /// image y axis pointing along `-up` (y down in the image).
    pub fn look_at(
        k: Matrix3<f64>,
        center: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let z = (target - center).normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-12 {
            return Err(Error::contract("viewing direction is parallel to the up vector"));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * center);
        Self::new(k, r, t)
    }

    pub fn projection(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.r);
        rt.set_column(3, &self.t);
        self.k * rt
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.r.transpose() * self.t)
    }

    /// Depth of a world point along the optical axis.
    pub fn depth(&self, p: &Vector3<f64>) -> f64 {
        (self.r * p + self.t).z
    }

    pub fn project(&self, p: &Vector3<f64>) -> [f64; 2] {
        let h = self.projection() * Vector4::new(p.x, p.y, p.z, 1.0);
        [h.x / h.z, h.y / h.z]
    }
}

/// `F = [e']_x P' P^+`, with `e' = P' C` and `C` the null vector of `P`.
pub fn fundamental_from_cameras(p: &CameraMatrix, p_prime: &CameraMatrix) -> Result<FundamentalMatrix> {
    let pm = p.projection();
    let pp = p_prime.projection();

    let c = null_vector(&pm);
    let other = null_vector(&pp);
    let baseline = if c.w.abs() > 1e-12 && other.w.abs() > 1e-12 {
        (c.xyz() / c.w - other.xyz() / other.w).norm()
    } else {
        // A center at infinity: compare directions.
        (c.normalize() - other.normalize()).norm().min((c.normalize() + other.normalize()).norm())
    };
    if !(baseline > 1e-9) {
        return Err(Error::Degenerate("camera centers coincide".into()));
    }

    let gram = (pm * pm.transpose())
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("projection matrix is rank deficient".into()))?;
    let p_pinv = pm.transpose() * gram;
    let e_prime = pp * c;
    let f = skew(&e_prime) * pp * p_pinv;
    FundamentalMatrix::from_matrix(f, FitMethod::FromCameras)
}

/// Null vector of a 3x4 matrix from signed 3x3 minors.
fn null_vector(p: &Matrix3x4<f64>) -> Vector4<f64> {
    let minor = |skip: usize| {
        let cols: Vec<usize> = (0..4).filter(|&c| c != skip).collect();
        Matrix3::from_fn(|r, c| p[(r, cols[c])]).determinant()
    };
    let v = Vector4::new(minor(0), -minor(1), minor(2), -minor(3));
    let n = v.norm();
    if n > 0.0 { v / n } else { v }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Epipole in the first image: `F e = 0`.
    Left,
    /// Epipole in the second image: `F^T e' = 0`.
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Epipole {
    /// Homogeneous point, scaled to `z = 1` unless at infinity.
    pub point: Vector3<f64>,
    pub at_infinity: bool,
}

pub fn epipole(f: &Matrix3<f64>, which: Side) -> Epipole {
    let m = match which {
        Side::Left => *f,
        Side::Right => f.transpose(),
    };
    // The null vector is orthogonal to every row; the cross product of the
    // two most independent rows keeps full precision even when F is in
    // pixel units and badly conditioned.
    let rows = [m.row(0).transpose(), m.row(1).transpose(), m.row(2).transpose()];
    let mut e = Vector3::zeros();
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let c = rows[i].cross(&rows[j]);
        if c.norm() > e.norm() {
            e = c;
        }
    }
    let e = if e.norm() > 0.0 { e.normalize() } else { e };
    if e.z.abs() < 1e-12 {
        Epipole {
            point: e,
            at_infinity: true,
        }
    } else {
        Epipole {
            point: e / e.z,
            at_infinity: false,
        }
    }
}
