//! Per-video consistency scoring.
//!
//! A video is scored by sampling frame pairs, estimating F for each pair with
//! RANSAC and aggregating the Sampson error of the surviving correspondences.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float as _;
use serde::{Deserialize, Serialize};

use crate::epipolar::{ransac_fundamental, Correspondence, EpipolarMetric, RansacConfig};
use crate::features::{correspondences, extract_features, match_descriptors, FeatureConfig, FrameFeatures};
use crate::image::{motion_level, Frame};
use crate::{seed, Error, Result};

/// Frame pairs `(i, i + g)` with `i` a multiple of `stride`, sorted and
/// deduplicated. Gaps that do not fit contribute nothing.
pub fn frame_pairs(n_frames: usize, gaps: &[usize], stride: usize) -> Result<Vec<(usize, usize)>> {
    if gaps.is_empty() {
        return Err(Error::contract("gap list is empty"));
    }
    if n_frames < 2 {
        return Err(Error::contract(format!("need at least 2 frames, got {n_frames}")));
    }
    if stride == 0 || gaps.contains(&0) {
        return Err(Error::contract("gaps and stride must be positive"));
    }
    let mut pairs = Vec::new();
    for &g in gaps {
        let mut i = 0;
        while i + g < n_frames {
            pairs.push((i, i + g));
            i += stride;
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStatus {
    Ok,
    TooFewMatches,
    EstimationFailed,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub frame_i: usize,
    pub frame_j: usize,
    pub n_matches: usize,
    pub n_inliers: usize,
    /// Mean error over the configured scope (inliers by default), capped
    /// residuals excluded. Present iff `status` is `Ok`.
    pub mean_inlier_sampson: Option<f64>,
    pub median_inlier_sampson: Option<f64>,
    pub status: PairStatus,
    /// Estimated F in pixel coordinates, row-major, when RANSAC succeeded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fundamental: Option<[f64; 9]>,
}

impl PairScore {
    fn failed(frame_i: usize, frame_j: usize, n_matches: usize, status: PairStatus) -> Self {
        Self {
            frame_i,
            frame_j,
            n_matches,
            n_inliers: 0,
            mean_inlier_sampson: None,
            median_inlier_sampson: None,
            status,
            fundamental: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Aggregation {
    Mean,
    Median,
    /// Mean after dropping `floor(fraction * n)` values from each end.
    TrimmedMean { fraction: f64 },
}

impl Aggregation {
    pub fn trimmed() -> Self {
        Aggregation::TrimmedMean { fraction: 0.1 }
    }

    pub fn apply(self, values: &[f64]) -> Option<f64> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        match self {
            Aggregation::Mean => Some(mean(&v)),
            Aggregation::Median => Some(median_sorted(&v)),
            Aggregation::TrimmedMean { fraction } => {
                let k = (fraction.clamp(0.0, 0.5) * v.len() as f64).floor() as usize;
                let kept = &v[k..v.len() - k];
                if kept.is_empty() {
                    Some(median_sorted(&v))
                } else {
                    Some(mean(kept))
                }
            }
        }
    }
}

/// Which correspondences enter the per-pair statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorScope {
    #[default]
    Inliers,
    AllMatches,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub features: FeatureConfig,
    /// RANSAC runs in pixel coordinates; its seed is the global seed from
    /// which per-pair seeds are derived.
    pub ransac: RansacConfig,
    pub gaps: Vec<usize>,
    pub stride: usize,
    pub aggregation: Aggregation,
    pub static_threshold: f64,
    /// Report errors for coordinates divided by the image diagonal.
    pub normalize_by_diagonal: bool,
    pub min_matches: usize,
    pub error_scope: ErrorScope,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            ransac: RansacConfig::default(),
            gaps: alloc::vec![4, 8],
            stride: 4,
            aggregation: Aggregation::Mean,
            static_threshold: 0.90,
            normalize_by_diagonal: true,
            min_matches: 30,
            error_scope: ErrorScope::Inliers,
        }
    }
}

impl ScoringConfig {
    /// RANSAC settings for the pair `(i, j)`.
    pub fn pair_ransac(&self, i: usize, j: usize) -> RansacConfig {
        RansacConfig {
            seed: seed::derive(self.ransac.seed, &[i as u64, j as u64]),
            ..self.ransac
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.static_threshold) {
            return Err(Error::contract(format!("static threshold must be in [0, 1], got {}", self.static_threshold)));
        }
        if self.min_matches < 8 {
            return Err(Error::contract(format!("min_matches must be at least 8, got {}", self.min_matches)));
        }
        if let Aggregation::TrimmedMean { fraction } = self.aggregation {
            if !(0.0..0.5).contains(&fraction) {
                return Err(Error::contract(format!("trim fraction must be in [0, 0.5), got {fraction}")));
            }
        }
        Ok(())
    }
}

/// Zero-motion rule: almost everything is an inlier, the error vanishes and
/// the matched points did not move.
const DEGENERATE_INLIER_RATIO: f64 = 0.99;
const DEGENERATE_MEDIAN: f64 = 1e-6;
const DEGENERATE_TRANSLATION: f64 = 0.5;

/// Score one pair of matched correspondences (pixel coordinates). `diagonal`
/// is the image diagonal used for normalized reporting.
pub fn score_correspondences(
    frame_i: usize,
    frame_j: usize,
    matches: &[Correspondence],
    diagonal: f64,
    cfg: &ScoringConfig,
) -> PairScore {
    let n = matches.len();
    if n < cfg.min_matches.max(8) {
        return PairScore::failed(frame_i, frame_j, n, PairStatus::TooFewMatches);
    }
    let fit = match ransac_fundamental(matches, &cfg.pair_ransac(frame_i, frame_j)) {
        Ok(fit) => fit,
        Err(Error::Degenerate(_)) => return PairScore::failed(frame_i, frame_j, n, PairStatus::Degenerate),
        Err(_) => return PairScore::failed(frame_i, frame_j, n, PairStatus::EstimationFailed),
    };
    let (report, scale) = if cfg.normalize_by_diagonal {
        match fit.fundamental.rescaled_coordinates(diagonal) {
            Ok(f) => (f, diagonal),
            Err(_) => return PairScore::failed(frame_i, frame_j, n, PairStatus::EstimationFailed),
        }
    } else {
        (fit.fundamental.clone(), 1.0)
    };
    let metric: EpipolarMetric = cfg.ransac.metric;
    let mut errors: Vec<f64> = matches
        .iter()
        .zip(&fit.inliers)
        .filter(|(_, &inlier)| inlier || cfg.error_scope == ErrorScope::AllMatches)
        .map(|(c, _)| {
            let c = Correspondence::new([c.x[0] / scale, c.x[1] / scale], [c.x_prime[0] / scale, c.x_prime[1] / scale]);
            metric.eval(report.matrix(), &c)
        })
        .filter(|r| !r.capped)
        .map(|r| r.value)
        .collect();
    let n_inliers = fit.inlier_count();
    if errors.is_empty() {
        return PairScore::failed(frame_i, frame_j, n, PairStatus::EstimationFailed);
    }
    errors.sort_by(f64::total_cmp);
    let mean_err = mean(&errors);
    let median_err = median_sorted(&errors);

    let shift = mean_displacement(matches);
    if n_inliers as f64 > DEGENERATE_INLIER_RATIO * n as f64
        && median_err < DEGENERATE_MEDIAN
        && shift < DEGENERATE_TRANSLATION
    {
        let mut out = PairScore::failed(frame_i, frame_j, n, PairStatus::Degenerate);
        out.n_inliers = n_inliers;
        return out;
    }
    PairScore {
        frame_i,
        frame_j,
        n_matches: n,
        n_inliers,
        mean_inlier_sampson: Some(mean_err),
        median_inlier_sampson: Some(median_err),
        status: PairStatus::Ok,
        fundamental: Some(fit.fundamental.to_row_major()),
    }
}

/// Mean displacement of matched points. The centroid alone is not enough: an
/// orbit around the look-at point leaves it fixed while the scene moves.
fn mean_displacement(matches: &[Correspondence]) -> f64 {
    let total: f64 = matches
        .iter()
        .map(|c| (c.x_prime[0] - c.x[0]).hypot(c.x_prime[1] - c.x[1]))
        .sum();
    total / matches.len() as f64
}

/// Match two frames' features and score the resulting correspondences.
pub fn score_features(
    frame_i: usize,
    frame_j: usize,
    a: &FrameFeatures,
    b: &FrameFeatures,
    diagonal: f64,
    cfg: &ScoringConfig,
) -> Result<PairScore> {
    let matches = match_descriptors(&a.descriptors, &b.descriptors, cfg.features.ratio_threshold, cfg.features.mutual)?;
    let corr = correspondences(&a.keypoints, &b.keypoints, &matches);
    Ok(score_correspondences(frame_i, frame_j, &corr, diagonal, cfg))
}

/// Score a single pair of frames. The pair is labelled `(0, 1)`.
pub fn score_pair(frame_a: &Frame, frame_b: &Frame, cfg: &ScoringConfig) -> Result<PairScore> {
    if frame_a.width() != frame_b.width() || frame_a.height() != frame_b.height() {
        return Err(Error::contract(format!(
            "frame sizes differ: {}x{} vs {}x{}",
            frame_a.width(),
            frame_a.height(),
            frame_b.width(),
            frame_b.height()
        )));
    }
    cfg.validate()?;
    let a = extract_features(frame_a, &cfg.features)?;
    let b = extract_features(frame_b, &cfg.features)?;
    score_features(0, 1, &a, &b, frame_a.diagonal(), cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VideoFlags {
    pub near_static: bool,
    pub insufficient_texture: bool,
}

impl VideoFlags {
    pub fn any(&self) -> bool {
        self.near_static || self.insufficient_texture
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub video_id: String,
    /// Aggregated error (lower is better); absent when no pair was usable.
    pub consistency_error: Option<f64>,
    /// `1 / (1 + consistency_error)`.
    pub consistency_score: Option<f64>,
    /// Mean SSIM of the first frame against the others; absent when the
    /// score was computed from correspondences only.
    pub motion_level: Option<f64>,
    pub n_valid_pairs: usize,
    pub flags: VideoFlags,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pairs: Vec<PairScore>,
}

/// Combine pair scores into a video score.
pub fn assemble_video_score(
    video_id: &str,
    motion: Option<f64>,
    pairs: Vec<PairScore>,
    cfg: &ScoringConfig,
) -> VideoScore {
    let ok: Vec<f64> = pairs
        .iter()
        .filter(|p| p.status == PairStatus::Ok)
        .filter_map(|p| p.mean_inlier_sampson)
        .collect();
    let too_few = pairs.iter().filter(|p| p.status == PairStatus::TooFewMatches).count();
    let consistency_error = cfg.aggregation.apply(&ok).map(|e| e.max(0.0));
    let flags = VideoFlags {
        near_static: motion.is_some_and(|m| m > cfg.static_threshold),
        insufficient_texture: ok.is_empty() || 2 * too_few > pairs.len(),
    };
    VideoScore {
        video_id: video_id.into(),
        consistency_error,
        consistency_score: consistency_error.map(|e| 1.0 / (1.0 + e)),
        motion_level: motion,
        n_valid_pairs: ok.len(),
        flags,
        pairs,
    }
}

/// Score a video end to end. Features are extracted once per frame used.
pub fn score_video(video_id: &str, frames: &[Frame], cfg: &ScoringConfig) -> Result<VideoScore> {
    if frames.len() < 2 {
        return Err(Error::contract(format!("need at least 2 frames, got {}", frames.len())));
    }
    let (w, h) = (frames[0].width(), frames[0].height());
    if let Some(k) = frames.iter().position(|f| f.width() != w || f.height() != h) {
        return Err(Error::contract(format!("frame {k} size differs from frame 0")));
    }
    cfg.validate()?;
    let motion = motion_level(frames)?;
    let pairs = frame_pairs(frames.len(), &cfg.gaps, cfg.stride)?;
    let mut cache: BTreeMap<usize, FrameFeatures> = BTreeMap::new();
    for &(i, j) in &pairs {
        for k in [i, j] {
            if let alloc::collections::btree_map::Entry::Vacant(e) = cache.entry(k) {
                e.insert(extract_features(&frames[k], &cfg.features)?);
            }
        }
    }
    let diagonal = frames[0].diagonal();
    let scores = pairs
        .iter()
        .map(|&(i, j)| score_features(i, j, &cache[&i], &cache[&j], diagonal, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble_video_score(video_id, Some(motion), scores, cfg))
}

/// Score a video given per-pair correspondences instead of pixels.
/// `pair_matches(i, j)` supplies the matches for each selected pair.
pub fn score_video_from_correspondences(
    video_id: &str,
    n_frames: usize,
    diagonal: f64,
    cfg: &ScoringConfig,
    mut pair_matches: impl FnMut(usize, usize) -> Vec<Correspondence>,
) -> Result<VideoScore> {
    cfg.validate()?;
    let pairs = frame_pairs(n_frames, &cfg.gaps, cfg.stride)?;
    let scores = pairs
        .iter()
        .map(|&(i, j)| score_correspondences(i, j, &pair_matches(i, j), diagonal, cfg))
        .collect();
    Ok(assemble_video_score(video_id, None, scores, cfg))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
