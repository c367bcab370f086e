//! Scoring of frame directories with an optional keypoint cache.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use epigeo_core::features::{extract_features, FrameFeatures};
use epigeo_core::image::{motion_level, Frame};
use epigeo_core::scoring::{assemble_video_score, frame_pairs, score_correspondences, score_features, PairScore, VideoScore};
use rayon::prelude::*;
use serde::Deserialize;

use crate::config::{canonical_hash, RunConfig};
use crate::formats::{group_correspondences, read_jsonl, sha256_hex, CorrespondenceRecord, FeatureCache};
use crate::io::{self, IoError};

/// File name of per-video correspondences inside a frame directory.
pub const CORRESPONDENCES: &str = "correspondences.jsonl";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoInput {
    pub id: String,
    pub dir: PathBuf,
}

#[derive(Deserialize)]
struct Manifest {
    videos: Vec<ManifestEntry>,
}

#[derive(Deserialize)]
struct ManifestEntry {
    id: String,
    path: PathBuf,
}

/// A frame directory is one video named after the directory. A JSON
/// manifest `{"videos": [{"id", "path"}]}` lists several; relative paths
/// are taken from the manifest's directory.
pub fn resolve_inputs(path: &Path) -> Result<Vec<VideoInput>, IoError> {
    if path.is_dir() {
        let id = path
            .canonicalize()
            .ok()
            .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "video".into());
        return Ok(vec![VideoInput {
            id,
            dir: path.to_path_buf(),
        }]);
    }
    let text = std::fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| IoError::Input(format!("{}: {e}", path.display())))?;
    if manifest.videos.is_empty() {
        return Err(IoError::Input(format!("{}: manifest lists no videos", path.display())));
    }
    let mut seen = BTreeSet::new();
    let base = path.parent().unwrap_or(Path::new("."));
    manifest
        .videos
        .into_iter()
        .map(|v| {
            if !seen.insert(v.id.clone()) {
                return Err(IoError::Input(format!("manifest repeats video id {}", v.id)));
            }
            Ok(VideoInput {
                id: v.id,
                dir: base.join(v.path),
            })
        })
        .collect()
}

/// Parameters that determine cached features.
pub fn feature_params_hash(cfg: &RunConfig) -> String {
    canonical_hash(&serde_json::json!({
        "features": cfg.scoring.features,
        "max_dim": cfg.max_dim,
    }))
}

fn frame_features(
    file: &Path,
    frame: &Frame,
    cfg: &RunConfig,
    params: &str,
    cache: Option<&Mutex<FeatureCache>>,
) -> Result<FrameFeatures, IoError> {
    let Some(cache) = cache else {
        return Ok(extract_features(frame, &cfg.scoring.features)?);
    };
    let bytes = std::fs::read(file).map_err(|e| IoError::file(file, e))?;
    let key = sha256_hex(&bytes);
    if let Some(f) = cache.lock().unwrap().get(&key, params) {
        return Ok(f.clone());
    }
    let f = extract_features(frame, &cfg.scoring.features)?;
    cache.lock().unwrap().insert(key, params.to_string(), f.clone());
    Ok(f)
}

/// Score one video directory. With `from_correspondences`, matches come from
/// the directory's correspondence file instead of the feature pipeline;
/// frames are still read for the motion level and image size.
pub fn score_input(
    input: &VideoInput,
    cfg: &RunConfig,
    cache: Option<&Mutex<FeatureCache>>,
    from_correspondences: bool,
) -> Result<VideoScore, IoError> {
    let sc = &cfg.scoring;
    sc.validate()?;
    let files = io::frame_files(&input.dir)?;
    if files.is_empty() {
        return Err(IoError::Input(format!("{}: no PGM or PNG frames", input.dir.display())));
    }
    let max_dim = if from_correspondences { None } else { cfg.max_dim };
    let frames = files
        .par_iter()
        .map(|p| io::read_frame(p, max_dim))
        .collect::<Result<Vec<_>, _>>()?;
    if frames.len() < 2 {
        return Err(IoError::Input(format!("{}: need at least 2 frames", input.dir.display())));
    }
    let (w, h) = (frames[0].width(), frames[0].height());
    if let Some(k) = frames.iter().position(|f| f.width() != w || f.height() != h) {
        return Err(IoError::Input(format!("{}: frame size differs from first frame", files[k].display())));
    }
    let motion = motion_level(&frames)?;
    let pairs = frame_pairs(frames.len(), &sc.gaps, sc.stride)?;
    let diagonal = frames[0].diagonal();

    let scores: Vec<PairScore> = if from_correspondences {
        let path = input.dir.join(CORRESPONDENCES);
        let (_, records) = read_jsonl::<CorrespondenceRecord>(&path)?;
        let grouped = group_correspondences(&records);
        pairs
            .par_iter()
            .map(|&(i, j)| {
                let m = grouped.get(&(i, j)).map(Vec::as_slice).unwrap_or(&[]);
                score_correspondences(i, j, m, diagonal, sc)
            })
            .collect()
    } else {
        let needed: Vec<usize> = pairs.iter().flat_map(|&(i, j)| [i, j]).collect::<BTreeSet<_>>().into_iter().collect();
        let params = feature_params_hash(cfg);
        let features = needed
            .par_iter()
            .map(|&k| frame_features(&files[k], &frames[k], cfg, &params, cache).map(|f| (k, f)))
            .collect::<Result<std::collections::BTreeMap<_, _>, _>>()?;
        pairs
            .par_iter()
            .map(|&(i, j)| score_features(i, j, &features[&i], &features[&j], diagonal, sc))
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok(assemble_video_score(&input.id, Some(motion), scores, sc))
}
