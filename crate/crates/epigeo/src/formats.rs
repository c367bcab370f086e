//! Artifact formats: metadata headers, JSONL records and the keypoint cache.
//!
//! Text artifacts start with one `# {json}` line holding [`Meta`]; JSON
//! artifacts are `{"meta": ..., "data": ...}`; PGM frames carry the metadata
//! in a header comment. `content_sha256` covers the body (the lines after the
//! header, the canonical `data` value, or the raw pixel bytes).

use std::collections::BTreeMap;
use std::path::Path;

use epigeo_core::epipolar::Correspondence;
use epigeo_core::features::FrameFeatures;
use epigeo_core::scoring::{PairScore, PairStatus, VideoScore};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::config::canonical_hash;
use crate::io::IoError;

pub const TOOL: &str = "epigeo";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
const PGM_TAG: &str = "epigeo-meta ";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    /// What the artifact holds, e.g. `video_scores`.
    pub kind: String,
    pub config_hash: String,
    /// Canonical form of the run configuration behind `config_hash`.
    pub config: Value,
    /// Subcommand parameters that are not part of the run configuration.
    #[serde(default)]
    pub params: Map<String, Value>,
    #[serde(default)]
    pub content_sha256: String,
}

impl Meta {
    pub fn new(kind: &str, config: Value, params: Map<String, Value>) -> Self {
        Self {
            tool: TOOL.into(),
            version: VERSION.into(),
            kind: kind.into(),
            config_hash: canonical_hash(&config),
            config,
            params,
            content_sha256: String::new(),
        }
    }
}

/// Header line plus body lines, each newline-terminated.
pub fn with_header(meta: &Meta, lines: &[String]) -> String {
    let mut body = String::new();
    for l in lines {
        body.push_str(l);
        body.push('\n');
    }
    let meta = Meta {
        content_sha256: sha256_hex(body.as_bytes()),
        ..meta.clone()
    };
    format!("# {}\n{body}", serde_json::to_string(&meta).expect("meta serializes"))
}

pub fn json_line<T: Serialize>(record: &T) -> String {
    serde_json::to_string(record).expect("record serializes")
}

/// Split a headered text artifact. Files without a header yield `None`.
pub fn split_header(text: &str) -> Result<(Option<Meta>, &str), IoError> {
    let Some(rest) = text.strip_prefix('#') else {
        return Ok((None, text));
    };
    let (line, body) = rest.split_once('\n').unwrap_or((rest, ""));
    let meta = serde_json::from_str(line.trim()).map_err(|e| IoError::Input(format!("bad header line: {e}")))?;
    Ok((Some(meta), body))
}

/// Records of a JSONL file, skipping `#` lines and blank lines.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Option<Meta>, Vec<T>), IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
    let (meta, body) = split_header(&text)?;
    let mut out = Vec::new();
    for (k, line) in body.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let n = k + 1 + usize::from(meta.is_some());
        out.push(
            serde_json::from_str(line)
                .map_err(|e| IoError::Input(format!("{}:{n}: {e}", path.display())))?,
        );
    }
    Ok((meta, out))
}

/// JSON artifact wrapping `data` together with its metadata.
pub fn json_document<T: Serialize>(meta: &Meta, data: &T) -> String {
    let data = serde_json::to_value(data).expect("data serializes");
    let meta = Meta {
        content_sha256: sha256_hex(serde_json::to_string(&data).unwrap().as_bytes()),
        ..meta.clone()
    };
    let doc = serde_json::json!({ "meta": meta, "data": data });
    let mut s = serde_json::to_string_pretty(&doc).unwrap();
    s.push('\n');
    s
}

/// PGM header comment carrying the metadata of a frame. The content hash
/// covers the pixel bytes.
pub fn pgm_comment(meta: &Meta, pixels: &[u8]) -> String {
    let meta = Meta {
        content_sha256: sha256_hex(pixels),
        ..meta.clone()
    };
    format!("{PGM_TAG}{}", serde_json::to_string(&meta).unwrap())
}

/// Result of re-validating one artifact.
#[derive(Debug, Clone, PartialEq)]
pub enum CheckOutcome {
    Valid { kind: String, config_hash: String },
    Invalid(String),
}

fn check_meta(meta: &Meta, body_hash: String) -> CheckOutcome {
    if meta.tool != TOOL {
        return CheckOutcome::Invalid(format!("written by {}, not {TOOL}", meta.tool));
    }
    let recomputed = canonical_hash(&meta.config);
    if recomputed != meta.config_hash {
        return CheckOutcome::Invalid(format!("config_hash {} does not match config ({recomputed})", meta.config_hash));
    }
    if body_hash != meta.content_sha256 {
        return CheckOutcome::Invalid(format!("content_sha256 {} does not match content ({body_hash})", meta.content_sha256));
    }
    CheckOutcome::Valid {
        kind: meta.kind.clone(),
        config_hash: meta.config_hash.clone(),
    }
}

/// Re-validate the embedded hashes of an artifact written by this tool.
pub fn check_artifact(bytes: &[u8]) -> CheckOutcome {
    if bytes.starts_with(b"P5") {
        return check_pgm(bytes);
    }
    let Ok(text) = std::str::from_utf8(bytes) else {
        return CheckOutcome::Invalid("not UTF-8 text or PGM".into());
    };
    if text.starts_with('#') {
        return match split_header(text) {
            Ok((Some(meta), body)) => check_meta(&meta, sha256_hex(body.as_bytes())),
            Ok((None, _)) => unreachable!(),
            Err(e) => CheckOutcome::Invalid(e.to_string()),
        };
    }
    let doc: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(_) => return CheckOutcome::Invalid("no metadata header".into()),
    };
    let (Some(meta), Some(data)) = (doc.get("meta"), doc.get("data")) else {
        return CheckOutcome::Invalid("JSON document lacks meta/data".into());
    };
    match serde_json::from_value::<Meta>(meta.clone()) {
        Ok(meta) => check_meta(&meta, sha256_hex(serde_json::to_string(data).unwrap().as_bytes())),
        Err(e) => CheckOutcome::Invalid(format!("bad meta: {e}")),
    }
}

fn check_pgm(bytes: &[u8]) -> CheckOutcome {
    let comments = match crate::io::pgm_comments(bytes) {
        Ok(c) => c,
        Err(e) => return CheckOutcome::Invalid(e.to_string()),
    };
    let Some(json) = comments.iter().find_map(|c| c.strip_prefix(PGM_TAG)) else {
        return CheckOutcome::Invalid("PGM has no metadata comment".into());
    };
    let meta: Meta = match serde_json::from_str(json) {
        Ok(m) => m,
        Err(e) => return CheckOutcome::Invalid(format!("bad meta: {e}")),
    };
    let gray = match crate::io::decode_frame(bytes, crate::io::ImageFormat::Pgm) {
        Ok(g) => g,
        Err(e) => return CheckOutcome::Invalid(e.to_string()),
    };
    let n = gray.width * gray.height;
    check_meta(&meta, sha256_hex(&bytes[bytes.len() - n..]))
}

/// 17 significant digits, enough to round-trip any f64.
pub fn f64_17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Fundamental matrix as a JSON array of 9 numbers with 17 significant digits.
pub fn fundamental_json(f: &[f64; 9]) -> Box<RawValue> {
    let items: Vec<String> = f.iter().map(|v| f64_17(*v)).collect();
    RawValue::from_string(format!("[{}]", items.join(","))).expect("valid JSON numbers")
}

#[derive(Serialize)]
struct PairOut {
    frame_i: usize,
    frame_j: usize,
    n_matches: usize,
    n_inliers: usize,
    mean_inlier_sampson: Option<f64>,
    median_inlier_sampson: Option<f64>,
    status: PairStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    fundamental: Option<Box<RawValue>>,
}

#[derive(Serialize)]
struct VideoOut<'a> {
    video_id: &'a str,
    consistency_error: Option<f64>,
    consistency_score: Option<f64>,
    motion_level: Option<f64>,
    n_valid_pairs: usize,
    flags: &'a epigeo_core::scoring::VideoFlags,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pairs: Vec<PairOut>,
}

fn pair_out(p: &PairScore) -> PairOut {
    PairOut {
        frame_i: p.frame_i,
        frame_j: p.frame_j,
        n_matches: p.n_matches,
        n_inliers: p.n_inliers,
        mean_inlier_sampson: p.mean_inlier_sampson,
        median_inlier_sampson: p.median_inlier_sampson,
        status: p.status,
        fundamental: p.fundamental.as_ref().map(fundamental_json),
    }
}

/// One VideoScore JSONL line. Per-pair records are kept only when
/// `per_pair` is set.
pub fn video_score_line(v: &VideoScore, per_pair: bool) -> String {
    let out = VideoOut {
        video_id: &v.video_id,
        consistency_error: v.consistency_error,
        consistency_score: v.consistency_score,
        motion_level: v.motion_level,
        n_valid_pairs: v.n_valid_pairs,
        flags: &v.flags,
        pairs: if per_pair { v.pairs.iter().map(pair_out).collect() } else { Vec::new() },
    };
    json_line(&out)
}

/// Correspondence record. `i` and `j` name the frame pair when one file
/// holds several pairs; synthetic scenes also record the world point and its
/// label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub j: Option<usize>,
    pub x: f64,
    pub y: f64,
    pub xp: f64,
    pub yp: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<epigeo_core::synth::PointLabel>,
}

impl CorrespondenceRecord {
    pub fn correspondence(&self) -> Correspondence {
        Correspondence::new([self.x, self.y], [self.xp, self.yp])
    }
}

/// Correspondences grouped by frame pair. Records without a pair go to
/// `(0, 1)`.
pub fn group_correspondences(records: &[CorrespondenceRecord]) -> BTreeMap<(usize, usize), Vec<Correspondence>> {
    let mut out: BTreeMap<(usize, usize), Vec<Correspondence>> = BTreeMap::new();
    for r in records {
        out.entry((r.i.unwrap_or(0), r.j.unwrap_or(1))).or_default().push(r.correspondence());
    }
    out
}

/// Keypoint cache entry: features of one frame file under one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub frame_sha256: String,
    pub params_sha256: String,
    pub features: FrameFeatures,
}

/// Keypoint cache held as a JSONL sidecar, one frame per line.
#[derive(Debug, Default)]
pub struct FeatureCache {
    entries: BTreeMap<(String, String), FrameFeatures>,
    dirty: bool,
}

impl FeatureCache {
    pub fn load(path: &Path) -> Result<Self, IoError> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let (_, records) = read_jsonl::<CacheEntry>(path)?;
        Ok(Self {
            entries: records
                .into_iter()
                .map(|e| ((e.frame_sha256, e.params_sha256), e.features))
                .collect(),
            dirty: false,
        })
    }

    pub fn get(&self, frame: &str, params: &str) -> Option<&FrameFeatures> {
        self.entries.get(&(frame.to_string(), params.to_string()))
    }

    pub fn insert(&mut self, frame: String, params: String, features: FrameFeatures) {
        self.entries.insert((frame, params), features);
        self.dirty = true;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Rewrite the sidecar if anything was added. Entries are written in key
    /// order.
    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        if !self.dirty {
            return Ok(());
        }
        let mut text = String::new();
        for ((frame, params), features) in &self.entries {
            text.push_str(&json_line(&CacheEntry {
                frame_sha256: frame.clone(),
                params_sha256: params.clone(),
                features: features.clone(),
            }));
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| IoError::file(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use epigeo_core::scoring::VideoFlags;

    fn meta() -> Meta {
        Meta::new("test", serde_json::json!({"b": 1, "a": [0.5]}), Map::new())
    }

    #[test]
    fn f64_17_roundtrips() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, 0.0, -2.5] {
            let s = f64_17(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
            let mantissa = s.split('e').next().unwrap().trim_start_matches('-').replace('.', "");
            assert_eq!(mantissa.len(), 17);
        }
    }

    #[test]
    fn video_line_roundtrips() {
        let pair = PairScore {
            frame_i: 0,
            frame_j: 4,
            n_matches: 50,
            n_inliers: 48,
            mean_inlier_sampson: Some(0.1),
            median_inlier_sampson: Some(0.05),
            status: PairStatus::Ok,
            fundamental: Some([1.0 / 3.0, -2.0, 1e-9, 0.0, 5.5, -1e-12, 7.0, 8.0, 0.25]),
        };
        let v = VideoScore {
            video_id: "v\"1".into(),
            consistency_error: Some(0.25),
            consistency_score: Some(0.8),
            motion_level: None,
            n_valid_pairs: 1,
            flags: VideoFlags::default(),
            pairs: vec![pair],
        };
        let line = video_score_line(&v, true);
        assert!(line.contains("3.3333333333333331e-1"));
        assert_eq!(serde_json::from_str::<VideoScore>(&line).unwrap(), v);
        let bare: VideoScore = serde_json::from_str(&video_score_line(&v, false)).unwrap();
        assert!(bare.pairs.is_empty());
        assert_eq!(serde_json::to_string(&bare).unwrap(), video_score_line(&v, false));
    }

    #[test]
    fn headers_check_out() {
        let text = with_header(&meta(), &["{\"a\":1}".into(), "{\"a\":2}".into()]);
        assert!(matches!(check_artifact(text.as_bytes()), CheckOutcome::Valid { .. }));
        let tampered = text.replace("\"a\":2", "\"a\":3");
        assert!(matches!(check_artifact(tampered.as_bytes()), CheckOutcome::Invalid(_)));
        let (m, body) = split_header(&text).unwrap();
        assert_eq!(m.unwrap().kind, "test");
        assert_eq!(body.lines().count(), 2);

        let mut forged = meta();
        forged.config = serde_json::json!({"b": 2});
        let text = with_header(&forged, &[]);
        assert!(matches!(check_artifact(text.as_bytes()), CheckOutcome::Invalid(_)));
    }

    #[test]
    fn documents_check_out() {
        let doc = json_document(&meta(), &vec![1.5, 2.5]);
        assert!(matches!(check_artifact(doc.as_bytes()), CheckOutcome::Valid { .. }));
        let bad = doc.replace("2.5", "2.75");
        assert!(matches!(check_artifact(bad.as_bytes()), CheckOutcome::Invalid(_)));
        assert!(matches!(check_artifact(b"{\"x\": 1}"), CheckOutcome::Invalid(_)));
    }

    #[test]
    fn pgm_frames_check_out() {
        let frame = epigeo_core::image::Frame::constant(16, 16, 0.5).unwrap();
        let pixels: Vec<u8> = frame.pixels().iter().map(|p| (p * 255.0).round() as u8).collect();
        let bytes = crate::io::encode_pgm(&frame, &[pgm_comment(&meta(), &pixels)]);
        assert!(matches!(check_artifact(&bytes), CheckOutcome::Valid { .. }));
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(matches!(check_artifact(&flipped), CheckOutcome::Invalid(_)));
    }

    #[test]
    fn correspondences_group_by_pair() {
        let lines = "{\"x\":1,\"y\":2,\"xp\":3,\"yp\":4}\n{\"i\":2,\"j\":5,\"x\":0,\"y\":0,\"xp\":1,\"yp\":1,\"label\":\"outlier\"}\n";
        let recs: Vec<CorrespondenceRecord> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        let g = group_correspondences(&recs);
        assert_eq!(g.keys().copied().collect::<Vec<_>>(), [(0, 1), (2, 5)]);
        assert_eq!(g[&(0, 1)][0].x_prime, [3.0, 4.0]);
    }
}
