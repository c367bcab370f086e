//! Command-line driver.
//!
//! Exit codes: 0 success, 1 fatal error, 2 partial result (some videos
//! flagged or unscored), 64 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use epigeo_core::alignment::{
    implicit_reward_margin, toy_pairs, toy_train, winner_clean_variance, Convention, LinearVelocityModel, NoiseSharing,
    PenaltyBranch, TrainConfig,
};
use epigeo_core::dataset::{build_pairs, rank_group, GenerationGroup, PreferencePair};
use epigeo_core::image::{ssim_with, SsimParams};
use epigeo_core::scoring::{frame_pairs, Aggregation, ErrorScope, VideoScore};
use epigeo_core::synth::{
    camera_trajectory, generate_scene, project_scene, render_video, DotStyle, Intrinsics, TrajectoryKind, TrajectorySpec,
};
use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::formats::{
    check_artifact, f64_17, json_document, json_line, pgm_comment, read_jsonl, video_score_line, with_header,
    CheckOutcome, CorrespondenceRecord, FeatureCache, Meta,
};
use crate::io::{self, IoError};
use crate::pipeline::{resolve_inputs, score_input, CORRESPONDENCES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FATAL: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Parser, Debug)]
#[command(name = "epigeo", version, about = "Epipolar consistency scoring and preference-pair tools")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Re-validate the config and content hashes embedded in artifacts.
    #[arg(long, value_name = "FILE", num_args = 1..)]
    check: Vec<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score frame directories and write VideoScore JSONL.
    Score(ScoreArgs),
    /// Rank scored videos within prompt groups.
    Rank(RankArgs),
    /// Build preference pairs from scored groups.
    Pairs(PairsArgs),
    /// Write a synthetic scene directory.
    Synth(SynthArgs),
    /// Train the linear Flow-DPO demonstrator.
    DpoDemo(DpoArgs),
    /// Mean SSIM between two frames.
    Ssim(SsimArgs),
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON run configuration; flags override it.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScoringFlags {
    /// Global RANSAC seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// RANSAC iterations [default: 2000].
    #[arg(long)]
    iterations: Option<usize>,
    /// RANSAC inlier threshold in px^2 [default: 1.0].
    #[arg(long)]
    threshold: Option<f64>,
    /// Frame gaps, comma separated [default: 4,8].
    #[arg(long, value_delimiter = ',')]
    gaps: Option<Vec<usize>>,
    /// Stride between pair start frames [default: 4].
    #[arg(long)]
    stride: Option<usize>,
    /// Aggregation over pairs [default: mean].
    #[arg(long, value_enum)]
    aggregation: Option<AggregationArg>,
    /// Trim fraction for `--aggregation trimmed-mean` [default: 0.1].
    #[arg(long)]
    trim_fraction: Option<f64>,
    /// Motion level above which a video is near-static [default: 0.9].
    #[arg(long)]
    static_threshold: Option<f64>,
    /// Report errors on diagonal-normalized coordinates [default: true].
    #[arg(long)]
    normalize_by_diagonal: Option<bool>,
    /// Minimum matches for a pair to be scored [default: 30].
    #[arg(long)]
    min_matches: Option<usize>,
    /// Correspondences entering the per-pair error [default: inliers].
    #[arg(long, value_enum)]
    error_scope: Option<ScopeArg>,
    /// Keypoints kept per frame [default: 2000].
    #[arg(long)]
    max_keypoints: Option<usize>,
    /// Downscale frames so no edge exceeds this [default: full resolution].
    #[arg(long)]
    max_dim: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AggregationArg {
    Mean,
    Median,
    TrimmedMean,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScopeArg {
    Inliers,
    AllMatches,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// Frame directory or JSON manifest of videos.
    input: PathBuf,
    /// Output file [default: stdout].
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Embed per-pair scores.
    #[arg(long)]
    per_pair: bool,
    /// Score the correspondences.jsonl of each video instead of detecting
    /// features.
    #[arg(long)]
    correspondences: bool,
    /// Keypoint cache file (JSONL), created if missing.
    #[arg(long, value_name = "FILE")]
    cache: Option<PathBuf>,
    /// Worker threads [default: EPIGEO_THREADS, else all cores].
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    scoring: ScoringFlags,
}

#[derive(Args, Debug)]
struct GroupInput {
    /// VideoScore JSONL files.
    #[arg(required = true)]
    scores: Vec<PathBuf>,
    /// Group manifest: JSON object mapping prompt id to video ids.
    #[arg(long, value_name = "FILE")]
    groups: PathBuf,
    /// Output file [default: stdout].
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RankArgs {
    #[command(flatten)]
    input: GroupInput,
}

#[derive(Args, Debug)]
struct PairsArgs {
    #[command(flatten)]
    input: GroupInput,
    /// Minimum score gap, exclusive [default: 0.05].
    #[arg(long)]
    tau: Option<f64>,
    /// Minimum winner score, exclusive [default: 0.5].
    #[arg(long)]
    eps: Option<f64>,
    /// Pairs per group; 1 keeps best vs worst only [default: 1].
    #[arg(long)]
    max_pairs_per_group: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Orbit,
    Dolly,
    Arc,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output scene directory.
    output: PathBuf,
    #[arg(long, value_enum, default_value = "orbit")]
    kind: KindArg,
    #[arg(long, default_value_t = 9)]
    frames: usize,
    /// Std-dev of Gaussian noise on projected points, px.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    #[arg(long, default_value_t = 200)]
    points: usize,
    /// Half-size of the cube holding the scene points.
    #[arg(long, default_value_t = 1.0)]
    extent: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Share of each pair's correspondences replaced by random points.
    #[arg(long, default_value_t = 0.0)]
    outliers: f64,
    /// Share of points moving with constant velocity.
    #[arg(long, default_value_t = 0.0)]
    dynamic: f64,
    /// Angle swept by orbit and arc trajectories, degrees [default: 360 for
    /// orbit, 30 for arc].
    #[arg(long)]
    sweep: Option<f64>,
    /// Camera distance from the origin.
    #[arg(long, default_value_t = 4.0)]
    radius: f64,
    /// Dot std-dev in px.
    #[arg(long, default_value_t = 2.5)]
    dot_sigma: f64,
    /// Amplitude of the smooth background texture.
    #[arg(long, default_value_t = 0.0)]
    texture: f64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ConventionArg {
    SelfConsistent,
    ReversedTime,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BranchArg {
    Winner,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NoiseArg {
    Independent,
    Shared,
}

#[derive(Args, Debug)]
struct DpoArgs {
    /// Output directory for trace.csv and params.json.
    #[arg(short, long, default_value = "dpo-demo")]
    output: PathBuf,
    /// PreferencePair JSONL; its score gaps set the toy pairs [default:
    /// gaps 0.3, 0.2, 0.4, 0.25].
    #[arg(long, value_name = "FILE")]
    pairs: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frames per latent clip.
    #[arg(long, default_value_t = 6)]
    frames: usize,
    /// Latent dims per frame.
    #[arg(long, default_value_t = 3)]
    dims: usize,
    /// Std-dev of the reference model parameters.
    #[arg(long, default_value_t = 0.1)]
    init_scale: f64,
    #[arg(long, value_enum, default_value = "independent")]
    noise: NoiseArg,
    /// DPO temperature [default: 1.0].
    #[arg(long)]
    beta: Option<f64>,
    /// Temporal penalty weight [default: 0.001].
    #[arg(long)]
    lambda: Option<f64>,
    /// Clean-sample reconstruction [default: self-consistent].
    #[arg(long, value_enum)]
    convention: Option<ConventionArg>,
    /// Branch seen by the temporal penalty [default: winner].
    #[arg(long, value_enum)]
    penalty_branch: Option<BranchArg>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct SsimArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, default_value_t = 11)]
    window: usize,
    #[arg(long, default_value_t = 1.5)]
    sigma: f64,
    #[arg(long, default_value_t = 0.01)]
    k1: f64,
    #[arg(long, default_value_t = 0.03)]
    k2: f64,
    /// Downscale both frames so no edge exceeds this.
    #[arg(long)]
    max_dim: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Core(#[from] epigeo_core::Error),
}

type CliResult<T = i32> = Result<T, CliError>;

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    if !cli.check.is_empty() {
        if cli.command.is_some() {
            eprintln!("error: --check cannot be combined with a subcommand");
            return EXIT_USAGE;
        }
        return check_files(&cli.check);
    }
    let result = match cli.command.expect("clap requires a subcommand or --check") {
        Command::Score(a) => cmd_score(a),
        Command::Rank(a) => cmd_rank(a),
        Command::Pairs(a) => cmd_pairs(a),
        Command::Synth(a) => cmd_synth(a),
        Command::DpoDemo(a) => cmd_dpo_demo(a),
        Command::Ssim(a) => cmd_ssim(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FATAL
        }
    }
}

fn check_files(files: &[PathBuf]) -> i32 {
    let mut code = EXIT_OK;
    for f in files {
        let outcome = match std::fs::read(f) {
            Ok(bytes) => check_artifact(&bytes),
            Err(e) => CheckOutcome::Invalid(e.to_string()),
        };
        match outcome {
            CheckOutcome::Valid { kind, config_hash } => println!("OK {} {kind} {config_hash}", f.display()),
            CheckOutcome::Invalid(why) => {
                println!("FAIL {} {why}", f.display());
                code = EXIT_FATAL;
            }
        }
    }
    code
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), IoError> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| IoError::file(dir, e))?;
            }
            std::fs::write(p, text).map_err(|e| IoError::file(p, e))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    std::fs::write(path, bytes).map_err(|e| IoError::file(path, e))
}

fn params(pairs: &[(&str, Value)]) -> Map<String, Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn apply_scoring(cfg: &mut RunConfig, f: &ScoringFlags) -> Result<(), IoError> {
    let s = &mut cfg.scoring;
    if let Some(v) = f.seed {
        s.ransac.seed = v;
    }
    if let Some(v) = f.iterations {
        s.ransac.iterations = v;
    }
    if let Some(v) = f.threshold {
        s.ransac.inlier_threshold = v;
    }
    if let Some(v) = &f.gaps {
        s.gaps = v.clone();
    }
    if let Some(v) = f.stride {
        s.stride = v;
    }
    let fraction = match s.aggregation {
        Aggregation::TrimmedMean { fraction } => fraction,
        _ => 0.1,
    };
    if let Some(v) = f.aggregation {
        s.aggregation = match v {
            AggregationArg::Mean => Aggregation::Mean,
            AggregationArg::Median => Aggregation::Median,
            AggregationArg::TrimmedMean => Aggregation::TrimmedMean { fraction },
        };
    }
    if let Some(v) = f.trim_fraction {
        match &mut s.aggregation {
            Aggregation::TrimmedMean { fraction } => *fraction = v,
            _ => return Err(IoError::Input("--trim-fraction needs --aggregation trimmed-mean".into())),
        }
    }
    if let Some(v) = f.static_threshold {
        s.static_threshold = v;
    }
    if let Some(v) = f.normalize_by_diagonal {
        s.normalize_by_diagonal = v;
    }
    if let Some(v) = f.min_matches {
        s.min_matches = v;
    }
    if let Some(v) = f.error_scope {
        s.error_scope = match v {
            ScopeArg::Inliers => ErrorScope::Inliers,
            ScopeArg::AllMatches => ErrorScope::AllMatches,
        };
    }
    if let Some(v) = f.max_keypoints {
        s.features.max_keypoints = v;
    }
    if f.max_dim.is_some() {
        cfg.max_dim = f.max_dim;
    }
    cfg.validate()
}

fn thread_count(flag: Option<usize>) -> Result<usize, IoError> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var("EPIGEO_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| IoError::Input(format!("EPIGEO_THREADS must be a count, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

fn cmd_score(a: ScoreArgs) -> CliResult {
    let mut cfg = RunConfig::load(a.config.config.as_deref())?;
    apply_scoring(&mut cfg, &a.scoring)?;
    let inputs = resolve_inputs(&a.input)?;
    let cache = match &a.cache {
        Some(p) => Some(Mutex::new(FeatureCache::load(p)?)),
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(a.threads)?)
        .build()
        .map_err(|e| IoError::Input(format!("thread pool: {e}")))?;
    let scores: Vec<VideoScore> = pool.install(|| {
        use rayon::prelude::*;
        inputs
            .par_iter()
            .map(|v| score_input(v, &cfg, cache.as_ref(), a.correspondences))
            .collect::<Result<Vec<_>, _>>()
    })?;
    if let (Some(c), Some(p)) = (cache, &a.cache) {
        c.into_inner().unwrap().save(p)?;
    }
    let meta = Meta::new(
        "video_scores",
        cfg.canonical(),
        params(&[
            ("per_pair", json!(a.per_pair)),
            ("source", json!(if a.correspondences { "correspondences" } else { "features" })),
        ]),
    );
    let lines: Vec<String> = scores.iter().map(|s| video_score_line(s, a.per_pair)).collect();
    write_output(a.output.as_deref(), &with_header(&meta, &lines))?;
    let partial = scores.iter().filter(|s| s.flags.any() || s.consistency_error.is_none()).count();
    if partial > 0 {
        eprintln!("{partial} of {} videos flagged or unscored", scores.len());
        return Ok(EXIT_PARTIAL);
    }
    Ok(EXIT_OK)
}

/// Video id to its score and the config hash of the file it came from.
type TaggedScores = BTreeMap<String, (VideoScore, String)>;

/// Scores from several files and the config of the first file.
fn load_scores(files: &[PathBuf]) -> Result<(TaggedScores, RunConfig), IoError> {
    let mut all = BTreeMap::new();
    let mut first_cfg = None;
    for f in files {
        let (meta, scores) = read_jsonl::<VideoScore>(f)?;
        let meta = meta.ok_or_else(|| IoError::Input(format!("{}: missing metadata header", f.display())))?;
        if first_cfg.is_none() {
            let cfg = serde_json::from_value(meta.config.clone())
                .map_err(|e| IoError::Input(format!("{}: header config: {e}", f.display())))?;
            first_cfg = Some(cfg);
        }
        for s in scores {
            let id = s.video_id.clone();
            if all.insert(id.clone(), (s, meta.config_hash.clone())).is_some() {
                return Err(IoError::Input(format!("video {id} appears in more than one score record")));
            }
        }
    }
    Ok((all, first_cfg.expect("at least one scores file")))
}

fn load_groups(a: &GroupInput) -> Result<(Vec<GenerationGroup>, RunConfig), CliError> {
    let (scores, cfg) = load_scores(&a.scores)?;
    let text = std::fs::read_to_string(&a.groups).map_err(|e| IoError::file(&a.groups, e))?;
    let manifest: BTreeMap<String, Vec<String>> =
        serde_json::from_str(&text).map_err(|e| IoError::Input(format!("{}: {e}", a.groups.display())))?;
    let mut groups = Vec::new();
    for (prompt, ids) in manifest {
        let mut members = Vec::new();
        let mut hash = None;
        for id in &ids {
            let (s, h) = scores
                .get(id)
                .ok_or_else(|| IoError::Input(format!("group {prompt}: no score for video {id}")))?;
            if hash.get_or_insert(h) != &h {
                return Err(IoError::Input(format!("group {prompt} mixes scoring configs")).into());
            }
            members.push(s.clone());
        }
        groups.push(GenerationGroup::new(prompt, hash.cloned().unwrap_or_default(), members)?);
    }
    if let Some(g) = groups.iter().find(|g| g.config_hash != groups[0].config_hash) {
        return Err(IoError::Input(format!("group {} was scored under a different config", g.prompt_id)).into());
    }
    Ok((groups, cfg))
}

fn cmd_rank(a: RankArgs) -> CliResult {
    let (groups, cfg) = load_groups(&a.input)?;
    let mut lines = Vec::new();
    for g in &groups {
        let record = match rank_group(g) {
            Ok(r) => json!({
                "prompt_id": g.prompt_id,
                "ranking": r.iter().map(|v| json!({"video_id": v.video_id, "consistency_score": v.consistency_score})).collect::<Vec<_>>(),
                "skipped": Value::Null,
            }),
            Err(reason) => json!({"prompt_id": g.prompt_id, "ranking": [], "skipped": reason}),
        };
        lines.push(json_line(&record));
    }
    let meta = Meta::new("rankings", cfg.canonical(), params(&[("score_config_hash", json!(groups.first().map(|g| &g.config_hash)))]));
    write_output(a.input.output.as_deref(), &with_header(&meta, &lines))?;
    Ok(EXIT_OK)
}

fn cmd_pairs(a: PairsArgs) -> CliResult {
    let (groups, mut cfg) = load_groups(&a.input)?;
    if let Some(p) = &a.config.config {
        cfg.pairs = RunConfig::load(Some(p))?.pairs;
    }
    if let Some(v) = a.tau {
        cfg.pairs.tau = v;
    }
    if let Some(v) = a.eps {
        cfg.pairs.epsilon = v;
    }
    if let Some(v) = a.max_pairs_per_group {
        cfg.pairs.max_pairs_per_group = v;
    }
    cfg.validate()?;
    let outcomes = build_pairs(&groups, &cfg.pairs)?;
    let pairs: Vec<&PreferencePair> = outcomes.iter().flat_map(|o| &o.pairs).collect();
    let skipped: Vec<Value> = outcomes
        .iter()
        .filter_map(|o| o.skipped.map(|r| json!({"prompt_id": o.prompt_id, "reason": r})))
        .collect();
    let meta = Meta::new(
        "preference_pairs",
        cfg.canonical(),
        params(&[
            ("score_config_hash", json!(groups.first().map(|g| &g.config_hash))),
            ("tau", json!(cfg.pairs.tau)),
            ("epsilon", json!(cfg.pairs.epsilon)),
            ("max_pairs_per_group", json!(cfg.pairs.max_pairs_per_group)),
            ("groups", json!(groups.len())),
            ("skipped", Value::Array(skipped)),
        ]),
    );
    let lines: Vec<String> = pairs.iter().map(json_line).collect();
    write_output(a.input.output.as_deref(), &with_header(&meta, &lines))?;
    Ok(EXIT_OK)
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let cfg = RunConfig::load(a.config.config.as_deref())?;
    let kind = match a.kind {
        KindArg::Orbit => TrajectoryKind::Orbit,
        KindArg::Dolly => TrajectoryKind::Dolly,
        KindArg::Arc => TrajectoryKind::Arc,
    };
    let mut spec = TrajectorySpec::new(kind, a.frames);
    spec.jitter_sigma = a.jitter;
    spec.outlier_fraction = a.outliers;
    spec.dynamic_fraction = a.dynamic;
    spec.radius = a.radius;
    spec.seed = a.seed;
    if let Some(s) = a.sweep {
        spec.sweep_degrees = s;
    }
    let style = DotStyle {
        dot_sigma: a.dot_sigma,
        intensity_seed: a.seed,
        texture_amplitude: a.texture,
    };
    let scene = generate_scene(a.points, a.extent, a.seed)?;
    let cameras = camera_trajectory(&spec)?;
    let projected = project_scene(&scene, &cameras, &spec)?;
    let frames = render_video(&projected, &style)?;

    let meta = Meta::new(
        "synthetic_scene",
        cfg.canonical(),
        params(&[
            ("trajectory", serde_json::to_value(spec).unwrap()),
            ("dots", serde_json::to_value(style).unwrap()),
            ("points", json!(a.points)),
            ("extent", json!(a.extent)),
        ]),
    );
    let out = &a.output;
    std::fs::create_dir_all(out).map_err(|e| IoError::file(out, e))?;
    for (k, f) in frames.iter().enumerate() {
        let pixels: Vec<u8> = f.pixels().iter().map(|p| (p * 255.0).round() as u8).collect();
        let bytes = io::encode_pgm(f, &[pgm_comment(&meta, &pixels)]);
        write_file(&out.join(format!("frame_{k:03}.pgm")), &bytes)?;
    }
    let cams: Vec<Value> = cameras
        .iter()
        .map(|c| {
            let p = c.projection();
            json!({
                "k": rows(&c.k),
                "r": rows(&c.r),
                "t": [c.t[0], c.t[1], c.t[2]],
                "projection": (0..3).map(|i| (0..4).map(|j| p[(i, j)]).collect::<Vec<_>>()).collect::<Vec<_>>(),
            })
        })
        .collect();
    let intr: Intrinsics = spec.intrinsics;
    write_file(&out.join("cameras.json"), json_document(&meta, &json!({"intrinsics": intr, "cameras": cams})).as_bytes())?;
    let labels = json!({
        "point_labels": projected.point_labels,
        "outlier_fraction": spec.outlier_fraction,
        "points": scene.points.iter().map(|p| [p[0], p[1], p[2]]).collect::<Vec<_>>(),
    });
    write_file(&out.join("labels.json"), json_document(&meta, &labels).as_bytes())?;
    let mut lines = Vec::new();
    for (i, j) in frame_pairs(a.frames, &cfg.scoring.gaps, cfg.scoring.stride)? {
        for lc in projected.correspondences(i, j) {
            let c = lc.correspondence;
            lines.push(json_line(&CorrespondenceRecord {
                i: Some(i),
                j: Some(j),
                x: c.x[0],
                y: c.x[1],
                xp: c.x_prime[0],
                yp: c.x_prime[1],
                point: Some(lc.point),
                label: Some(lc.label),
            }));
        }
    }
    write_file(&out.join(CORRESPONDENCES), with_header(&meta, &lines).as_bytes())?;
    Ok(EXIT_OK)
}

fn rows(m: &impl std::ops::Index<(usize, usize), Output = f64>) -> Vec<[f64; 3]> {
    (0..3).map(|i| [m[(i, 0)], m[(i, 1)], m[(i, 2)]]).collect()
}

fn cmd_dpo_demo(a: DpoArgs) -> CliResult {
    let mut cfg = RunConfig::load(a.config.config.as_deref())?;
    let loss = &mut cfg.alignment;
    if let Some(v) = a.beta {
        loss.beta = v;
    }
    if let Some(v) = a.lambda {
        loss.lambda = v;
    }
    if let Some(v) = a.convention {
        loss.convention = match v {
            ConventionArg::SelfConsistent => Convention::SelfConsistent,
            ConventionArg::ReversedTime => Convention::ReversedTime,
        };
    }
    if let Some(v) = a.penalty_branch {
        loss.branch = match v {
            BranchArg::Winner => PenaltyBranch::Winner,
            BranchArg::Both => PenaltyBranch::Both,
        };
    }
    let gaps: Vec<f64> = match &a.pairs {
        Some(p) => {
            let (_, pairs) = read_jsonl::<PreferencePair>(p)?;
            if pairs.is_empty() {
                return Err(IoError::Input(format!("{}: no preference pairs", p.display())).into());
            }
            pairs.iter().map(|p| p.score_gap).collect()
        }
        None => vec![0.3, 0.2, 0.4, 0.25],
    };
    let sharing = match a.noise {
        NoiseArg::Independent => NoiseSharing::Independent,
        NoiseArg::Shared => NoiseSharing::Shared,
    };
    let items = toy_pairs(&gaps, a.frames, a.dims, sharing, a.seed)?;
    let reference = LinearVelocityModel::random(a.dims, a.init_scale, a.seed);
    let train = TrainConfig {
        steps: a.steps,
        learning_rate: a.lr,
        loss: cfg.alignment,
        init_noise: 0.0,
        seed: a.seed,
    };
    let meta = Meta::new(
        "dpo_demo",
        cfg.canonical(),
        params(&[
            ("steps", json!(a.steps)),
            ("lr", json!(a.lr)),
            ("seed", json!(a.seed)),
            ("frames", json!(a.frames)),
            ("dims", json!(a.dims)),
            ("init_scale", json!(a.init_scale)),
            ("noise", serde_json::to_value(sharing).unwrap()),
            ("gaps", json!(gaps)),
        ]),
    );
    std::fs::create_dir_all(&a.output).map_err(|e| IoError::file(&a.output, e))?;
    let trace_lines = |trace: &[f64]| -> Vec<String> {
        std::iter::once("step,loss".to_string())
            .chain(trace.iter().enumerate().map(|(k, l)| format!("{k},{}", f64_17(*l))))
            .collect()
    };
    let trace_path = a.output.join("trace.csv");
    let result = match toy_train(&items, &reference, &train) {
        Ok(r) => r,
        Err(epigeo_core::Error::Diverged { step, loss, trace }) => {
            write_file(&trace_path, with_header(&meta, &trace_lines(&trace)).as_bytes())?;
            eprintln!("error: training diverged at step {step} (loss {loss})");
            return Ok(EXIT_FATAL);
        }
        Err(e) => return Err(e.into()),
    };
    write_file(&trace_path, with_header(&meta, &trace_lines(&result.trace)).as_bytes())?;
    let beta = cfg.alignment.beta;
    let conv = cfg.alignment.convention;
    let dims = a.dims;
    let model = &result.model;
    let summary = json!({
        "dims": dims,
        "weight": (0..dims).map(|r| (0..dims).map(|c| model.weight(r, c)).collect::<Vec<_>>()).collect::<Vec<_>>(),
        "time_bias": (0..dims).map(|d| model.time_bias(d)).collect::<Vec<_>>(),
        "bias": (0..dims).map(|d| model.bias(d)).collect::<Vec<_>>(),
        "margin_initial": implicit_reward_margin(&items, &reference, &reference, beta)?,
        "margin_final": implicit_reward_margin(&items, model, &reference, beta)?,
        "winner_variance_initial": winner_clean_variance(&items, &reference, conv)?,
        "winner_variance_final": winner_clean_variance(&items, model, conv)?,
        "loss_initial": result.trace[0],
        "loss_final": result.trace[result.trace.len() - 1],
    });
    write_file(&a.output.join("params.json"), json_document(&meta, &summary).as_bytes())?;
    Ok(EXIT_OK)
}

fn cmd_ssim(a: SsimArgs) -> CliResult {
    let fa = io::read_frame(&a.a, a.max_dim)?;
    let fb = io::read_frame(&a.b, a.max_dim)?;
    let p = SsimParams {
        window: a.window,
        sigma: a.sigma,
        k1: a.k1,
        k2: a.k2,
        ..SsimParams::default()
    };
    println!("{}", f64_17(ssim_with(&fa, &fb, &p)?));
    Ok(EXIT_OK)
}
