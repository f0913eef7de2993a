//! Synthetic multi-camera scenes: ground-truth trajectories, per-camera noisy
//! detections with dropout and duplicates, and identity features.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::Box3D;
use crate::geometry::{wrap_angle, CameraRig, Vec3};
use crate::graph::Detection;
use crate::gtn::default_classes;
use crate::jsonl::{self, JsonlError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("handoff needs an adjacent camera pair: {0}")]
    Handoff(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    ConstantVelocity,
    Turning,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Per-axis center standard deviation, meters.
    pub center: f64,
    pub yaw: f64,
    /// Relative size standard deviation.
    pub size: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            center: 0.1,
            yaw: 0.05,
            size: 0.02,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            center: 0.0,
            yaw: 0.0,
            size: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Camera rig; the default six-camera ring when absent.
    pub rig: Option<CameraRig>,
    pub n_objects: usize,
    pub n_frames: usize,
    pub dt: f64,
    pub motion: MotionKind,
    pub noise: NoiseConfig,
    pub dropout_per_camera: f64,
    /// Restrict dropout to objects currently seen by at least two cameras.
    pub dropout_overlap_only: bool,
    pub duplicate_rate: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
    pub seed: u64,
    /// Objects farther than this from a camera are not detected by it.
    pub max_range: f64,
    pub start_radius: (f64, f64),
    pub speed: (f64, f64),
    /// Yaw-rate magnitude range for turning motion, rad/s.
    pub turn_rate: (f64, f64),
    pub classes: Vec<String>,
    /// Replace object 0 with a track that crosses two adjacent cameras.
    pub handoff: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            rig: None,
            n_objects: 10,
            n_frames: 100,
            dt: 0.5,
            motion: MotionKind::ConstantVelocity,
            noise: NoiseConfig::default(),
            dropout_per_camera: 0.0,
            dropout_overlap_only: false,
            duplicate_rate: 0.0,
            feature_dim: 64,
            feature_noise: 0.1,
            seed: 0,
            max_range: 55.0,
            start_radius: (10.0, 30.0),
            speed: (0.5, 1.5),
            turn_rate: (0.1, 0.3),
            classes: default_classes(),
            handoff: false,
        }
    }
}

impl ScenarioConfig {
    pub fn rig(&self) -> CameraRig {
        self.rig.clone().unwrap_or_else(CameraRig::default_ring)
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("dropout_per_camera", self.dropout_per_camera),
            ("duplicate_rate", self.duplicate_rate),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(SimError::Config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        let sigmas = [self.noise.center, self.noise.yaw, self.noise.size, self.feature_noise];
        if sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(SimError::Config("noise levels must be nonnegative".into()));
        }
        if !(self.dt > 0.0) {
            return Err(SimError::Config("dt must be positive".into()));
        }
        if self.feature_dim == 0 || self.classes.is_empty() {
            return Err(SimError::Config("feature_dim and classes must be non-empty".into()));
        }
        if self.start_radius.0 > self.start_radius.1 || self.speed.0 > self.speed.1 || self.turn_rate.0 > self.turn_rate.1 {
            return Err(SimError::Config("ranges must be ordered (low, high)".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn class_size(class: &str) -> [f64; 3] {
    match class {
        "pedestrian" => [0.7, 0.7, 1.8],
        "bicycle" => [0.6, 1.8, 1.2],
        _ => [1.9, 4.5, 1.6],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub frame: u64,
    pub center: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTrack {
    pub track_id: u64,
    pub class: String,
    pub size: [f64; 3],
    /// One state per frame, contiguous from frame 0.
    pub states: Vec<ObjectState>,
}

impl GroundTruthTrack {
    pub fn box_at(&self, frame: u64) -> Option<Box3D> {
        self.states
            .get(frame as usize)
            .map(|s| Box3D::new(Vec3::from(s.center), self.size, s.yaw))
    }
}

/// One ground-truth row: a box as seen by one camera in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub frame: u64,
    pub camera: String,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: String,
    pub track_id: u64,
    pub velocity: [f64; 3],
}

impl GtRecord {
    pub fn as_box(&self) -> Box3D {
        Box3D::new(Vec3::from(self.center), self.size, self.yaw)
    }
}

/// Provenance of an emitted detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionLabel {
    pub track_id: u64,
    pub duplicate: bool,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub rig: CameraRig,
    pub tracks: Vec<GroundTruthTrack>,
    pub gt: Vec<GtRecord>,
    pub detections: Vec<Detection>,
    /// Parallel to `detections`.
    pub labels: Vec<DetectionLabel>,
    /// Noise-free identity feature per track id.
    pub base_features: BTreeMap<u64, Vec<f64>>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn noisy_feature(rng: &mut ChaCha8Rng, base: &[f64], sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return base.to_vec();
    }
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    base.iter().map(|b| b + n.sample(rng)).collect()
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sigma).expect("finite sigma").sample(rng)
    }
}

fn simulate_track(
    rng: &mut ChaCha8Rng,
    cfg: &ScenarioConfig,
    track_id: u64,
    class: String,
    start: Vec3,
    velocity: Vec3,
    yaw_rate: f64,
) -> GroundTruthTrack {
    let size = class_size(&class);
    let jitter = 1.0 + rng.random_range(-0.1..0.1);
    let size = size.map(|s| s * jitter);
    let (mut p, mut v) = (Vec3::new(start.x, start.y, size[2] / 2.0), velocity);
    let mut states = Vec::with_capacity(cfg.n_frames);
    for frame in 0..cfg.n_frames as u64 {
        states.push(ObjectState {
            frame,
            center: [p.x, p.y, p.z],
            yaw: v.y.atan2(v.x),
            velocity: [v.x, v.y, v.z],
        });
        p += v * cfg.dt;
        if yaw_rate != 0.0 {
            let (s, c) = (yaw_rate * cfg.dt).sin_cos();
            v = Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z);
        }
    }
    GroundTruthTrack {
        track_id,
        class,
        size,
        states,
    }
}

/// Objects start on a ring around the rig and move roughly tangentially.
fn random_tracks(rng: &mut ChaCha8Rng, cfg: &ScenarioConfig) -> Vec<GroundTruthTrack> {
    (0..cfg.n_objects as u64)
        .map(|id| {
            let class = cfg.classes[rng.random_range(0..cfg.classes.len())].clone();
            let phi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let r = rng.random_range(cfg.start_radius.0..=cfg.start_radius.1);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let heading = phi + side * std::f64::consts::FRAC_PI_2 + rng.random_range(-0.5236..0.5236);
            let speed = rng.random_range(cfg.speed.0..=cfg.speed.1);
            let yaw_rate = match cfg.motion {
                MotionKind::ConstantVelocity => 0.0,
                MotionKind::Turning => {
                    let m = rng.random_range(cfg.turn_rate.0..=cfg.turn_rate.1);
                    if rng.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                }
            };
            let start = Vec3::new(r * phi.cos(), r * phi.sin(), 0.0);
            let velocity = Vec3::new(speed * heading.cos(), speed * heading.sin(), 0.0);
            simulate_track(rng, cfg, id, class, start, velocity, yaw_rate)
        })
        .collect()
}

fn visible(rig: &CameraRig, camera: &str, p: &Vec3, max_range: f64) -> bool {
    let cam = rig.camera(camera).expect("rig camera");
    cam.project(p).is_some() && (p - cam.extrinsics.translation()).norm() <= max_range
}

/// Cameras that see each track at each frame, in rig order.
pub fn visibility(rig: &CameraRig, tracks: &[GroundTruthTrack], max_range: f64) -> BTreeMap<(u64, u64), Vec<String>> {
    let mut out = BTreeMap::new();
    for t in tracks {
        for s in &t.states {
            let p = Vec3::from(s.center);
            let cams: Vec<String> = rig
                .cameras()
                .iter()
                .filter(|c| visible(rig, &c.id, &p, max_range))
                .map(|c| c.id.clone())
                .collect();
            out.insert((s.frame, t.track_id), cams);
        }
    }
    out
}

fn emit(cfg: &ScenarioConfig, rig: &CameraRig, tracks: Vec<GroundTruthTrack>, rng: &mut ChaCha8Rng) -> Scenario {
    let base_features: BTreeMap<u64, Vec<f64>> =
        tracks.iter().map(|t| (t.track_id, unit_vector(rng, cfg.feature_dim))).collect();
    let vis = visibility(rig, &tracks, cfg.max_range);
    let mut cameras: Vec<&str> = rig.cameras().iter().map(|c| c.id.as_str()).collect();
    cameras.sort_unstable();

    let (mut gt, mut detections, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for frame in 0..cfg.n_frames as u64 {
        for cam in &cameras {
            for t in &tracks {
                let seen_by = &vis[&(frame, t.track_id)];
                if !seen_by.iter().any(|c| c == cam) {
                    continue;
                }
                let s = &t.states[frame as usize];
                gt.push(GtRecord {
                    frame,
                    camera: cam.to_string(),
                    center: s.center,
                    size: t.size,
                    yaw: s.yaw,
                    class: t.class.clone(),
                    track_id: t.track_id,
                    velocity: s.velocity,
                });
                let droppable = !cfg.dropout_overlap_only || seen_by.len() >= 2;
                if droppable && cfg.dropout_per_camera > 0.0 && rng.random_bool(cfg.dropout_per_camera) {
                    continue;
                }
                let score = rng.random_range(0.5..1.0);
                let observe = |rng: &mut ChaCha8Rng, score: f64| Detection {
                    frame,
                    camera: cam.to_string(),
                    center: std::array::from_fn(|i| s.center[i] + gauss(rng, cfg.noise.center)),
                    size: t.size.map(|d| (d * (1.0 + gauss(rng, cfg.noise.size))).max(0.05)),
                    yaw: wrap_angle(s.yaw + gauss(rng, cfg.noise.yaw)),
                    score,
                    class: t.class.clone(),
                    feature: noisy_feature(rng, &base_features[&t.track_id], cfg.feature_noise),
                };
                detections.push(observe(rng, score));
                labels.push(DetectionLabel {
                    track_id: t.track_id,
                    duplicate: false,
                });
                if cfg.duplicate_rate > 0.0 && rng.random_bool(cfg.duplicate_rate) {
                    let mut dup = observe(rng, score * 0.5);
                    for c in dup.center.iter_mut().take(2) {
                        *c += rng.random_range(-0.3..0.3);
                    }
                    detections.push(dup);
                    labels.push(DetectionLabel {
                        track_id: t.track_id,
                        duplicate: true,
                    });
                }
            }
        }
    }
    if gt.is_empty() {
        log::warn!("scenario has no visible objects");
    }
    Scenario {
        config: cfg.clone(),
        rig: rig.clone(),
        tracks,
        gt,
        detections,
        labels,
        base_features,
    }
}

/// Generates a scenario. With `cfg.handoff` object 0 is replaced by a
/// constructed camera-crossing track (see [`inject_handoff`]).
pub fn generate(cfg: &ScenarioConfig) -> Result<Scenario> {
    cfg.validate()?;
    let rig = cfg.rig();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tracks = random_tracks(&mut rng, cfg);
    if cfg.handoff {
        let (track, _) = handoff_track(cfg, &rig)?;
        match tracks.first_mut() {
            Some(first) => *first = track,
            None => tracks.push(track),
        }
    }
    Ok(emit(cfg, &rig, tracks, &mut rng))
}

/// Cameras and frames in which a track is visible.
pub fn visibility_trace(scenario: &Scenario, track_id: u64) -> BTreeMap<String, Vec<u64>> {
    let mut out: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for g in scenario.gt.iter().filter(|g| g.track_id == track_id) {
        out.entry(g.camera.clone()).or_default().push(g.frame);
    }
    out
}

pub const HANDOFF_TRACK: u64 = 0;

/// A straight track starting just before camera A's optical axis and moving
/// across the shared field of view towards camera B, where `(A, B)` is the
/// first adjacent pair of the rig.
fn handoff_track(cfg: &ScenarioConfig, rig: &CameraRig) -> Result<(GroundTruthTrack, (String, String))> {
    let (a, b) = rig
        .adjacency()
        .next()
        .cloned()
        .ok_or_else(|| SimError::Handoff("rig declares no adjacent cameras".into()))?;
    let fa = rig.camera(&a).expect("adjacent camera").forward_axis();
    let fb = rig.camera(&b).expect("adjacent camera").forward_axis();
    let (ta, tb) = (fa.y.atan2(fa.x), fb.y.atan2(fb.x));
    let turn = wrap_angle(tb - ta).signum();
    let radius = 15.0;
    let tangent = Vec3::new(-ta.sin() * turn, ta.cos() * turn, 0.0);
    let start = Vec3::new(ta.cos(), ta.sin(), 0.0) * radius - tangent * (0.3 * radius);
    let speed = 0.75 / cfg.dt;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let track = simulate_track(
        &mut rng,
        cfg,
        HANDOFF_TRACK,
        cfg.classes[0].clone(),
        start,
        tangent * speed,
        0.0,
    );
    Ok((track, (a, b)))
}

/// Scenario with a guaranteed camera handoff. Returns the scenario and the
/// `(from, to)` camera pair.
pub fn inject_handoff(cfg: &ScenarioConfig) -> Result<(Scenario, (String, String))> {
    let cfg = ScenarioConfig {
        handoff: true,
        ..cfg.clone()
    };
    let rig = cfg.rig();
    let (_, pair) = handoff_track(&cfg, &rig)?;
    let scenario = generate(&cfg)?;
    let trace = visibility_trace(&scenario, HANDOFF_TRACK);
    let frames = |c: &str| trace.get(c).cloned().unwrap_or_default();
    let (fa, fb) = (frames(&pair.0), frames(&pair.1));
    let overlap = fa.iter().filter(|f| fb.contains(f)).count();
    if fa.len() < 5 || fb.len() < 5 || overlap < 2 {
        return Err(SimError::Handoff(format!(
            "handoff trace too short: {} frames in {}, {} in {}, {overlap} shared",
            fa.len(),
            pair.0,
            fb.len(),
            pair.1
        )));
    }
    Ok((scenario, pair))
}

impl Scenario {
    pub fn frames(&self) -> usize {
        self.config.n_frames
    }

    pub fn detections_at(&self, frame: u64) -> Vec<(&Detection, &DetectionLabel)> {
        self.detections
            .iter()
            .zip(&self.labels)
            .filter(|(d, _)| d.frame == frame)
            .collect()
    }

    pub fn gt_at(&self, frame: u64) -> Vec<&GtRecord> {
        self.gt.iter().filter(|g| g.frame == frame).collect()
    }

    /// Writes `detections.jsonl`, `gt.jsonl`, `rig.json` and `scenario.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        jsonl::write(&dir.join("detections.jsonl"), &self.detections)?;
        jsonl::write(&dir.join("gt.jsonl"), &self.gt)?;
        std::fs::write(dir.join("rig.json"), self.rig.to_json())?;
        std::fs::write(dir.join("scenario.json"), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn track_ids(&self) -> BTreeSet<u64> {
        self.tracks.iter().map(|t| t.track_id).collect()
    }
}

/// Answers pixel queries with the identity feature of the object whose
/// projection lies within `radius_px` of the query (nearest wins).
#[derive(Debug, Clone)]
pub struct SimFeatureProvider {
    rig: CameraRig,
    tracks: Vec<GroundTruthTrack>,
    base_features: BTreeMap<u64, Vec<f64>>,
    feature_noise: f64,
    max_range: f64,
    seed: u64,
    pub radius_px: f64,
}

pub const DEFAULT_PROVIDER_RADIUS_PX: f64 = 20.0;

impl SimFeatureProvider {
    pub fn new(scenario: &Scenario) -> Self {
        Self {
            rig: scenario.rig.clone(),
            tracks: scenario.tracks.clone(),
            base_features: scenario.base_features.clone(),
            feature_noise: scenario.config.feature_noise,
            max_range: scenario.config.max_range,
            seed: scenario.config.seed,
            radius_px: DEFAULT_PROVIDER_RADIUS_PX,
        }
    }

    /// Returns the track id and feature of the object seen at `(u, v)`.
    pub fn query(&self, frame: u64, camera: &str, u: f64, v: f64) -> Option<(u64, Vec<f64>)> {
        let cam = self.rig.camera(camera).ok()?;
        let mut best: Option<(f64, u64)> = None;
        for t in &self.tracks {
            let Some(s) = t.states.get(frame as usize) else {
                continue;
            };
            let p = Vec3::from(s.center);
            if (p - cam.extrinsics.translation()).norm() > self.max_range {
                continue;
            }
            let Some(px) = cam.project(&p) else {
                continue;
            };
            let d = ((px.u - u).powi(2) + (px.v - v).powi(2)).sqrt();
            if d <= self.radius_px && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, t.track_id));
            }
        }
        let (_, id) = best?;
        let cam_index = self.rig.index_of(camera).ok()? as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(frame << 20 ^ cam_index << 40 ^ id),
        );
        Some((id, noisy_feature(&mut rng, &self.base_features[&id], self.feature_noise)))
    }
}
