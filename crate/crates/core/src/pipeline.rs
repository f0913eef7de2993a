//! Per-frame tracking loop over the global graph, motion propagation into
//! adjacent cameras, detection enhancement, and the motion-model comparison
//! harness.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{
    assign_ids, merge_same_camera_nodes, record_similarities, score_pairs, suppress_matched_detections, Box3D,
    FrameEmbeddings, MergeEvent, Thresholds,
};
use crate::geometry::{apply_projection, compose_cross_camera_transform, CameraRig, GeometryError, Vec3};
use crate::graph::{Detection, GlobalGraph, GraphError, NodeId, NodeKind, TrackId, DEFAULT_MAX_AGE, DEFAULT_MIN_HITS};
use crate::gtn::{GraphInputs, Gtn, GtnError, TrackPrediction};
use crate::metrics::TrackBox;
use crate::motion_baseline::{KalmanConfig, KalmanError, KalmanTrack};
use crate::numeric::{NumericError, Tape};
use crate::simulator::{Scenario, SimFeatureProvider};
use crate::training::{self, TrainError, WalkConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Gtn(#[from] GtnError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Kalman(#[from] KalmanError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionModel {
    Gtn,
    Kalman,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub rig: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub motion: MotionModel,
    pub thresholds: Thresholds,
    pub max_age: u32,
    pub min_hits: u32,
    pub enhance_detections: bool,
    pub seed: u64,
    /// Seconds between consecutive frames.
    pub dt: f64,
    pub kalman: KalmanConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rig: None,
            weights: None,
            motion: MotionModel::Gtn,
            thresholds: Thresholds::default(),
            max_age: DEFAULT_MAX_AGE,
            min_hits: DEFAULT_MIN_HITS,
            enhance_detections: false,
            seed: 0,
            dt: 0.5,
            kalman: KalmanConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.thresholds.validate() {
            return Err(PipelineError::Config("thresholds must lie in [0, 1]".into()));
        }
        if !(self.dt > 0.0) {
            return Err(PipelineError::Config("dt must be positive".into()));
        }
        for path in self.rig.iter().chain(&self.weights) {
            if !path.exists() {
                return Err(PipelineError::Config(format!("{} does not exist", path.display())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackOutputRecord {
    pub frame: u64,
    pub track_id: TrackId,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: String,
    pub score: f64,
    /// Cameras observing the track this frame.
    pub cameras: Vec<String>,
}

impl From<&TrackOutputRecord> for TrackBox {
    fn from(r: &TrackOutputRecord) -> Self {
        TrackBox {
            frame: r.frame,
            id: r.track_id.0,
            center: r.center,
            score: r.score,
        }
    }
}

#[derive(Debug, Error)]
#[error("feature provider: {0}")]
pub struct ProviderError(pub String);

/// Answers "what appearance feature is at this pixel" for propagation.
pub trait FeatureProvider {
    fn feature_at(&self, frame: u64, camera: &str, u: f64, v: f64) -> std::result::Result<Option<Vec<f64>>, ProviderError>;
}

impl FeatureProvider for SimFeatureProvider {
    fn feature_at(&self, frame: u64, camera: &str, u: f64, v: f64) -> std::result::Result<Option<Vec<f64>>, ProviderError> {
        Ok(self.query(frame, camera, u, v).map(|(_, f)| f))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    pub source: NodeId,
    pub camera: String,
    pub node: NodeId,
    pub pixel: (f64, f64),
    pub location: Vec3,
    /// `false` when an existing node of the same track was updated.
    pub created: bool,
}

/// Projects each tracklet's predicted location into the cameras adjacent to
/// its own. Where it lands in view and the provider returns a feature, the
/// track's node in that camera is updated, or a new one is added.
pub fn propagate_motion(
    graph: &mut GlobalGraph,
    rig: &CameraRig,
    provider: &dyn FeatureProvider,
    frame: u64,
    predictions: &BTreeMap<NodeId, Vec3>,
) -> Result<Vec<Propagation>> {
    let mut out = Vec::new();
    let mut claimed: BTreeSet<(TrackId, String)> = graph
        .nodes()
        .filter_map(|n| n.track_id.filter(|_| n.age == 0).map(|t| (t, n.camera.clone())))
        .collect();
    for (&source, &location) in predictions {
        let node = graph.node(source)?;
        let (Some(track), from) = (node.track_id, node.camera.clone()) else {
            continue;
        };
        let src_cam = rig.camera(&from)?;
        let local = src_cam.extrinsics.world_to_camera_point(&location);
        for neighbor in rig.neighbors(&from) {
            let to = neighbor.id.clone();
            if claimed.contains(&(track, to.clone())) {
                continue;
            }
            let m = compose_cross_camera_transform(rig, &from, &to)?;
            let (u, v, depth) = apply_projection(&m, &local);
            let k = &neighbor.intrinsics;
            let in_view = depth > 0.0 && (0.0..k.width as f64).contains(&u) && (0.0..k.height as f64).contains(&v);
            if !in_view {
                continue;
            }
            let feature = match provider.feature_at(frame, &to, u, v) {
                Ok(Some(f)) => f,
                Ok(None) => continue,
                Err(e) => {
                    log::warn!("propagation of {source} into {to} skipped: {e}");
                    continue;
                }
            };
            if feature.len() != graph.feature_dim() {
                log::warn!("propagation of {source} into {to} skipped: feature length {}", feature.len());
                continue;
            }
            let existing = graph
                .nodes()
                .find(|n| n.track_id == Some(track) && n.camera == to && !n.is_detection())
                .map(|n| n.id);
            let (id, created) = match existing {
                Some(id) => {
                    graph.relocate(id, location)?;
                    let n = graph.node_mut(id)?;
                    n.feature = feature;
                    n.propagated_from = Some(source);
                    (id, false)
                }
                None => (graph.add_virtual_tracklet(source, &to, location, feature)?, true),
            };
            claimed.insert((track, to.clone()));
            out.push(Propagation {
                source,
                camera: to,
                node: id,
                pixel: (u, v),
                location,
                created,
            });
        }
    }
    Ok(out)
}

/// Everything one frame step produced.
#[derive(Debug, Clone, Default)]
pub struct FrameOutput {
    pub frame: u64,
    pub records: Vec<TrackOutputRecord>,
    /// Raw detections minus merged duplicates, plus recovered propagated
    /// boxes; filled when enhancement is enabled.
    pub enhanced: Vec<Detection>,
    pub predictions: BTreeMap<NodeId, Vec3>,
    pub propagations: Vec<Propagation>,
    pub matches: Vec<(NodeId, NodeId)>,
    pub merges: Vec<MergeEvent>,
}

pub const ENHANCE_DECAY: f64 = 0.9;

pub struct Tracker {
    pub graph: GlobalGraph,
    rig: CameraRig,
    model: Gtn,
    cfg: PipelineConfig,
    kalman: BTreeMap<NodeId, KalmanTrack>,
    last_frame: Option<u64>,
}

fn box_of(n: &crate::graph::TrackletNode) -> Box3D {
    Box3D::new(n.location, n.size, n.yaw)
}

impl Tracker {
    pub fn new(rig: CameraRig, model: Gtn, cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        if model.config.num_cameras != rig.len() {
            return Err(PipelineError::Config(format!(
                "model expects {} cameras, rig has {}",
                model.config.num_cameras,
                rig.len()
            )));
        }
        let cameras = rig.cameras().iter().map(|c| c.id.clone()).collect();
        Ok(Self {
            graph: GlobalGraph::new(cameras, model.config.d_f),
            rig,
            model,
            cfg,
            kalman: BTreeMap::new(),
            last_frame: None,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Runs one frame. Detections must all carry `frame`.
    pub fn step_frame(
        &mut self,
        frame: u64,
        detections: &[Detection],
        provider: Option<&dyn FeatureProvider>,
    ) -> Result<FrameOutput> {
        self.graph.advance_to(frame)?;
        if let Some(d) = detections.iter().find(|d| d.frame != frame) {
            return Err(PipelineError::Graph(GraphError::Schema(format!(
                "detection of frame {} passed to frame {frame}",
                d.frame
            ))));
        }
        let gap = self.last_frame.map_or(1, |f| frame - f).max(1);
        self.last_frame = Some(frame);
        let mut out = FrameOutput {
            frame,
            ..FrameOutput::default()
        };
        self.graph.increment_ages();

        let mut ordered: Vec<&Detection> = detections.iter().collect();
        ordered.sort_by(|a, b| a.camera.cmp(&b.camera));
        let ordered: Vec<Detection> = ordered.into_iter().cloned().collect();
        let det_ids = self.graph.add_detection_nodes(&ordered)?;

        let tracklets = self.graph.tracklet_ids();
        let mut emb = None;
        if !self.graph.is_empty() {
            let inputs = GraphInputs::from_graph(&self.graph);
            let mut tape = Tape::new();
            let p = self.model.bind(&mut tape);
            let sa = self.model.self_attention(&mut tape, &p, &inputs)?;
            let h = tape.value(sa.h).clone();
            let e = tape.value(sa.e).clone();
            let n = inputs.len();
            let row: BTreeMap<NodeId, usize> = inputs.node_ids.iter().enumerate().map(|(r, id)| (*id, r)).collect();
            for (id, &r) in &row {
                self.graph.node_mut(*id)?.embedding = h.row(r).to_vec();
            }
            if !tracklets.is_empty() {
                let trk_rows: Vec<usize> = tracklets.iter().map(|id| row[id]).collect();
                let det_rows: Vec<usize> = det_ids.iter().map(|id| row[id]).collect();
                let xt = tape.gather_rows(sa.h, &trk_rows)?;
                let xo = if det_rows.is_empty() {
                    None
                } else {
                    Some(tape.gather_rows(sa.h, &det_rows)?)
                };
                let z = self.model.cross_attention(&mut tape, &p, xt, xo)?.z;
                let raw = self.model.head(&mut tape, &p, z)?;
                let raw = tape.value(raw).clone();
                for (i, id) in tracklets.iter().enumerate() {
                    let node = self.graph.node(*id)?;
                    let location = match self.cfg.motion {
                        MotionModel::Gtn => {
                            TrackPrediction::decode(raw.row(i), node.location, node.size, node.yaw, Vec::new()).location
                        }
                        MotionModel::Kalman => {
                            let base = self
                                .kalman
                                .get(id)
                                .cloned()
                                .unwrap_or_else(|| KalmanTrack::new(&box_of(node), self.cfg.kalman));
                            let predicted = base.predict(self.cfg.dt * gap as f64)?;
                            let loc = predicted.location();
                            self.kalman.insert(*id, predicted);
                            loc
                        }
                    };
                    out.predictions.insert(*id, location);
                }
            }
            emb = Some((FrameEmbeddings::new(inputs.node_ids.clone(), h, e), n));
        }

        if let Some(provider) = provider {
            let active: BTreeMap<NodeId, Vec3> = out
                .predictions
                .iter()
                .filter(|(id, _)| self.graph.node(**id).is_ok_and(|n| n.age <= 1))
                .map(|(id, l)| (*id, *l))
                .collect();
            out.propagations = propagate_motion(&mut self.graph, &self.rig, provider, frame, &active)?;
            for p in &out.propagations {
                if let (true, Some(k)) = (p.created, self.kalman.get(&p.source).cloned()) {
                    self.kalman.insert(p.node, k);
                }
            }
        }

        let mut scores = crate::association::ScoreTable::new();
        if let Some((mut fe, _)) = emb {
            for p in &out.propagations {
                fe.add_alias(p.node, p.source);
            }
            let nodes = self.graph.node_ids();
            scores = score_pairs(&fe, &self.model.params, &nodes);
            record_similarities(&mut self.graph, &scores);
        }

        let pre_merge: BTreeMap<NodeId, Detection> = det_ids.iter().copied().zip(ordered.iter().cloned()).collect();
        let th = self.cfg.thresholds;
        out.matches = suppress_matched_detections(&mut self.graph, &scores, th.match_);
        out.merges = merge_same_camera_nodes(&mut self.graph, &scores, th.dup);
        let mut absorbed: BTreeMap<NodeId, NodeId> = out.matches.iter().copied().collect();
        for m in &out.merges {
            for a in &m.absorbed {
                absorbed.insert(*a, m.survivor);
            }
        }
        let promoted: BTreeSet<NodeId> = self.graph.detection_ids().into_iter().collect();
        assign_ids(&mut self.graph, &scores, th.global, &absorbed);

        self.update_motion(&out, &promoted)?;

        if self.cfg.enhance_detections {
            out.enhanced = self.enhanced(frame, &out, &pre_merge, &scores)?;
        }
        for id in self.graph.prune(self.cfg.max_age) {
            self.kalman.remove(&id);
        }
        self.kalman.retain(|id, _| self.graph.contains(*id));
        out.records = self.records(frame);
        Ok(out)
    }

    fn update_motion(&mut self, out: &FrameOutput, promoted: &BTreeSet<NodeId>) -> Result<()> {
        let matched: BTreeSet<NodeId> = out.matches.iter().map(|m| m.1).collect();
        let propagated: BTreeSet<NodeId> = out.propagations.iter().map(|p| p.node).collect();
        for id in self.graph.tracklet_ids() {
            let node = self.graph.node(id)?;
            if promoted.contains(&id) {
                if self.cfg.motion == MotionModel::Kalman {
                    self.kalman.insert(id, KalmanTrack::new(&box_of(node), self.cfg.kalman));
                }
            } else if matched.contains(&id) {
                if self.cfg.motion == MotionModel::Kalman {
                    let obs = box_of(node);
                    let updated = match self.kalman.get(&id) {
                        Some(k) => k.update(&obs)?.0,
                        None => KalmanTrack::new(&obs, self.cfg.kalman),
                    };
                    self.kalman.insert(id, updated);
                }
            } else if node.age > 0 && !propagated.contains(&id) {
                if let Some(&loc) = out.predictions.get(&id) {
                    self.graph.relocate(id, loc)?;
                }
            }
        }
        Ok(())
    }

    /// Raw detections that survived merging plus propagated boxes that no
    /// detection explains. A propagated box is dropped when its node matched a
    /// detection or scores at least the duplicate threshold against a kept
    /// detection of the same camera.
    fn enhanced(
        &self,
        frame: u64,
        out: &FrameOutput,
        raw: &BTreeMap<NodeId, Detection>,
        scores: &crate::association::ScoreTable,
    ) -> Result<Vec<Detection>> {
        let removed: BTreeSet<NodeId> = out.merges.iter().flat_map(|m| m.absorbed.iter().copied()).collect();
        let kept: Vec<(NodeId, &Detection)> = raw
            .iter()
            .filter(|(id, _)| !removed.contains(id))
            .map(|(id, d)| (*id, d))
            .collect();
        let mut dets: Vec<Detection> = kept.iter().map(|(_, d)| (*d).clone()).collect();
        for p in &out.propagations {
            let Ok(node) = self.graph.node(p.node) else {
                continue;
            };
            if node.age == 0 {
                continue;
            }
            let duplicate = kept.iter().any(|(id, d)| {
                d.camera == p.camera
                    && [p.node, p.source]
                        .iter()
                        .any(|n| scores.get(*n, *id).is_some_and(|s| s >= self.cfg.thresholds.dup))
            });
            if duplicate {
                continue;
            }
            let age = self.graph.node(p.source).map_or(node.age, |s| s.age);
            dets.push(Detection {
                frame,
                camera: p.camera.clone(),
                center: [p.location.x, p.location.y, p.location.z],
                size: node.size,
                yaw: node.yaw,
                score: node.score * ENHANCE_DECAY.powi(age as i32),
                class: node.class.clone(),
                feature: node.feature.clone(),
            });
        }
        dets.sort_by(|a, b| a.camera.cmp(&b.camera));
        Ok(dets)
    }

    /// One record per track observed this frame, fused over its cameras.
    fn records(&self, frame: u64) -> Vec<TrackOutputRecord> {
        let mut out = Vec::new();
        for (track, ids) in self.graph.tracks() {
            let live: Vec<_> = ids
                .iter()
                .map(|id| self.graph.node(*id).expect("live"))
                .filter(|n| n.kind == NodeKind::Tracklet && n.age == 0 && n.hits >= self.cfg.min_hits)
                .collect();
            if live.is_empty() {
                continue;
            }
            let k = live.len() as f64;
            let c = live.iter().fold(Vec3::zeros(), |acc, n| acc + n.location) / k;
            let best = live
                .iter()
                .max_by(|a, b| a.score.total_cmp(&b.score).then(b.id.cmp(&a.id)))
                .expect("non-empty");
            let mut cameras: Vec<String> = live.iter().map(|n| n.camera.clone()).collect();
            cameras.sort();
            cameras.dedup();
            out.push(TrackOutputRecord {
                frame,
                track_id: track,
                center: [c.x, c.y, c.z],
                size: best.size,
                yaw: best.yaw,
                class: best.class.clone(),
                score: best.score,
                cameras,
            });
        }
        out
    }
}

/// Detections grouped by frame over `first..=last`, including empty frames.
pub fn group_by_frame(detections: &[Detection], frames: Option<u64>) -> BTreeMap<u64, Vec<Detection>> {
    let mut out: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    let last = detections.iter().map(|d| d.frame).max();
    let end = match (frames, last) {
        (Some(n), _) => n,
        (None, Some(l)) => l + 1,
        (None, None) => 0,
    };
    let start = if frames.is_some() {
        0
    } else {
        detections.iter().map(|d| d.frame).min().unwrap_or(0)
    };
    for f in start..end {
        out.insert(f, Vec::new());
    }
    for d in detections {
        out.entry(d.frame).or_default().push(d.clone());
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct TrackingRun {
    pub records: Vec<TrackOutputRecord>,
    pub enhanced: Vec<Detection>,
}

pub fn run_tracking(
    detections: &[Detection],
    frames: Option<u64>,
    rig: &CameraRig,
    model: &Gtn,
    cfg: &PipelineConfig,
    provider: Option<&dyn FeatureProvider>,
) -> Result<TrackingRun> {
    let mut tracker = Tracker::new(rig.clone(), model.clone(), cfg.clone())?;
    let mut run = TrackingRun::default();
    for (frame, dets) in group_by_frame(detections, frames) {
        let out = tracker.step_frame(frame, &dets, provider)?;
        run.records.extend(out.records);
        run.enhanced.extend(out.enhanced);
    }
    Ok(run)
}

/// Mean one-step center prediction errors of the learned decoder and the
/// Kalman baseline over the same samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MotionComparison {
    pub gtn_mean_error: f64,
    pub kalman_mean_error: f64,
    pub samples: usize,
}

impl MotionComparison {
    pub fn table(&self) -> String {
        format!(
            "| motion model | mean one-step center error (m) | samples |\n|---|---|---|\n| GTN decoder | {:.4} | {} |\n| Kalman | {:.4} | {} |\n",
            self.gtn_mean_error, self.samples, self.kalman_mean_error, self.samples
        )
    }
}

/// For every frame `t ≥ 1` and every (camera, track) observed at `t − 1`
/// whose object still exists at `t`: the decoder predicts from the two-frame
/// chunk, the Kalman filter from that camera's detection history.
pub fn compare_motion_models(
    model: &Gtn,
    scenario: &Scenario,
    kalman: KalmanConfig,
    seed: u64,
) -> Result<MotionComparison> {
    let cameras: Vec<String> = scenario.rig.cameras().iter().map(|c| c.id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = scenario.config.dt;
    let truth: BTreeMap<(u64, u64), Vec3> = scenario
        .tracks
        .iter()
        .flat_map(|t| t.states.iter().map(move |s| ((s.frame, t.track_id), Vec3::from(s.center))))
        .collect();
    let mut filters: BTreeMap<(String, u64), (u64, KalmanTrack)> = BTreeMap::new();
    let (mut gtn_err, mut kal_err, mut samples) = (0.0, 0.0, 0usize);
    for t in 0..scenario.frames() as u64 {
        let current: Vec<_> = scenario.detections_at(t).into_iter().filter(|(_, l)| !l.duplicate).collect();
        if t >= 1 {
            let chunk = training::TrainChunk::from_scenario(scenario, t)?;
            let prepared = training::prepare(&chunk, &model.config, &cameras, &WalkConfig::default(), &mut rng)?;
            if prepared.n_tracklets > 0 {
                let mut tape = Tape::new();
                let p = model.bind(&mut tape);
                let sa = model.self_attention(&mut tape, &p, &prepared.inputs)?;
                let raw = training::prediction_rows(model, &mut tape, &p, sa.h, prepared.n_tracklets, prepared.inputs.len())?;
                let raw = tape.value(raw).clone();
                for (i, item) in prepared.items.iter().take(prepared.n_tracklets).enumerate() {
                    let track = item.track.expect("tracklet item");
                    let Some(gt) = truth.get(&(t, track)) else {
                        continue;
                    };
                    let Some((last, filter)) = filters.get(&(item.camera.clone(), track)) else {
                        continue;
                    };
                    if *last != t - 1 {
                        continue;
                    }
                    let pred = TrackPrediction::decode(raw.row(i), item.prev_location, item.prev_size, item.prev_yaw, vec![]);
                    gtn_err += (pred.location - gt).norm();
                    kal_err += (filter.predict(dt)?.location() - gt).norm();
                    samples += 1;
                }
            }
        }
        for (d, l) in current {
            let key = (d.camera.clone(), l.track_id);
            let obs = Box3D::new(d.location(), d.size, d.yaw);
            let next = match filters.get(&key) {
                Some((last, f)) => f.predict(dt * (t - last) as f64)?.update(&obs)?.0,
                None => KalmanTrack::new(&obs, kalman),
            };
            filters.insert(key, (t, next));
        }
    }
    let n = samples.max(1) as f64;
    Ok(MotionComparison {
        gtn_mean_error: gtn_err / n,
        kalman_mean_error: kal_err / n,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gtn::GtnConfig;

    fn small_model(rig: &CameraRig, d_f: usize) -> Gtn {
        Gtn::new(
            GtnConfig {
                d_f,
                num_cameras: rig.len(),
                d_z: 8,
                heads: 2,
                ffn_hidden: 8,
                self_layers: 1,
                cross_layers: 1,
                ..GtnConfig::default()
            },
            1,
        )
        .unwrap()
    }

    fn det(frame: u64, camera: &str, x: f64) -> Detection {
        Detection {
            frame,
            camera: camera.into(),
            center: [x, 0.0, 0.8],
            size: [1.9, 4.5, 1.6],
            yaw: 0.0,
            score: 0.9,
            class: "car".into(),
            feature: vec![1.0, 0.0],
        }
    }

    #[test]
    fn first_detection_gets_an_id_and_empty_frames_age_tracks() {
        let rig = CameraRig::default_ring();
        let mut t = Tracker::new(rig.clone(), small_model(&rig, 2), PipelineConfig::default()).unwrap();
        let out = t.step_frame(0, &[det(0, "cam0", 10.0)], None).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].track_id, TrackId(0));
        let out = t.step_frame(1, &[], None).unwrap();
        assert!(out.records.is_empty());
        let ages: Vec<u32> = t.graph.nodes().map(|n| n.age).collect();
        assert_eq!(ages, vec![1]);
        assert_eq!(t.graph.peek_next_track_id(), TrackId(1));
        assert!(t.step_frame(0, &[], None).is_err());
    }

    #[test]
    fn tracks_age_out() {
        let rig = CameraRig::default_ring();
        let mut t = Tracker::new(rig.clone(), small_model(&rig, 2), PipelineConfig::default()).unwrap();
        t.step_frame(0, &[det(0, "cam0", 10.0)], None).unwrap();
        for f in 1..=DEFAULT_MAX_AGE as u64 {
            t.step_frame(f, &[], None).unwrap();
            assert_eq!(t.graph.len(), 1);
        }
        t.step_frame(DEFAULT_MAX_AGE as u64 + 1, &[], None).unwrap();
        assert!(t.graph.is_empty());
    }

    struct Everywhere;
    impl FeatureProvider for Everywhere {
        fn feature_at(&self, _: u64, _: &str, _: f64, _: f64) -> std::result::Result<Option<Vec<f64>>, ProviderError> {
            Ok(Some(vec![0.0, 1.0]))
        }
    }

    struct Broken;
    impl FeatureProvider for Broken {
        fn feature_at(&self, _: u64, _: &str, _: f64, _: f64) -> std::result::Result<Option<Vec<f64>>, ProviderError> {
            Err(ProviderError("offline".into()))
        }
    }

    fn one_tracklet(rig: &CameraRig, at: Vec3) -> (GlobalGraph, NodeId) {
        let cams = rig.cameras().iter().map(|c| c.id.clone()).collect();
        let mut g = GlobalGraph::new(cams, 2);
        let mut d = det(0, "cam0", 0.0);
        d.center = [at.x, at.y, at.z];
        let id = g.add_tracklet(&d, TrackId(4)).unwrap();
        (g, id)
    }

    #[test]
    fn propagation_examples() {
        let rig = CameraRig::default_ring();
        let cam0 = rig.camera("cam0").unwrap();
        let cam1 = rig.camera("cam1").unwrap();
        // only cam0 sees a point straight ahead
        let ahead = cam0.extrinsics.translation() + cam0.forward_axis() * 20.0;
        let (mut g, id) = one_tracklet(&rig, ahead);
        let preds = BTreeMap::from([(id, ahead)]);
        assert!(propagate_motion(&mut g, &rig, &Everywhere, 1, &preds).unwrap().is_empty());

        // between cam0 and cam1 axes: visible in cam1 only among neighbours
        let dir = (cam0.forward_axis() + cam1.forward_axis() * 1.4).normalize();
        let p = cam0.extrinsics.translation() + dir * 20.0;
        assert!(cam1.project(&p).is_some());
        let (mut g, id) = one_tracklet(&rig, p);
        let preds = BTreeMap::from([(id, p)]);
        let props = propagate_motion(&mut g, &rig, &Everywhere, 1, &preds).unwrap();
        let visible_neighbours = rig.neighbors("cam0").iter().filter(|c| c.project(&p).is_some()).count();
        assert_eq!(props.len(), visible_neighbours);
        let direct = cam1.project(&p).unwrap();
        let prop = props.iter().find(|x| x.camera == "cam1").unwrap();
        assert!((prop.pixel.0 - direct.u).abs() < 1e-6 && (prop.pixel.1 - direct.v).abs() < 1e-6);
        let node = g.node(prop.node).unwrap();
        assert_eq!((node.track_id, node.camera.as_str()), (Some(TrackId(4)), "cam1"));

        // a second propagation updates instead of duplicating
        let again = propagate_motion(&mut g, &rig, &Everywhere, 2, &preds).unwrap();
        assert!(again.iter().all(|x| !x.created));
        assert_eq!(g.len(), 1 + props.len());

        let (mut g, id) = one_tracklet(&rig, p);
        let preds = BTreeMap::from([(id, p)]);
        assert!(propagate_motion(&mut g, &rig, &Broken, 1, &preds).unwrap().is_empty());
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn config_json_and_validation() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"motion": "kalman", "thresholds": {"match": 0.6}}"#).unwrap();
        assert_eq!(cfg.motion, MotionModel::Kalman);
        assert_eq!(cfg.thresholds.match_, 0.6);
        assert_eq!(cfg.thresholds.dup, 0.7);
        let bad = PipelineConfig {
            thresholds: Thresholds {
                match_: 1.5,
                ..Thresholds::default()
            },
            ..PipelineConfig::default()
        };
        assert!(bad.validate().is_err());
        let missing = PipelineConfig {
            weights: Some(PathBuf::from("/nonexistent/w.json")),
            ..PipelineConfig::default()
        };
        assert!(missing.validate().is_err());
    }

    #[test]
    fn group_by_frame_fills_gaps() {
        let d = [det(1, "cam0", 0.0), det(3, "cam1", 0.0)];
        let g = group_by_frame(&d, None);
        assert_eq!(g.keys().copied().collect::<Vec<_>>(), vec![1, 2, 3]);
        let g = group_by_frame(&d, Some(5));
        assert_eq!(g.len(), 5);
    }
}
