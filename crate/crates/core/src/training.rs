//! Losses, two-frame chunks, Adam and finite-difference gradient checking.
//!
//! `L_total = L_emb + L_c + L_set`. The embedding and edge-scoring losses are
//! built on the tape. The set loss involves Hungarian matching and GIoU, so it
//! is evaluated outside the tape together with its gradient with respect to
//! the raw head outputs and injected with [`Tape::external_scalar`].

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{giou_3d_with_grad, hungarian, Box3D, GiouError};
use crate::geometry::Vec3;
use crate::graph::{Detection, GlobalGraph, GraphError, TrackId};
use crate::gtn::{Bound, GraphInputs, Gtn, GtnConfig, GtnError, ParamSet};
use crate::numeric::{Matrix, NumericError, Tape, Var};
use crate::simulator::{DetectionLabel, GtRecord, Scenario, ScenarioConfig, SimError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("chunk frames must be consecutive, got {0} and {1}")]
    NonConsecutive(u64, u64),
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Gtn(#[from] GtnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Giou(#[from] GiouError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_box: f64,
    pub lambda_iou: f64,
    /// Negative sampling ratio of the embedding loss.
    pub w_g: f64,
    /// Multiplier on the edge-scoring loss; 1 gives the plain sum of the
    /// three losses.
    pub w_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls: 1.0,
            lambda_box: 5.0,
            lambda_iou: 2.0,
            w_g: 1.0,
            w_c: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cls, self.lambda_box, self.lambda_iou, self.w_g, self.w_c];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(TrainError::Config("loss weights must be finite and nonnegative".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WalkConfig {
    pub walk_length: usize,
    pub walks_per_node: usize,
    /// Edges shorter than this (meters) are walkable.
    pub neighbor_edge_threshold: f64,
    pub negatives_per_node: usize,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            walk_length: 2,
            walks_per_node: 2,
            neighbor_edge_threshold: 10.0,
            negatives_per_node: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One frame of training data.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePayload {
    pub frame: u64,
    pub detections: Vec<Detection>,
    /// Parallel to `detections`.
    pub labels: Vec<DetectionLabel>,
    pub gt: Vec<GtRecord>,
}

impl FramePayload {
    pub fn from_scenario(s: &Scenario, frame: u64) -> Self {
        let (detections, labels) = s
            .detections_at(frame)
            .into_iter()
            .map(|(d, l)| (d.clone(), *l))
            .unzip();
        Self {
            frame,
            detections,
            labels,
            gt: s.gt_at(frame).into_iter().cloned().collect(),
        }
    }
}

/// Two consecutive frames: the first seeds tracklets, the second supplies
/// detections and the supervision targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainChunk {
    frames: [FramePayload; 2],
}

impl TrainChunk {
    pub fn new(previous: FramePayload, current: FramePayload) -> Result<Self> {
        if current.frame != previous.frame + 1 {
            return Err(TrainError::NonConsecutive(previous.frame, current.frame));
        }
        Ok(Self {
            frames: [previous, current],
        })
    }

    /// Frames `t - 1` and `t` of a scenario.
    pub fn from_scenario(s: &Scenario, t: u64) -> Result<Self> {
        if t == 0 {
            return Err(TrainError::NonConsecutive(0, 0));
        }
        Self::new(FramePayload::from_scenario(s, t - 1), FramePayload::from_scenario(s, t))
    }

    pub fn previous(&self) -> &FramePayload {
        &self.frames[0]
    }

    pub fn current(&self) -> &FramePayload {
        &self.frames[1]
    }
}

/// Index pairs into the node rows for the embedding loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbSamples {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

/// Random-walk positives and uniform negatives. A step moves uniformly to a
/// node of the same identity closer than the threshold; negatives are drawn
/// uniformly from nodes of other identities.
pub fn sample_embedding_pairs(
    labels: &[u64],
    locations: &[Vec3],
    cfg: &WalkConfig,
    rng: &mut ChaCha8Rng,
) -> EmbSamples {
    let n = labels.len();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|k| {
            (0..n)
                .filter(|&j| {
                    j != k
                        && labels[j] == labels[k]
                        && (locations[j] - locations[k]).norm() < cfg.neighbor_edge_threshold
                })
                .collect()
        })
        .collect();
    let mut out = EmbSamples::default();
    for k in 0..n {
        let mut reached = BTreeSet::new();
        for _ in 0..cfg.walks_per_node {
            let mut at = k;
            for _ in 0..cfg.walk_length {
                let options = &neighbors[at];
                if options.is_empty() {
                    break;
                }
                at = options[rng.random_range(0..options.len())];
                if at != k {
                    reached.insert(at);
                }
            }
        }
        out.positives.extend(reached.iter().map(|&j| (k, j)));
        let pool: Vec<usize> = (0..n).filter(|&i| labels[i] != labels[k]).collect();
        if !pool.is_empty() {
            for _ in 0..cfg.negatives_per_node {
                out.negatives.push((k, pool[rng.random_range(0..pool.len())]));
            }
        }
    }
    out
}

fn pair_dots(tape: &mut Tape, h: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let ha = tape.gather_rows(h, &a)?;
    let hb = tape.gather_rows(h, &b)?;
    let prod = tape.mul(ha, hb)?;
    Ok(tape.row_sum(prod))
}

/// `−Σ log σ(⟨h_k, h_j⟩) − w_g Σ log(1 − σ(⟨h_k, h_i⟩))` over the samples.
pub fn embedding_loss(tape: &mut Tape, h: Var, samples: &EmbSamples, w_g: f64) -> Result<Var> {
    let mut total = tape.leaf(Matrix::scalar(0.0));
    if !samples.positives.is_empty() {
        let d = pair_dots(tape, h, &samples.positives)?;
        let l = tape.log_sigmoid(d);
        let s = tape.sum_all(l);
        let s = tape.scale(s, -1.0);
        total = tape.add(total, s)?;
    }
    if !samples.negatives.is_empty() && w_g != 0.0 {
        let d = pair_dots(tape, h, &samples.negatives)?;
        // log(1 − σ(x)) = log σ(−x)
        let d = tape.scale(d, -1.0);
        let l = tape.log_sigmoid(d);
        let s = tape.sum_all(l);
        let s = tape.scale(s, -w_g);
        total = tape.add(total, s)?;
    }
    Ok(total)
}

/// Symmetrized link probabilities `½ (p(i, j) + p(j, i))` for unordered node
/// pairs, as a `P x 1` column. `e` is the `n² x D` ordered-pair tensor.
pub fn pair_link_probabilities(
    tape: &mut Tape,
    p: &Bound,
    h: Var,
    e: Var,
    n: usize,
    pairs: &[(usize, usize)],
) -> Result<Var> {
    let count = pairs.len();
    let mut first = Vec::with_capacity(2 * count);
    let mut second = Vec::with_capacity(2 * count);
    let mut edge_rows = Vec::with_capacity(2 * count);
    for &(i, j) in pairs {
        first.push(i);
        second.push(j);
        edge_rows.push(i * n + j);
    }
    for &(i, j) in pairs {
        first.push(j);
        second.push(i);
        edge_rows.push(j * n + i);
    }
    let hi = tape.gather_rows(h, &first)?;
    let hj = tape.gather_rows(h, &second)?;
    let eij = tape.gather_rows(e, &edge_rows)?;
    let x = tape.concat_cols(&[hi, hj, eij])?;
    let logits = tape.matmul(x, p.var("scorer.w"))?;
    let logits = tape.add_row(logits, p.var("scorer.b"))?;
    let probs = tape.softmax_rows(logits);
    let linked = tape.slice_cols(probs, 1, 1)?;
    let forward: Vec<usize> = (0..count).collect();
    let backward: Vec<usize> = (count..2 * count).collect();
    let a = tape.gather_rows(linked, &forward)?;
    let b = tape.gather_rows(linked, &backward)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, 0.5))
}

/// Mean binary cross-entropy of link probabilities against labels.
pub fn edge_scoring_loss(tape: &mut Tape, probs: Var, labels: &[bool]) -> Result<Var> {
    let count = labels.len();
    if count == 0 {
        return Ok(tape.leaf(Matrix::scalar(0.0)));
    }
    let pos: Vec<usize> = (0..count).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..count).filter(|&i| !labels[i]).collect();
    let mut total = tape.leaf(Matrix::scalar(0.0));
    if !pos.is_empty() {
        let p = tape.gather_rows(probs, &pos)?;
        let l = tape.ln(p);
        let s = tape.sum_all(l);
        total = tape.add(total, s)?;
    }
    if !neg.is_empty() {
        let p = tape.gather_rows(probs, &neg)?;
        let q = tape.scale(p, -1.0);
        let q = tape.add_scalar(q, 1.0);
        let l = tape.ln(q);
        let s = tape.sum_all(l);
        total = tape.add(total, s)?;
    }
    Ok(tape.scale(total, -1.0 / count as f64))
}

/// One row of head output to be supervised.
#[derive(Debug, Clone, PartialEq)]
pub struct SetItem {
    pub prev_location: Vec3,
    pub prev_size: [f64; 3],
    pub prev_yaw: f64,
    pub camera: String,
    /// Tracklet identity; `None` for detection predictions, which are matched
    /// by Hungarian assignment instead.
    pub track: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtBox {
    pub bbox: Box3D,
    pub class: usize,
    pub camera: String,
    pub track_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetLossOutput {
    pub value: f64,
    /// Gradient with respect to the raw head rows.
    pub grad: Matrix,
    /// Matched ground-truth index per item.
    pub matches: Vec<Option<usize>>,
}

fn decode_box(raw: &[f64], item: &SetItem) -> Box3D {
    Box3D::new(
        item.prev_location + Vec3::new(raw[0], raw[1], raw[2]),
        std::array::from_fn(|i| item.prev_size[i] * raw[3 + i].exp()),
        item.prev_yaw + raw[6],
    )
}

/// Cross-entropy of `logits` against `target` and its gradient.
fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let value = z.ln() + m - logits[target];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[target] -= 1.0;
    (value, grad)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Weighted matched-pair cost and its gradient over one raw row.
fn pair_cost(raw: &[f64], item: &SetItem, gt: &GtBox, w: &LossWeights) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; raw.len()];
    let mut value = 0.0;
    if w.lambda_cls != 0.0 {
        let (ce, g) = cross_entropy(&raw[7..], gt.class);
        value += w.lambda_cls * ce;
        for (i, gi) in g.iter().enumerate() {
            grad[7 + i] += w.lambda_cls * gi;
        }
    }
    let pred = decode_box(raw, item);
    if w.lambda_box != 0.0 {
        for i in 0..3 {
            let d = pred.center[i] - gt.bbox.center[i];
            value += w.lambda_box * d.abs();
            grad[i] += w.lambda_box * sign(d);
            let ds = pred.size[i].ln() - gt.bbox.size[i].ln();
            value += w.lambda_box * ds.abs();
            grad[3 + i] += w.lambda_box * sign(ds);
        }
        let yaw = item.prev_yaw + raw[6];
        let (ds, dc) = (yaw.sin() - gt.bbox.yaw.sin(), yaw.cos() - gt.bbox.yaw.cos());
        value += w.lambda_box * (ds.abs() + dc.abs());
        grad[6] += w.lambda_box * (sign(ds) * yaw.cos() - sign(dc) * yaw.sin());
    }
    if w.lambda_iou != 0.0 {
        let (g, dg) = giou_3d_with_grad(&pred, &gt.bbox)?;
        value += w.lambda_iou * (1.0 - g);
        for i in 0..3 {
            grad[i] -= w.lambda_iou * dg[i];
            grad[3 + i] -= w.lambda_iou * dg[3 + i] * pred.size[i];
        }
        grad[6] -= w.lambda_iou * dg[6];
    }
    Ok((value, grad))
}

/// Set-prediction loss. Tracklet items match the ground truth with their
/// identity in the same camera; detection items are matched per camera by
/// Hungarian assignment on the weighted pair cost. Unmatched items pay
/// `λ_cls` times the no-object cross-entropy (class index `num_classes`).
pub fn set_loss(
    raw: &Matrix,
    items: &[SetItem],
    gt: &[GtBox],
    weights: &LossWeights,
    num_classes: usize,
) -> Result<SetLossOutput> {
    if raw.rows() != items.len() || (raw.rows() > 0 && raw.cols() != 7 + num_classes + 1) {
        return Err(TrainError::Numeric(NumericError::Shape {
            op: "set_loss",
            lhs: raw.shape(),
            rhs: (items.len(), 7 + num_classes + 1),
        }));
    }
    let mut matches: Vec<Option<usize>> = vec![None; items.len()];
    for (i, item) in items.iter().enumerate() {
        if let Some(track) = item.track {
            matches[i] = gt.iter().position(|g| g.track_id == track && g.camera == item.camera);
        }
    }
    let cameras: BTreeSet<&str> = items.iter().map(|i| i.camera.as_str()).collect();
    for cam in cameras {
        let rows: Vec<usize> = (0..items.len())
            .filter(|&i| items[i].track.is_none() && items[i].camera == cam)
            .collect();
        let cols: Vec<usize> = (0..gt.len()).filter(|&g| gt[g].camera == cam).collect();
        if rows.is_empty() || cols.is_empty() {
            continue;
        }
        let mut cost = Matrix::zeros(rows.len(), cols.len());
        for (r, &i) in rows.iter().enumerate() {
            for (c, &g) in cols.iter().enumerate() {
                cost.set(r, c, pair_cost(raw.row(i), &items[i], &gt[g], weights)?.0);
            }
        }
        for (r, c) in hungarian(&cost).pairs {
            matches[rows[r]] = Some(cols[c]);
        }
    }
    let mut value = 0.0;
    let mut grad = Matrix::zeros(raw.rows(), raw.cols());
    for (i, m) in matches.iter().enumerate() {
        let (v, g) = match m {
            Some(gi) => pair_cost(raw.row(i), &items[i], &gt[*gi], weights)?,
            None => {
                let (ce, g) = cross_entropy(&raw.row(i)[7..], num_classes);
                let mut full = vec![0.0; raw.cols()];
                for (k, gk) in g.iter().enumerate() {
                    full[7 + k] = weights.lambda_cls * gk;
                }
                (weights.lambda_cls * ce, full)
            }
        };
        value += v;
        grad.row_mut(i).copy_from_slice(&g);
    }
    Ok(SetLossOutput { value, grad, matches })
}

/// A chunk turned into model inputs and supervision.
#[derive(Debug, Clone)]
pub struct PreparedChunk {
    pub inputs: GraphInputs,
    /// Rows `0..n_tracklets` are tracklets, the rest detections.
    pub n_tracklets: usize,
    pub node_labels: Vec<u64>,
    pub emb: EmbSamples,
    pub pairs: Vec<(usize, usize)>,
    pub pair_labels: Vec<bool>,
    pub items: Vec<SetItem>,
    pub gt: Vec<GtBox>,
    pub num_classes: usize,
}

fn gt_boxes(records: &[GtRecord], config: &GtnConfig) -> Result<Vec<GtBox>> {
    records
        .iter()
        .map(|g| {
            Ok(GtBox {
                bbox: g.as_box(),
                class: config
                    .class_index(&g.class)
                    .ok_or_else(|| TrainError::UnknownClass(g.class.clone()))?,
                camera: g.camera.clone(),
                track_id: g.track_id,
            })
        })
        .collect()
}

fn item_for(d: &Detection, track: Option<u64>) -> SetItem {
    SetItem {
        prev_location: d.location(),
        prev_size: d.size,
        prev_yaw: d.yaw,
        camera: d.camera.clone(),
        track,
    }
}

/// Previous-frame detections become tracklets carrying their true identity
/// (duplicates skipped, one per camera and identity); current-frame
/// detections become detection nodes.
pub fn prepare(
    chunk: &TrainChunk,
    config: &GtnConfig,
    cameras: &[String],
    walks: &WalkConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PreparedChunk> {
    if cameras.len() != config.num_cameras {
        return Err(TrainError::Config(format!(
            "model expects {} cameras, rig has {}",
            config.num_cameras,
            cameras.len()
        )));
    }
    let mut graph = GlobalGraph::new(cameras.to_vec(), config.d_f);
    let (prev, cur) = (chunk.previous(), chunk.current());
    let mut labels = Vec::new();
    let mut items = Vec::new();
    let mut seen = BTreeSet::new();
    for (d, l) in prev.detections.iter().zip(&prev.labels) {
        if l.duplicate || !seen.insert((d.camera.clone(), l.track_id)) {
            continue;
        }
        graph.add_tracklet(d, TrackId(l.track_id))?;
        labels.push(l.track_id);
        items.push(item_for(d, Some(l.track_id)));
    }
    let n_tracklets = labels.len();
    graph.add_detection_nodes(&cur.detections)?;
    for (d, l) in cur.detections.iter().zip(&cur.labels) {
        labels.push(l.track_id);
        items.push(item_for(d, None));
    }
    let inputs = GraphInputs::from_graph(&graph);
    let locations: Vec<Vec3> = graph.nodes().map(|n| n.location).collect();
    let emb = sample_embedding_pairs(&labels, &locations, walks, rng);
    let n = labels.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let pair_labels = pairs.iter().map(|&(i, j)| labels[i] == labels[j]).collect();
    Ok(PreparedChunk {
        inputs,
        n_tracklets,
        node_labels: labels,
        emb,
        pairs,
        pair_labels,
        items,
        gt: gt_boxes(&cur.gt, config)?,
        num_classes: config.classes.len(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub emb: f64,
    pub c: f64,
    pub set: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown) {
        self.emb += other.emb;
        self.c += other.c;
        self.set += other.set;
        self.total += other.total;
    }
}

/// Raw head rows for all set items: tracklets decoded through cross-attention
/// over the detections, detections through the head alone.
pub fn prediction_rows(model: &Gtn, tape: &mut Tape, p: &Bound, h: Var, nt: usize, n: usize) -> Result<Var> {
    let trk: Vec<usize> = (0..nt).collect();
    let det: Vec<usize> = (nt..n).collect();
    let xo = if det.is_empty() {
        None
    } else {
        Some(tape.gather_rows(h, &det)?)
    };
    let mut parts = Vec::new();
    if !trk.is_empty() {
        let xt = tape.gather_rows(h, &trk)?;
        parts.push(model.cross_attention(tape, p, xt, xo)?.z);
    }
    if let Some(xo) = xo {
        parts.push(model.cross_attention(tape, p, xo, None)?.z);
    }
    let z = tape.concat_rows(&parts)?;
    Ok(model.head(tape, p, z)?)
}

/// Builds `L_total` for one chunk on the tape.
pub fn chunk_loss(
    model: &Gtn,
    tape: &mut Tape,
    p: &Bound,
    chunk: &PreparedChunk,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let n = chunk.inputs.len();
    if n == 0 {
        return Ok((tape.leaf(Matrix::scalar(0.0)), LossBreakdown::default()));
    }
    let out = model.self_attention(tape, p, &chunk.inputs)?;
    let l_emb = embedding_loss(tape, out.h, &chunk.emb, weights.w_g)?;
    let l_c = if chunk.pairs.is_empty() {
        tape.leaf(Matrix::scalar(0.0))
    } else {
        let probs = pair_link_probabilities(tape, p, out.h, out.e, n, &chunk.pairs)?;
        let l = edge_scoring_loss(tape, probs, &chunk.pair_labels)?;
        tape.scale(l, weights.w_c)
    };
    let raw = prediction_rows(model, tape, p, out.h, chunk.n_tracklets, n)?;
    let set = set_loss(tape.value(raw), &chunk.items, &chunk.gt, weights, chunk.num_classes)?;
    let l_set = tape.external_scalar(raw, set.value, set.grad)?;
    let sum = tape.add(l_emb, l_c)?;
    let total = tape.add(sum, l_set)?;
    let breakdown = LossBreakdown {
        emb: tape.value(l_emb).item(),
        c: tape.value(l_c).item(),
        set: set.value,
        total: tape.value(total).item(),
    };
    Ok((total, breakdown))
}

/// Summed loss over chunks and, optionally, its gradient per parameter.
fn evaluate(
    model: &Gtn,
    chunks: &[PreparedChunk],
    weights: &LossWeights,
    with_grad: bool,
) -> Result<(LossBreakdown, Vec<Matrix>)> {
    let mut total = LossBreakdown::default();
    let mut grads: Vec<Matrix> = model.params.iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect();
    for chunk in chunks {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        let (loss, b) = chunk_loss(model, &mut tape, &p, chunk, weights)?;
        total.accumulate(&b);
        if with_grad {
            tape.backward(loss)?;
            for (acc, &v) in grads.iter_mut().zip(p.vars()) {
                if let Some(g) = tape.grad(v) {
                    *acc = acc.add(g)?;
                }
            }
        }
    }
    Ok((total, grads))
}

pub fn total_loss(model: &Gtn, chunks: &[PreparedChunk], weights: &LossWeights) -> Result<LossBreakdown> {
    Ok(evaluate(model, chunks, weights, false)?.0)
}

pub fn loss_and_gradients(
    model: &Gtn,
    chunks: &[PreparedChunk],
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<Matrix>)> {
    evaluate(model, chunks, weights, true)
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Adam with bias correction.
pub fn adam_step(params: &mut ParamSet, grads: &[Matrix], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::Config(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (id, g) in params.ids().zip(grads) {
        if g.shape() != params.get(id).shape() {
            return Err(TrainError::Numeric(NumericError::Shape {
                op: "adam_step",
                lhs: params.get(id).shape(),
                rhs: g.shape(),
            }));
        }
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (idx, id) in params.ids().enumerate().collect::<Vec<_>>() {
        let g = grads[idx].as_slice();
        let m = state.m[idx].as_mut_slice();
        let v = state.v[idx].as_mut_slice();
        let w = params.get_mut(id).as_mut_slice();
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            w[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

pub const GRADCHECK_EPS: f64 = 1e-5;
/// Denominator floor of the relative error, so that entries whose true
/// gradient is near zero are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Central finite difference of the total loss in one parameter entry.
pub fn finite_difference(
    model: &mut Gtn,
    chunks: &[PreparedChunk],
    weights: &LossWeights,
    param: usize,
    index: usize,
    eps: f64,
) -> Result<f64> {
    let id = model.params.ids().nth(param).expect("parameter index");
    let orig = model.params.get(id).as_slice()[index];
    model.params.get_mut(id).as_mut_slice()[index] = orig + eps;
    let plus = total_loss(model, chunks, weights)?.total;
    model.params.get_mut(id).as_mut_slice()[index] = orig - eps;
    let minus = total_loss(model, chunks, weights)?.total;
    model.params.get_mut(id).as_mut_slice()[index] = orig;
    Ok((plus - minus) / (2.0 * eps))
}

/// Compares analytic gradients with central differences over every
/// parameter entry.
pub fn grad_check(model: &Gtn, chunks: &[PreparedChunk], weights: &LossWeights, eps: f64) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_gradients(model, chunks, weights)?;
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (pi, g) in grads.iter().enumerate() {
        for idx in 0..g.len() {
            let numeric = finite_difference(&mut probe, chunks, weights, pi, idx, eps)?;
            let analytic = g.as_slice()[idx];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst_parameter.is_empty() {
                report.max_relative_error = err;
                report.worst_parameter = model.params.iter().nth(pi).expect("parameter").0.to_string();
                report.worst_index = idx;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// A small model and a hand-built chunk with three tracklets and two
/// detections, all dimensions at most 8.
pub fn toy_problem(seed: u64) -> Result<(Gtn, Vec<PreparedChunk>)> {
    let config = GtnConfig {
        heads: 2,
        self_layers: 1,
        cross_layers: 1,
        d_f: 3,
        num_cameras: 2,
        d_z: 8,
        ffn_hidden: 8,
        classes: vec!["car".into(), "pedestrian".into()],
        ..GtnConfig::default()
    };
    let model = Gtn::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cameras = vec!["cam0".to_string(), "cam1".to_string()];
    let mut det = |frame: u64, cam: usize, x: f64, y: f64, class: &str| Detection {
        frame,
        camera: cameras[cam].clone(),
        center: [x, y, 0.8],
        size: [1.8, 4.2, 1.6],
        yaw: rng.random_range(-1.0..1.0),
        score: 0.9,
        class: class.to_string(),
        feature: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let label = |track_id| DetectionLabel {
        track_id,
        duplicate: false,
    };
    let prev_dets = vec![
        det(0, 0, 5.0, 1.0, "car"),
        det(0, 0, 8.0, -2.0, "pedestrian"),
        det(0, 1, 5.5, 1.2, "car"),
    ];
    let cur_dets = vec![det(1, 0, 5.6, 1.3, "car"), det(1, 1, 8.4, -1.7, "pedestrian")];
    let gt = |frame, cam: usize, track_id, x, y, class: &str| GtRecord {
        frame,
        camera: cameras[cam].clone(),
        center: [x, y, 0.8],
        size: [1.9, 4.4, 1.5],
        yaw: 0.3,
        class: class.to_string(),
        track_id,
        velocity: [1.0, 0.5, 0.0],
    };
    let chunk = TrainChunk::new(
        FramePayload {
            frame: 0,
            detections: prev_dets,
            labels: vec![label(0), label(1), label(0)],
            gt: vec![],
        },
        FramePayload {
            frame: 1,
            detections: cur_dets,
            labels: vec![label(0), label(1)],
            gt: vec![
                gt(1, 0, 0, 5.5, 1.4, "car"),
                gt(1, 1, 1, 8.5, -1.5, "pedestrian"),
                gt(1, 1, 0, 5.5, 1.4, "car"),
            ],
        },
    )?;
    let walks = WalkConfig::default();
    let prepared = prepare(&chunk, &config, &cameras, &walks, &mut rng)?;
    Ok((model, vec![prepared]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gtn: GtnConfig,
    pub loss: LossWeights,
    pub walks: WalkConfig,
    pub adam: AdamConfig,
    pub steps: usize,
    pub seed: u64,
    pub scenario: ScenarioConfig,
    /// Number of generated scenarios; scenario `k` uses seed
    /// `scenario.seed + k`.
    pub scenario_count: usize,
    /// Number of two-frame chunks per scenario, spread evenly over it.
    pub chunks: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gtn: GtnConfig::default(),
            loss: LossWeights::default(),
            walks: WalkConfig::default(),
            adam: AdamConfig::default(),
            steps: 200,
            seed: 0,
            scenario: ScenarioConfig::default(),
            scenario_count: 1,
            chunks: 4,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.gtn.validate()?;
        self.scenario.validate()?;
        if self.walks.walk_length == 0 {
            return Err(TrainError::Config("walk_length must be at least 1".into()));
        }
        if self.scenario_count == 0 {
            return Err(TrainError::Config("scenario_count must be at least 1".into()));
        }
        if self.chunks == 0 || self.chunks >= self.scenario.n_frames {
            return Err(TrainError::Config(format!(
                "need 1 <= chunks < n_frames, got {} chunks for {} frames",
                self.chunks, self.scenario.n_frames
            )));
        }
        if !(self.adam.lr > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Chunks at frames evenly spread over the scenario.
pub fn scenario_chunks(
    scenario: &Scenario,
    count: usize,
    config: &GtnConfig,
    walks: &WalkConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PreparedChunk>> {
    let frames = scenario.frames().max(2) as u64;
    let cameras: Vec<String> = scenario.rig.cameras().iter().map(|c| c.id.clone()).collect();
    let stride = ((frames - 1) / count.max(1) as u64).max(1);
    (0..count as u64)
        .map(|i| 1 + i * stride)
        .filter(|&t| t < frames)
        .map(|t| prepare(&TrainChunk::from_scenario(scenario, t)?, config, &cameras, walks, rng))
        .collect()
}

/// Full-batch Adam on fixed chunks. Returns the loss before every step and
/// after the last one.
pub fn train(
    model: &mut Gtn,
    chunks: &[PreparedChunk],
    weights: &LossWeights,
    adam: &AdamConfig,
    steps: usize,
) -> Result<Vec<LossBreakdown>> {
    let mut state = AdamState::new(&model.params);
    let mut history = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        let (loss, grads) = loss_and_gradients(model, chunks, weights)?;
        if step % 20 == 0 {
            log::info!("step {step}: total {:.6}", loss.total);
        }
        history.push(loss);
        adam_step(&mut model.params, &grads, &mut state, adam)?;
    }
    history.push(total_loss(model, chunks, weights)?);
    Ok(history)
}

/// Chunks from every configured scenario. With `scenario.handoff` set each
/// scenario carries an injected handoff track.
pub fn config_chunks(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<PreparedChunk>> {
    let mut chunks = Vec::new();
    for k in 0..cfg.scenario_count as u64 {
        let sc = ScenarioConfig {
            seed: cfg.scenario.seed + k,
            ..cfg.scenario.clone()
        };
        let scenario = if sc.handoff {
            crate::simulator::inject_handoff(&sc)?.0
        } else {
            crate::simulator::generate(&sc)?
        };
        chunks.extend(scenario_chunks(&scenario, cfg.chunks, &cfg.gtn, &cfg.walks, rng)?);
    }
    Ok(chunks)
}

/// Generates the configured scenarios, prepares chunks and trains a fresh
/// model.
pub fn train_from_config(cfg: &TrainConfig) -> Result<(Gtn, Vec<LossBreakdown>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let chunks = config_chunks(cfg, &mut rng)?;
    let mut model = Gtn::new(cfg.gtn.clone(), cfg.seed)?;
    let history = train(&mut model, &chunks, &cfg.loss, &cfg.adam, cfg.steps)?;
    Ok((model, history))
}

pub fn write_loss_csv(path: &Path, history: &[LossBreakdown]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,emb,c,set,total")?;
    for (i, l) in history.iter().enumerate() {
        writeln!(f, "{i},{},{},{},{}", l.emb, l.c, l.set, l.total)?;
    }
    f.flush()?;
    Ok(())
}

/// Per-identity count of nodes, for diagnostics.
pub fn label_histogram(chunk: &PreparedChunk) -> BTreeMap<u64, usize> {
    let mut out = BTreeMap::new();
    for &l in &chunk.node_labels {
        *out.entry(l).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::score_edge_symmetric;

    fn scalar_loss(f: impl FnOnce(&mut Tape) -> Var) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape);
        tape.value(v).item()
    }

    #[test]
    fn embedding_loss_examples() {
        let a = (3.0f64.ln() / 2.0).sqrt();
        let h = Matrix::from_rows(&[vec![a, a], vec![a, a], vec![1.0, -1.0]]);
        let pos = EmbSamples {
            positives: vec![(0, 1)],
            negatives: vec![],
        };
        let v = scalar_loss(|t| {
            let h = t.leaf(h.clone());
            embedding_loss(t, h, &pos, 1.0).unwrap()
        });
        assert!((v - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((v - 0.2877).abs() < 1e-4);

        let with_neg = EmbSamples {
            positives: vec![(0, 1)],
            negatives: vec![(0, 2), (1, 2)],
        };
        let v0 = scalar_loss(|t| {
            let h = t.leaf(h.clone());
            embedding_loss(t, h, &with_neg, 0.0).unwrap()
        });
        assert_eq!(v0, v);

        let ortho = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let v = scalar_loss(|t| {
            let h = t.leaf(ortho.clone());
            embedding_loss(t, h, &pos, 1.0).unwrap()
        });
        assert!((v - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn walks_stay_within_identity_and_range() {
        let labels = [0, 0, 0, 1, 1];
        let locs = [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(3.0, 0.0, 0.0),
            Vec3::new(30.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(2.0, 0.0, 0.0),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = sample_embedding_pairs(&labels, &locs, &WalkConfig::default(), &mut rng);
        for &(k, j) in &s.positives {
            assert_eq!(labels[k], labels[j]);
            assert!((locs[k] - locs[j]).norm() < 10.0);
        }
        assert!(s.positives.contains(&(0, 1)));
        assert!(!s.positives.iter().any(|&(k, _)| k == 2));
        assert_eq!(s.negatives.len(), 5 * 2);
        assert!(s.negatives.iter().all(|&(k, i)| labels[k] != labels[i]));
    }

    #[test]
    fn edge_scoring_examples() {
        let uniform = Matrix::filled(4, 1, 0.5);
        let v = scalar_loss(|t| {
            let p = t.leaf(uniform.clone());
            edge_scoring_loss(t, p, &[true, false, true, false]).unwrap()
        });
        assert!((v - 2.0f64.ln()).abs() < 1e-15);

        let confident = 1.0 / (1.0 + (-20.0f64).exp());
        let probs = Matrix::column_vector(&[confident, 1.0 - confident]);
        let v = scalar_loss(|t| {
            let p = t.leaf(probs.clone());
            edge_scoring_loss(t, p, &[true, false]).unwrap()
        });
        assert!(v < 1e-3);

        let mixed = [0.9, 0.2, 0.6, 0.35];
        let labels = [true, false, false, true];
        let oracle = -mixed
            .iter()
            .zip(labels)
            .map(|(p, y): (&f64, bool)| if y { p.ln() } else { (1.0 - p).ln() })
            .sum::<f64>()
            / 4.0;
        let v = scalar_loss(|t| {
            let p = t.leaf(Matrix::column_vector(&mixed));
            edge_scoring_loss(t, p, &labels).unwrap()
        });
        assert!((v - oracle).abs() < 1e-14);
    }

    #[test]
    fn tape_link_probabilities_match_inference_scorer() {
        let (model, chunks) = toy_problem(4).unwrap();
        let chunk = &chunks[0];
        let n = chunk.inputs.len();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        let out = model.self_attention(&mut tape, &p, &chunk.inputs).unwrap();
        let probs = pair_link_probabilities(&mut tape, &p, out.h, out.e, n, &chunk.pairs).unwrap();
        let (h, e) = (tape.value(out.h).clone(), tape.value(out.e).clone());
        for (r, &(i, j)) in chunk.pairs.iter().enumerate() {
            let s = score_edge_symmetric(h.row(i), h.row(j), e.row(i * n + j), e.row(j * n + i), &model.params);
            assert!((tape.value(probs).get(r, 0) - s).abs() < 1e-14);
        }
    }

    fn item(x: f64) -> SetItem {
        SetItem {
            prev_location: Vec3::new(x, 0.0, 0.5),
            prev_size: [1.0, 2.0, 1.0],
            prev_yaw: 0.2,
            camera: "cam0".into(),
            track: None,
        }
    }

    fn gtb(x: f64, class: usize) -> GtBox {
        GtBox {
            bbox: Box3D::new(Vec3::new(x, 0.0, 0.5), [1.0, 2.0, 1.0], 0.2),
            class,
            camera: "cam0".into(),
            track_id: 0,
        }
    }

    fn confident_row(class: usize, k: usize) -> Vec<f64> {
        let mut r = vec![0.0; 7 + k + 1];
        r[7 + class] = 20.0;
        r
    }

    #[test]
    fn set_loss_examples() {
        let raw = Matrix::from_rows(&[confident_row(1, 3)]);
        let out = set_loss(&raw, &[item(4.0)], &[gtb(4.0, 1)], &LossWeights::default(), 3).unwrap();
        assert!(out.value < 1e-3, "{}", out.value);

        let only_box = LossWeights {
            lambda_cls: 0.0,
            lambda_box: 1.0,
            lambda_iou: 0.0,
            w_g: 1.0,
            w_c: 1.0,
        };
        let out = set_loss(&raw, &[item(5.0)], &[gtb(4.0, 1)], &only_box, 3).unwrap();
        assert!((out.value - 1.0).abs() < 1e-12);

        let none = set_loss(&raw, &[item(5.0)], &[], &LossWeights::default(), 3).unwrap();
        let (ce, _) = cross_entropy(&raw.row(0)[7..], 3);
        assert_eq!(none.value, ce);
        assert_eq!(none.matches, vec![None]);
    }

    #[test]
    fn set_loss_hungarian_beats_crossed_pairing() {
        let w = LossWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let raw = Matrix::from_rows(
                &(0..2)
                    .map(|_| (0..11).map(|_| rng.random_range(-0.5..0.5)).collect())
                    .collect::<Vec<Vec<f64>>>(),
            );
            let items = [item(rng.random_range(0.0..3.0)), item(rng.random_range(0.0..3.0))];
            let gt = [gtb(rng.random_range(0.0..3.0), 0), gtb(rng.random_range(0.0..3.0), 2)];
            let out = set_loss(&raw, &items, &gt, &w, 3).unwrap();
            let cost = |i: usize, g: usize| pair_cost(raw.row(i), &items[i], &gt[g], &w).unwrap().0;
            let best = (cost(0, 0) + cost(1, 1)).min(cost(0, 1) + cost(1, 0));
            assert!((out.value - best).abs() < 1e-12);

            let swapped = [gt[1].clone(), gt[0].clone()];
            let again = set_loss(&raw, &items, &swapped, &w, 3).unwrap();
            assert_eq!(again.value, out.value);
        }
    }

    #[test]
    fn set_loss_gradient_matches_differences() {
        let w = LossWeights::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let raw = Matrix::from_rows(
            &(0..2)
                .map(|_| (0..11).map(|_| rng.random_range(-0.3..0.3)).collect())
                .collect::<Vec<Vec<f64>>>(),
        );
        let mut items = vec![item(1.0), item(3.0)];
        items[1].track = Some(0);
        let gt = [gtb(1.4, 0), gtb(2.6, 1)];
        let out = set_loss(&raw, &items, &gt, &w, 3).unwrap();
        for r in 0..2 {
            for c in 0..11 {
                let mut plus = raw.clone();
                plus.set(r, c, raw.get(r, c) + 1e-6);
                let mut minus = raw.clone();
                minus.set(r, c, raw.get(r, c) - 1e-6);
                let fd = (set_loss(&plus, &items, &gt, &w, 3).unwrap().value
                    - set_loss(&minus, &items, &gt, &w, 3).unwrap().value)
                    / 2e-6;
                assert!((fd - out.grad.get(r, c)).abs() < 1e-6, "({r},{c}) {fd} vs {}", out.grad.get(r, c));
            }
        }
    }

    #[test]
    fn total_is_sum_of_components() {
        let (model, chunks) = toy_problem(2).unwrap();
        let b = total_loss(&model, &chunks, &LossWeights::default()).unwrap();
        assert_eq!(b.total, b.emb + b.c + b.set);
        assert!(b.emb > 0.0 && b.c > 0.0 && b.set > 0.0);

        let mut tape = Tape::new();
        let p = model.bind(&mut tape);
        let chunk = &chunks[0];
        let out = model.self_attention(&mut tape, &p, &chunk.inputs).unwrap();
        let emb = embedding_loss(&mut tape, out.h, &chunk.emb, 1.0).unwrap();
        assert_eq!(tape.value(emb).item(), b.emb);
    }

    #[test]
    fn adam_examples() {
        let mut params = ParamSet::new(vec![("w".into(), Matrix::from_vec(1, 2, vec![1.0, -2.0]).unwrap())]);
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &[Matrix::zeros(1, 2)], &mut state, &cfg).unwrap();
        assert_eq!(params.by_name("w").unwrap().as_slice(), &[1.0, -2.0]);

        let mut params = ParamSet::new(vec![("w".into(), Matrix::from_vec(1, 2, vec![1.0, -2.0]).unwrap())]);
        let mut state = AdamState::new(&params);
        let g = Matrix::from_vec(1, 2, vec![0.3, -4.0]).unwrap();
        adam_step(&mut params, &[g.clone()], &mut state, &cfg).unwrap();
        let w = params.by_name("w").unwrap().as_slice().to_vec();
        assert!((w[0] - (1.0 - cfg.lr)).abs() < 1e-10);
        assert!((w[1] - (-2.0 + cfg.lr)).abs() < 1e-10);

        // scalar oracle over two steps
        let g2 = Matrix::from_vec(1, 2, vec![-0.1, 2.5]).unwrap();
        adam_step(&mut params, &[g2.clone()], &mut state, &cfg).unwrap();
        for i in 0..2 {
            let (a, b) = (g.as_slice()[i], g2.as_slice()[i]);
            let mut p = [1.0, -2.0][i];
            let (mut m, mut v) = (0.0, 0.0);
            for (t, gt) in [(1, a), (2, b)] {
                m = 0.9 * m + 0.1 * gt;
                v = 0.999 * v + 0.001 * gt * gt;
                let mh = m / (1.0 - 0.9f64.powi(t));
                let vh = v / (1.0 - 0.999f64.powi(t));
                p -= 1e-3 * mh / (vh.sqrt() + 1e-8);
            }
            assert!((params.by_name("w").unwrap().as_slice()[i] - p).abs() < 1e-12);
        }

        let err = adam_step(&mut params, &[Matrix::zeros(2, 2)], &mut state, &cfg);
        assert!(err.is_err());
    }

    #[test]
    fn chunks_must_be_consecutive() {
        let f = |frame| FramePayload {
            frame,
            detections: vec![],
            labels: vec![],
            gt: vec![],
        };
        assert!(matches!(TrainChunk::new(f(3), f(5)), Err(TrainError::NonConsecutive(3, 5))));
        assert!(TrainChunk::new(f(3), f(4)).is_ok());
    }

    #[test]
    fn losses_are_finite_and_nonnegative() {
        for seed in 0..5 {
            let (model, chunks) = toy_problem(seed).unwrap();
            let b = total_loss(&model, &chunks, &LossWeights::default()).unwrap();
            for v in [b.emb, b.c, b.set, b.total] {
                assert!(v.is_finite() && v >= 0.0);
            }
        }
    }
}
