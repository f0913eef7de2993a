//! Edge scoring, duplicate suppression, node merging and global id
//! assignment, plus the assignment and box-overlap primitives used by the
//! set loss.

pub mod giou;
pub mod hungarian;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use giou::{giou_3d, giou_3d_with_grad, iou_3d, Box3D, GiouError};
pub use hungarian::{hungarian, Assignment};

use crate::graph::{edge_key, GlobalGraph, NodeId, NodeKind, TrackId};
use crate::gtn::ParamSet;
use crate::numeric::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    #[serde(rename = "match")]
    pub match_: f64,
    pub dup: f64,
    pub global: f64,
}

impl Thresholds {
    pub fn validate(&self) -> bool {
        [self.match_, self.dup, self.global].iter().all(|t| (0.0..=1.0).contains(t))
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            match_: 0.5,
            dup: 0.7,
            global: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EdgeScore {
    pub pair: (NodeId, NodeId),
    pub s: f64,
}

/// Symmetric link probabilities keyed by the ordered pair `(min, max)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    scores: BTreeMap<(NodeId, NodeId), f64>,
}

impl ScoreTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, a: NodeId, b: NodeId, s: f64) {
        self.scores.insert(edge_key(a, b), s);
    }

    pub fn get(&self, a: NodeId, b: NodeId) -> Option<f64> {
        self.scores.get(&edge_key(a, b)).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = EdgeScore> + '_ {
        self.scores.iter().map(|(&pair, &s)| EdgeScore { pair, s })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Node and ordered-pair embeddings from one self-attention pass.
#[derive(Debug, Clone)]
pub struct FrameEmbeddings {
    ids: Vec<NodeId>,
    index: BTreeMap<NodeId, usize>,
    /// `N x D_Z`.
    h: Matrix,
    /// `N² x D_Z`, row `k·N + j`.
    e: Matrix,
    alias: BTreeMap<NodeId, NodeId>,
}

impl FrameEmbeddings {
    pub fn new(ids: Vec<NodeId>, h: Matrix, e: Matrix) -> Self {
        let index = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        Self {
            ids,
            index,
            h,
            e,
            alias: BTreeMap::new(),
        }
    }

    pub fn node_ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// Lets a node created after the attention pass borrow the embeddings of
    /// the node it was derived from.
    pub fn add_alias(&mut self, node: NodeId, source: NodeId) {
        let root = self.alias.get(&source).copied().unwrap_or(source);
        self.alias.insert(node, root);
    }

    pub fn row(&self, id: NodeId) -> Option<usize> {
        let id = self.alias.get(&id).copied().unwrap_or(id);
        self.index.get(&id).copied()
    }

    pub fn h(&self, id: NodeId) -> Option<&[f64]> {
        self.row(id).map(|r| self.h.row(r))
    }

    pub fn e(&self, from: NodeId, to: NodeId) -> Option<&[f64]> {
        let (k, j) = (self.row(from)?, self.row(to)?);
        Some(self.e.row(k * self.ids.len() + j))
    }

    pub fn h_matrix(&self) -> &Matrix {
        &self.h
    }

    pub fn e_matrix(&self) -> &Matrix {
        &self.e
    }
}

fn linked_probability(logits: [f64; 2]) -> f64 {
    // softmax component for "linked"
    1.0 / (1.0 + (logits[0] - logits[1]).exp())
}

fn scorer_logits(h_i: &[f64], h_j: &[f64], e_ij: &[f64], params: &ParamSet) -> [f64; 2] {
    let w = params.by_name("scorer.w").expect("scorer weights");
    let b = params.by_name("scorer.b").expect("scorer bias");
    let mut out = [b.get(0, 0), b.get(0, 1)];
    for (r, x) in h_i.iter().chain(h_j).chain(e_ij).enumerate() {
        out[0] += x * w.get(r, 0);
        out[1] += x * w.get(r, 1);
    }
    out
}

/// One-direction link probability from `[h_i | h_j | e_ij]`.
pub fn score_edge(h_i: &[f64], h_j: &[f64], e_ij: &[f64], params: &ParamSet) -> f64 {
    linked_probability(scorer_logits(h_i, h_j, e_ij, params))
}

/// `½ (s(i, j) + s(j, i))`.
pub fn score_edge_symmetric(h_i: &[f64], h_j: &[f64], e_ij: &[f64], e_ji: &[f64], params: &ParamSet) -> f64 {
    0.5 * (score_edge(h_i, h_j, e_ij, params) + score_edge(h_j, h_i, e_ji, params))
}

/// Scores every unordered pair of distinct embedding rows among `nodes`.
pub fn score_pairs(emb: &FrameEmbeddings, params: &ParamSet, nodes: &[NodeId]) -> ScoreTable {
    let mut table = ScoreTable::new();
    for (a_idx, &a) in nodes.iter().enumerate() {
        for &b in &nodes[a_idx + 1..] {
            let (Some(ra), Some(rb)) = (emb.row(a), emb.row(b)) else {
                continue;
            };
            if ra == rb {
                continue;
            }
            let s = score_edge_symmetric(
                emb.h(a).expect("row"),
                emb.h(b).expect("row"),
                emb.e(a, b).expect("row"),
                emb.e(b, a).expect("row"),
                params,
            );
            table.insert(a, b, s);
        }
    }
    table
}

/// Stores similarities on the graph edges.
pub fn record_similarities(graph: &mut GlobalGraph, scores: &ScoreTable) {
    for es in scores.iter() {
        if let Some(edge) = graph.edge_mut(es.pair.0, es.pair.1) {
            edge.similarity = Some(es.s);
        }
    }
}

fn ranked(mut cands: Vec<(f64, NodeId, NodeId)>) -> Vec<(f64, NodeId, NodeId)> {
    cands.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    cands
}

/// Greedy one-to-one matching of detections to same-camera tracklets by
/// descending score. Matched detections are absorbed into their tracklet.
/// Returns `(detection, tracklet)` pairs.
pub fn suppress_matched_detections(
    graph: &mut GlobalGraph,
    scores: &ScoreTable,
    threshold_match: f64,
) -> Vec<(NodeId, NodeId)> {
    let mut cands = Vec::new();
    for es in scores.iter() {
        let (Ok(a), Ok(b)) = (graph.node(es.pair.0), graph.node(es.pair.1)) else {
            continue;
        };
        if a.camera != b.camera || a.kind == b.kind || es.s < threshold_match {
            continue;
        }
        let (det, trk) = if a.is_detection() { (a.id, b.id) } else { (b.id, a.id) };
        cands.push((es.s, det, trk));
    }
    let (mut used_d, mut used_t) = (BTreeSet::new(), BTreeSet::new());
    let mut matches = Vec::new();
    for (_, det, trk) in ranked(cands) {
        if used_d.contains(&det) || used_t.contains(&trk) {
            continue;
        }
        used_d.insert(det);
        used_t.insert(trk);
        matches.push((det, trk));
    }
    for &(det, trk) in &matches {
        graph.absorb_detection(trk, det).expect("nodes exist");
    }
    matches
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeEvent {
    pub survivor: NodeId,
    pub absorbed: Vec<NodeId>,
}

struct UnionFind {
    parent: BTreeMap<NodeId, NodeId>,
}

impl UnionFind {
    fn new() -> Self {
        Self { parent: BTreeMap::new() }
    }

    fn find(&mut self, x: NodeId) -> NodeId {
        let p = *self.parent.entry(x).or_insert(x);
        if p == x {
            return x;
        }
        let root = self.find(p);
        self.parent.insert(x, root);
        root
    }

    fn union(&mut self, a: NodeId, b: NodeId) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent.insert(hi, lo);
        }
    }
}

/// Transitively merges same-camera pairs scoring at least `threshold_dup`
/// where at least one side is still an unmatched detection. Each connected
/// group keeps one node: its tracklet with the smallest track id if any,
/// otherwise the detection with the highest score. Tracklets are never
/// absorbed.
pub fn merge_same_camera_nodes(graph: &mut GlobalGraph, scores: &ScoreTable, threshold_dup: f64) -> Vec<MergeEvent> {
    let mut uf = UnionFind::new();
    for es in scores.iter() {
        let (Ok(a), Ok(b)) = (graph.node(es.pair.0), graph.node(es.pair.1)) else {
            continue;
        };
        if a.camera == b.camera && (a.is_detection() || b.is_detection()) && es.s >= threshold_dup {
            uf.union(a.id, b.id);
        }
    }
    let members: Vec<NodeId> = uf.parent.keys().copied().collect();
    let mut groups: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for id in members {
        let root = uf.find(id);
        groups.entry(root).or_default().push(id);
    }
    let mut log = Vec::new();
    for (_, group) in groups {
        if group.len() < 2 {
            continue;
        }
        let survivor = {
            let nodes: Vec<_> = group.iter().map(|id| graph.node(*id).expect("live")).collect();
            match nodes.iter().filter(|n| !n.is_detection()).min_by_key(|n| (n.track_id, n.id)) {
                Some(t) => t.id,
                None => nodes
                    .iter()
                    .max_by(|x, y| x.score.total_cmp(&y.score).then(y.id.cmp(&x.id)))
                    .expect("non-empty")
                    .id,
            }
        };
        let absorbed: Vec<NodeId> = group
            .iter()
            .copied()
            .filter(|id| *id != survivor && graph.node(*id).expect("live").is_detection())
            .collect();
        if absorbed.is_empty() {
            continue;
        }
        for id in &absorbed {
            graph.remove_node(*id).expect("live");
        }
        log.push(MergeEvent { survivor, absorbed });
    }
    log
}

/// Gives every remaining detection a fresh track id, then unifies
/// cross-camera pairs scoring at least `threshold_global` onto the smaller
/// id, strongest pairs first. Groups that already share a camera are never
/// unified. `absorbed` maps removed nodes to the node that took them over so
/// their scores count for the survivor (maximum over constituents).
pub fn assign_ids(
    graph: &mut GlobalGraph,
    scores: &ScoreTable,
    threshold_global: f64,
    absorbed: &BTreeMap<NodeId, NodeId>,
) -> BTreeMap<NodeId, TrackId> {
    for id in graph.detection_ids() {
        let t = graph.next_track_id();
        graph.promote(id, t).expect("live");
    }

    let resolve = |mut id: NodeId| {
        while let Some(next) = absorbed.get(&id) {
            id = *next;
        }
        id
    };
    let mut best: BTreeMap<(NodeId, NodeId), f64> = BTreeMap::new();
    for es in scores.iter() {
        let (a, b) = (resolve(es.pair.0), resolve(es.pair.1));
        if a == b || !graph.contains(a) || !graph.contains(b) {
            continue;
        }
        let slot = best.entry(edge_key(a, b)).or_insert(f64::NEG_INFINITY);
        *slot = slot.max(es.s);
    }
    let mut cands = Vec::new();
    for ((a, b), s) in best {
        let (na, nb) = (graph.node(a).expect("live"), graph.node(b).expect("live"));
        if s < threshold_global || na.camera == nb.camera || na.track_id == nb.track_id {
            continue;
        }
        if na.age != 0 && nb.age != 0 {
            continue;
        }
        cands.push((s, a, b));
    }

    let mut cameras: BTreeMap<TrackId, BTreeSet<String>> = BTreeMap::new();
    for n in graph.nodes() {
        if let Some(t) = n.track_id {
            cameras.entry(t).or_default().insert(n.camera.clone());
        }
    }
    let mut relabel: BTreeMap<TrackId, TrackId> = BTreeMap::new();
    let root = |relabel: &BTreeMap<TrackId, TrackId>, mut t: TrackId| {
        while let Some(next) = relabel.get(&t) {
            t = *next;
        }
        t
    };
    for (_, a, b) in ranked(cands) {
        let ta = root(&relabel, graph.node(a).expect("live").track_id.expect("tracklet"));
        let tb = root(&relabel, graph.node(b).expect("live").track_id.expect("tracklet"));
        if ta == tb || !cameras[&ta].is_disjoint(&cameras[&tb]) {
            continue;
        }
        let (lo, hi) = if ta < tb { (ta, tb) } else { (tb, ta) };
        let moved = cameras.remove(&hi).expect("group");
        cameras.get_mut(&lo).expect("group").extend(moved);
        relabel.insert(hi, lo);
    }

    let mut out = BTreeMap::new();
    for id in graph.node_ids() {
        let node = graph.node_mut(id).expect("live");
        if node.kind == NodeKind::Tracklet {
            let t = root(&relabel, node.track_id.expect("tracklet"));
            node.track_id = Some(t);
            out.insert(id, t);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Detection;

    fn det(camera: &str, x: f64, score: f64) -> Detection {
        Detection {
            frame: 0,
            camera: camera.into(),
            center: [x, 0.0, 0.0],
            size: [1.0, 1.0, 1.0],
            yaw: 0.0,
            score,
            class: "car".into(),
            feature: vec![x],
        }
    }

    fn graph() -> GlobalGraph {
        GlobalGraph::new(vec!["a".into(), "b".into()], 1)
    }

    fn zero_params(d: usize) -> ParamSet {
        ParamSet::new(vec![
            ("scorer.w".into(), Matrix::zeros(3 * d, 2)),
            ("scorer.b".into(), Matrix::zeros(1, 2)),
        ])
    }

    #[test]
    fn score_edge_examples() {
        let p = zero_params(2);
        assert_eq!(score_edge(&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &p), 0.5);
        let mut p = zero_params(2);
        p.by_name_mut("scorer.b").unwrap().as_mut_slice().copy_from_slice(&[-10.0, 10.0]);
        let s = score_edge(&[0.1, 0.2], &[0.3, 0.4], &[0.5, 0.6], &p);
        assert!((s - 1.0).abs() < 1e-4);
        assert!((s - 1.0 / (1.0 + (-20f64).exp())).abs() < 1e-15);

        let mut p = zero_params(2);
        for (i, v) in p.by_name_mut("scorer.w").unwrap().as_mut_slice().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let (hi, hj, eij, eji) = ([0.2, -1.0], [0.7, 0.4], [0.1, 0.3], [-0.5, 0.9]);
        let ab = score_edge_symmetric(&hi, &hj, &eij, &eji, &p);
        let ba = score_edge_symmetric(&hj, &hi, &eji, &eij, &p);
        assert_eq!(ab, ba);
    }

    #[test]
    fn suppression_examples() {
        let mut g = graph();
        let t = g.add_tracklet(&det("a", 0.0, 0.9), TrackId(4)).unwrap();
        let d = g.add_detection_nodes(&[det("a", 0.5, 0.8)]).unwrap()[0];
        let mut s = ScoreTable::new();
        s.insert(t, d, 0.0);
        assert!(suppress_matched_detections(&mut g, &s, 0.5).is_empty());
        s.insert(t, d, 0.9);
        g.node_mut(t).unwrap().age = 2;
        assert_eq!(suppress_matched_detections(&mut g, &s, 0.5), vec![(d, t)]);
        let node = g.node(t).unwrap();
        assert_eq!((g.len(), node.age, node.hits, node.location.x), (1, 0, 2, 0.5));

        // two detections contend for one tracklet: the higher score wins
        let mut g = graph();
        let t = g.add_tracklet(&det("a", 0.0, 0.9), TrackId(0)).unwrap();
        let ds = g.add_detection_nodes(&[det("a", 0.1, 0.9), det("a", 0.2, 0.9)]).unwrap();
        let mut s = ScoreTable::new();
        s.insert(t, ds[0], 0.6);
        s.insert(t, ds[1], 0.8);
        assert_eq!(suppress_matched_detections(&mut g, &s, 0.5), vec![(ds[1], t)]);
        let ids = assign_ids(&mut g, &s, 0.5, &BTreeMap::new());
        assert_eq!(ids[&t], TrackId(0));
        assert_eq!(ids[&ds[0]], TrackId(1));
    }

    #[test]
    fn suppression_ignores_other_cameras() {
        let mut g = graph();
        let t = g.add_tracklet(&det("a", 0.0, 0.9), TrackId(0)).unwrap();
        let d = g.add_detection_nodes(&[det("b", 0.0, 0.9)]).unwrap()[0];
        let mut s = ScoreTable::new();
        s.insert(t, d, 0.99);
        assert!(suppress_matched_detections(&mut g, &s, 0.5).is_empty());
    }

    #[test]
    fn merge_examples() {
        let mut g = graph();
        let ds = g.add_detection_nodes(&[det("a", 0.0, 0.5), det("a", 1.0, 0.9), det("a", 2.0, 0.7)]).unwrap();
        let mut s = ScoreTable::new();
        s.insert(ds[0], ds[1], 0.2);
        assert!(merge_same_camera_nodes(&mut g, &s, 0.7).is_empty());
        assert_eq!(g.len(), 3);

        // chain a~b, b~c merges transitively onto the highest-scoring detection
        s.insert(ds[0], ds[1], 0.8);
        s.insert(ds[1], ds[2], 0.75);
        let log = merge_same_camera_nodes(&mut g, &s, 0.7);
        assert_eq!(
            log,
            vec![MergeEvent {
                survivor: ds[1],
                absorbed: vec![ds[0], ds[2]]
            }]
        );
        assert_eq!(g.node_ids(), vec![ds[1]]);

        // exact duplicates with s = 1
        let mut g = graph();
        let ds = g.add_detection_nodes(&[det("a", 0.0, 0.9), det("a", 0.0, 0.9)]).unwrap();
        let mut s = ScoreTable::new();
        s.insert(ds[0], ds[1], 1.0);
        merge_same_camera_nodes(&mut g, &s, 0.7);
        assert_eq!(g.node_ids(), vec![ds[0]]);
    }

    #[test]
    fn merge_prefers_tracklets_and_never_absorbs_them() {
        let mut g = graph();
        let t1 = g.add_tracklet(&det("a", 0.0, 0.9), TrackId(3)).unwrap();
        let t0 = g.add_tracklet(&det("a", 0.1, 0.9), TrackId(1)).unwrap();
        let d = g.add_detection_nodes(&[det("a", 0.0, 0.95)]).unwrap()[0];
        let mut s = ScoreTable::new();
        s.insert(t1, d, 0.9);
        s.insert(t0, d, 0.8);
        s.insert(t0, t1, 0.99);
        let log = merge_same_camera_nodes(&mut g, &s, 0.7);
        assert_eq!(log, vec![MergeEvent { survivor: t0, absorbed: vec![d] }]);
        assert!(g.contains(t1));
    }

    #[test]
    fn assign_ids_examples() {
        let mut g = graph();
        g.add_detection_nodes(&[det("a", 0.0, 0.9), det("a", 5.0, 0.9), det("b", 9.0, 0.9)]).unwrap();
        let ids = assign_ids(&mut g, &ScoreTable::new(), 0.5, &BTreeMap::new());
        let got: BTreeSet<u64> = ids.values().map(|t| t.0).collect();
        assert_eq!(got, BTreeSet::from([0, 1, 2]));

        // a detection suppressed into tracklet 7 reports 7
        let mut g = graph();
        let t = g.add_tracklet(&det("a", 0.0, 0.9), TrackId(7)).unwrap();
        let d = g.add_detection_nodes(&[det("a", 0.0, 0.9)]).unwrap()[0];
        let mut s = ScoreTable::new();
        s.insert(t, d, 0.9);
        let matched = suppress_matched_detections(&mut g, &s, 0.5);
        let absorbed: BTreeMap<NodeId, NodeId> = matched.into_iter().collect();
        let ids = assign_ids(&mut g, &s, 0.5, &absorbed);
        assert_eq!(ids[&t], TrackId(7));
    }

    #[test]
    fn cross_camera_pairs_unify_to_smaller_id() {
        let mut g = graph();
        let ta = g.add_tracklet(&det("a", 10.0, 0.9), TrackId(2)).unwrap();
        let db = g.add_detection_nodes(&[det("b", 10.2, 0.9)]).unwrap()[0];
        let mut s = ScoreTable::new();
        s.insert(ta, db, 0.8);
        let ids = assign_ids(&mut g, &s, 0.5, &BTreeMap::new());
        assert_eq!(ids[&db], TrackId(2));
        assert_eq!(ids[&ta], TrackId(2));

        // groups already sharing a camera are kept apart
        let mut g = graph();
        let ta = g.add_tracklet(&det("a", 0.0, 0.9), TrackId(0)).unwrap();
        let tb = g.add_tracklet(&det("b", 0.0, 0.9), TrackId(0)).unwrap();
        let other = g.add_tracklet(&det("a", 3.0, 0.9), TrackId(1)).unwrap();
        let mut s = ScoreTable::new();
        s.insert(tb, other, 0.9);
        let ids = assign_ids(&mut g, &s, 0.5, &BTreeMap::new());
        assert_eq!((ids[&ta], ids[&tb], ids[&other]), (TrackId(0), TrackId(0), TrackId(1)));
    }

    #[test]
    fn pipeline_is_deterministic_and_unique_per_camera() {
        let build = || {
            let mut g = graph();
            let ts: Vec<NodeId> = (0..3)
                .map(|i| g.add_tracklet(&det(if i % 2 == 0 { "a" } else { "b" }, i as f64, 0.9), TrackId(i)).unwrap())
                .collect();
            let ds = g
                .add_detection_nodes(&[det("a", 0.1, 0.9), det("a", 2.1, 0.8), det("b", 1.1, 0.7), det("b", 1.2, 0.6)])
                .unwrap();
            let mut s = ScoreTable::new();
            let all: Vec<NodeId> = ts.iter().chain(&ds).copied().collect();
            for (i, a) in all.iter().enumerate() {
                for (j, b) in all.iter().enumerate().skip(i + 1) {
                    s.insert(*a, *b, ((i * 7 + j * 3) % 10) as f64 / 10.0);
                }
            }
            let matched = suppress_matched_detections(&mut g, &s, 0.5);
            let mut absorbed: BTreeMap<NodeId, NodeId> = matched.into_iter().collect();
            for ev in merge_same_camera_nodes(&mut g, &s, 0.7) {
                for a in ev.absorbed {
                    absorbed.insert(a, ev.survivor);
                }
            }
            let ids = assign_ids(&mut g, &s, 0.5, &absorbed);
            (ids, g)
        };
        let (ids1, g) = build();
        let (ids2, _) = build();
        assert_eq!(ids1, ids2);
        let mut seen = BTreeSet::new();
        for n in g.nodes().filter(|n| n.age == 0) {
            assert!(seen.insert((n.camera.clone(), n.track_id)), "duplicate id in camera");
        }
    }
}
