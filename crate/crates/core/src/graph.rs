//! The global tracklet graph shared by every camera.
//!
//! Nodes are either fresh detections of the current frame or tracklets that
//! carry a global track id. Edges form a complete graph over live nodes and
//! are keyed by the ordered pair `(min, max)` of their endpoint ids.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{euclidean_distance_3d, Vec3};
use crate::jsonl::{self, JsonlError};

pub const DEFAULT_MAX_AGE: u32 = 3;
pub const DEFAULT_MIN_HITS: u32 = 1;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("detection schema: {0}")]
    Schema(String),
    #[error("frame regression: graph at frame {current}, got {got}")]
    FrameRegression { current: u64, got: u64 },
    #[error("unknown camera `{0}`")]
    UnknownCamera(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrackId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

impl fmt::Display for TrackId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One per-camera 3D observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: u64,
    pub camera: String,
    pub center: [f64; 3],
    /// `(w, l, h)` in meters.
    pub size: [f64; 3],
    pub yaw: f64,
    pub score: f64,
    pub class: String,
    pub feature: Vec<f64>,
}

impl Detection {
    pub fn location(&self) -> Vec3 {
        Vec3::from(self.center)
    }

    pub fn validate(&self, d_f: usize) -> Result<()> {
        let fail = |msg: String| Err(GraphError::Schema(msg));
        if self.feature.len() != d_f {
            return fail(format!("feature length {} != {d_f}", self.feature.len()));
        }
        if !self.size.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return fail(format!("size must be positive, got {:?}", self.size));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return fail(format!("score {} outside [0, 1]", self.score));
        }
        let finite = self.center.iter().chain(&self.feature).all(|v| v.is_finite()) && self.yaw.is_finite();
        if !finite {
            return fail("non-finite center, yaw or feature".into());
        }
        Ok(())
    }
}

/// Reads a detection file, checking that frames never decrease.
pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let dets: Vec<Detection> = jsonl::read(path)?;
    for pair in dets.windows(2) {
        if pair[1].frame < pair[0].frame {
            return Err(GraphError::FrameRegression {
                current: pair[0].frame,
                got: pair[1].frame,
            });
        }
    }
    Ok(dets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Detection,
    Tracklet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeState {
    Active,
    Lost,
    Removed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackletNode {
    pub id: NodeId,
    pub track_id: Option<TrackId>,
    pub kind: NodeKind,
    pub camera: String,
    pub camera_index: usize,
    pub num_cameras: usize,
    pub location: Vec3,
    pub feature: Vec<f64>,
    pub embedding: Vec<f64>,
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: String,
    pub class_logits: Vec<f64>,
    /// Detection confidence of the latest observation.
    pub score: f64,
    pub age: u32,
    pub hits: u32,
    /// Set for nodes created by propagating a tracklet into another camera.
    pub propagated_from: Option<NodeId>,
}

impl TrackletNode {
    pub fn camera_encoding(&self) -> Vec<f64> {
        let mut enc = vec![0.0; self.num_cameras];
        enc[self.camera_index] = 1.0;
        enc
    }

    pub fn state(&self, max_age: u32) -> NodeState {
        match self.age {
            0 => NodeState::Active,
            a if a > max_age => NodeState::Removed,
            _ => NodeState::Lost,
        }
    }

    pub fn is_detection(&self) -> bool {
        self.kind == NodeKind::Detection
    }

    /// Overwrites the observation fields with those of a matched detection.
    pub fn absorb(&mut self, det: &TrackletNode) {
        self.camera = det.camera.clone();
        self.camera_index = det.camera_index;
        self.location = det.location;
        self.feature = det.feature.clone();
        self.size = det.size;
        self.yaw = det.yaw;
        self.class = det.class.clone();
        self.score = det.score;
        self.age = 0;
        self.hits += 1;
    }
}

/// `h⁰ = [feature | camera one-hot | location]`, length `D_F + C + 3`.
pub fn build_node_input(node: &TrackletNode) -> Vec<f64> {
    let mut v = Vec::with_capacity(node.feature.len() + node.num_cameras + 3);
    v.extend_from_slice(&node.feature);
    v.extend(node.camera_encoding());
    v.extend(node.location.iter());
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEdge {
    pub geometry_distance: f64,
    pub edge_embedding: Vec<f64>,
    pub similarity: Option<f64>,
}

pub fn edge_key(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone)]
pub struct GlobalGraph {
    frame: Option<u64>,
    cameras: Vec<String>,
    d_f: usize,
    nodes: BTreeMap<NodeId, TrackletNode>,
    edges: BTreeMap<(NodeId, NodeId), GraphEdge>,
    next_node: u64,
    next_track: u64,
}

impl GlobalGraph {
    pub fn new(cameras: Vec<String>, d_f: usize) -> Self {
        Self {
            frame: None,
            cameras,
            d_f,
            nodes: BTreeMap::new(),
            edges: BTreeMap::new(),
            next_node: 0,
            next_track: 0,
        }
    }

    pub fn frame(&self) -> Option<u64> {
        self.frame
    }

    pub fn feature_dim(&self) -> usize {
        self.d_f
    }

    pub fn cameras(&self) -> &[String] {
        &self.cameras
    }

    pub fn advance_to(&mut self, frame: u64) -> Result<()> {
        if let Some(current) = self.frame {
            if frame < current {
                return Err(GraphError::FrameRegression { current, got: frame });
            }
        }
        self.frame = Some(frame);
        Ok(())
    }

    pub fn camera_index(&self, camera: &str) -> Result<usize> {
        self.cameras
            .iter()
            .position(|c| c == camera)
            .ok_or_else(|| GraphError::UnknownCamera(camera.to_string()))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &TrackletNode> {
        self.nodes.values()
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().collect()
    }

    pub fn node(&self, id: NodeId) -> Result<&TrackletNode> {
        self.nodes.get(&id).ok_or(GraphError::UnknownNode(id))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut TrackletNode> {
        self.nodes.get_mut(&id).ok_or(GraphError::UnknownNode(id))
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn edges(&self) -> impl Iterator<Item = (&(NodeId, NodeId), &GraphEdge)> {
        self.edges.iter()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edge(&self, a: NodeId, b: NodeId) -> Option<&GraphEdge> {
        self.edges.get(&edge_key(a, b))
    }

    pub fn edge_mut(&mut self, a: NodeId, b: NodeId) -> Option<&mut GraphEdge> {
        self.edges.get_mut(&edge_key(a, b))
    }

    pub fn detection_ids(&self) -> Vec<NodeId> {
        self.nodes.values().filter(|n| n.is_detection()).map(|n| n.id).collect()
    }

    pub fn tracklet_ids(&self) -> Vec<NodeId> {
        self.nodes.values().filter(|n| !n.is_detection()).map(|n| n.id).collect()
    }

    /// Allocates the next global track id; ids are never reused.
    pub fn next_track_id(&mut self) -> TrackId {
        let id = TrackId(self.next_track);
        self.next_track += 1;
        id
    }

    pub fn peek_next_track_id(&self) -> TrackId {
        TrackId(self.next_track)
    }

    fn node_from_detection(&mut self, det: &Detection) -> Result<TrackletNode> {
        det.validate(self.d_f)?;
        let camera_index = self.camera_index(&det.camera)?;
        let id = NodeId(self.next_node);
        self.next_node += 1;
        Ok(TrackletNode {
            id,
            track_id: None,
            kind: NodeKind::Detection,
            camera: det.camera.clone(),
            camera_index,
            num_cameras: self.cameras.len(),
            location: det.location(),
            feature: det.feature.clone(),
            embedding: Vec::new(),
            size: det.size,
            yaw: det.yaw,
            class: det.class.clone(),
            class_logits: Vec::new(),
            score: det.score,
            age: 0,
            hits: 0,
            propagated_from: None,
        })
    }

    fn insert(&mut self, node: TrackletNode) -> NodeId {
        let id = node.id;
        for other in self.nodes.values() {
            self.edges.insert(
                edge_key(id, other.id),
                GraphEdge {
                    geometry_distance: euclidean_distance_3d(&node.location, &other.location),
                    edge_embedding: Vec::new(),
                    similarity: None,
                },
            );
        }
        self.nodes.insert(id, node);
        id
    }

    /// Adds one detection node per input and connects each to every live node.
    /// All detections are validated before any is inserted.
    pub fn add_detection_nodes(&mut self, detections: &[Detection]) -> Result<Vec<NodeId>> {
        for det in detections {
            det.validate(self.d_f)?;
            self.camera_index(&det.camera)?;
        }
        let mut ids = Vec::with_capacity(detections.len());
        for det in detections {
            let node = self.node_from_detection(det)?;
            ids.push(self.insert(node));
        }
        Ok(ids)
    }

    /// Adds a tracklet node carrying `track` built from an observation.
    pub fn add_tracklet(&mut self, det: &Detection, track: TrackId) -> Result<NodeId> {
        let mut node = self.node_from_detection(det)?;
        node.kind = NodeKind::Tracklet;
        node.track_id = Some(track);
        node.hits = 1;
        self.next_track = self.next_track.max(track.0 + 1);
        Ok(self.insert(node))
    }

    /// Adds a copy of tracklet `source` observed from `camera` at `location`.
    pub fn add_virtual_tracklet(
        &mut self,
        source: NodeId,
        camera: &str,
        location: Vec3,
        feature: Vec<f64>,
    ) -> Result<NodeId> {
        let camera_index = self.camera_index(camera)?;
        let mut node = self.node(source)?.clone();
        node.id = NodeId(self.next_node);
        self.next_node += 1;
        node.camera = camera.to_string();
        node.camera_index = camera_index;
        node.location = location;
        node.feature = feature;
        node.propagated_from = Some(source);
        Ok(self.insert(node))
    }

    /// Turns a detection node into a tracklet with the given id.
    pub fn promote(&mut self, id: NodeId, track: TrackId) -> Result<()> {
        let node = self.node_mut(id)?;
        node.kind = NodeKind::Tracklet;
        node.track_id = Some(track);
        node.age = 0;
        node.hits += 1;
        Ok(())
    }

    /// Folds detection `det` into `tracklet` and removes the detection node.
    pub fn absorb_detection(&mut self, tracklet: NodeId, det: NodeId) -> Result<()> {
        self.node(tracklet)?;
        let d = self.remove_node(det)?;
        let t = self.node_mut(tracklet)?;
        t.absorb(&d);
        t.propagated_from = None;
        let location = t.location;
        self.relocate(tracklet, location)
    }

    pub fn remove_node(&mut self, id: NodeId) -> Result<TrackletNode> {
        let node = self.nodes.remove(&id).ok_or(GraphError::UnknownNode(id))?;
        self.edges.retain(|(a, b), _| *a != id && *b != id);
        Ok(node)
    }

    /// Moves a node and recomputes the geometry distance on its edges.
    pub fn relocate(&mut self, id: NodeId, location: Vec3) -> Result<()> {
        self.node_mut(id)?.location = location;
        let locations: BTreeMap<NodeId, Vec3> = self.nodes.iter().map(|(k, n)| (*k, n.location)).collect();
        for ((a, b), edge) in self.edges.iter_mut() {
            if *a == id || *b == id {
                edge.geometry_distance = euclidean_distance_3d(&locations[a], &locations[b]);
            }
        }
        Ok(())
    }

    pub fn increment_ages(&mut self) {
        for node in self.nodes.values_mut().filter(|n| !n.is_detection()) {
            node.age += 1;
        }
    }

    /// Removes tracklets with `age > max_age` together with their edges.
    pub fn prune(&mut self, max_age: u32) -> Vec<NodeId> {
        let doomed: Vec<NodeId> = self
            .nodes
            .values()
            .filter(|n| !n.is_detection() && n.age > max_age)
            .map(|n| n.id)
            .collect();
        for id in &doomed {
            self.nodes.remove(id);
        }
        if !doomed.is_empty() {
            self.edges.retain(|(a, b), _| !doomed.contains(a) && !doomed.contains(b));
        }
        doomed
    }

    /// Node ids grouped by track id.
    pub fn tracks(&self) -> BTreeMap<TrackId, Vec<NodeId>> {
        let mut out: BTreeMap<TrackId, Vec<NodeId>> = BTreeMap::new();
        for node in self.nodes.values() {
            if let Some(t) = node.track_id {
                out.entry(t).or_default().push(node.id);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cams(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn det(camera: &str, center: [f64; 3], feature: Vec<f64>) -> Detection {
        Detection {
            frame: 0,
            camera: camera.into(),
            center,
            size: [1.0, 2.0, 1.5],
            yaw: 0.0,
            score: 0.9,
            class: "car".into(),
            feature,
        }
    }

    #[test]
    fn add_detection_nodes_counts() {
        let mut g = GlobalGraph::new(cams(2), 2);
        assert!(g.add_detection_nodes(&[]).unwrap().is_empty());
        assert_eq!(g.len(), 0);
        g.add_detection_nodes(&[det("c0", [0.0; 3], vec![0.0; 2]), det("c1", [3.0, 4.0, 0.0], vec![0.0; 2])])
            .unwrap();
        assert_eq!((g.len(), g.edge_count()), (2, 1));
        let ids = g.node_ids();
        assert_eq!(g.edge(ids[1], ids[0]).unwrap().geometry_distance, 5.0);

        let mut g = GlobalGraph::new(cams(2), 2);
        for i in 0..3 {
            g.add_tracklet(&det("c0", [i as f64, 0.0, 0.0], vec![0.0; 2]), TrackId(i)).unwrap();
        }
        let before = g.edge_count();
        g.add_detection_nodes(&[det("c0", [0.0; 3], vec![0.0; 2]), det("c1", [1.0; 3], vec![0.0; 2])])
            .unwrap();
        assert_eq!(g.edge_count() - before, 7);
    }

    #[test]
    fn add_detection_nodes_rejects_schema() {
        let mut g = GlobalGraph::new(cams(1), 3);
        let err = g.add_detection_nodes(&[det("c0", [0.0; 3], vec![0.0; 2])]).unwrap_err();
        assert!(matches!(err, GraphError::Schema(_)));
        let mut bad = det("c0", [0.0; 3], vec![0.0; 3]);
        bad.size[1] = 0.0;
        assert!(g.add_detection_nodes(&[bad]).is_err());
        assert!(g.add_detection_nodes(&[det("zz", [0.0; 3], vec![0.0; 3])]).is_err());
        assert!(g.is_empty());
    }

    #[test]
    fn node_input_concatenation() {
        let mut g = GlobalGraph::new(cams(2), 2);
        let id = g.add_detection_nodes(&[det("c0", [3.0, 4.0, 5.0], vec![1.0, 2.0])]).unwrap()[0];
        assert_eq!(build_node_input(g.node(id).unwrap()), vec![1.0, 2.0, 1.0, 0.0, 3.0, 4.0, 5.0]);
        let id = g.add_detection_nodes(&[det("c1", [7.0, 8.0, 9.0], vec![0.0, 0.0])]).unwrap()[0];
        assert_eq!(build_node_input(g.node(id).unwrap()), vec![0.0, 0.0, 0.0, 1.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn prune_examples() {
        let mut g = GlobalGraph::new(cams(1), 1);
        for i in 0..4 {
            g.add_tracklet(&det("c0", [i as f64, 0.0, 0.0], vec![0.0]), TrackId(i)).unwrap();
        }
        assert!(g.prune(3).is_empty());
        let victim = g.node_ids()[2];
        g.node_mut(victim).unwrap().age = 4;
        assert_eq!(g.prune(3), vec![victim]);
        assert_eq!((g.len(), g.edge_count()), (3, 3));
        assert!(g.edges().all(|((a, b), _)| *a != victim && *b != victim));
    }

    #[test]
    fn frame_regression_is_an_error() {
        let mut g = GlobalGraph::new(cams(1), 1);
        g.advance_to(4).unwrap();
        g.advance_to(4).unwrap();
        assert!(matches!(g.advance_to(3), Err(GraphError::FrameRegression { current: 4, got: 3 })));
    }

    #[test]
    fn relocate_updates_distances() {
        let mut g = GlobalGraph::new(cams(1), 1);
        let ids = g
            .add_detection_nodes(&[det("c0", [0.0; 3], vec![0.0]), det("c0", [1.0, 0.0, 0.0], vec![0.0])])
            .unwrap();
        g.relocate(ids[1], Vec3::new(0.0, 6.0, 8.0)).unwrap();
        assert_eq!(g.edge(ids[0], ids[1]).unwrap().geometry_distance, 10.0);
    }

    #[derive(Debug, Clone)]
    enum Action {
        Add(Vec<(u8, i8)>),
        Age(u8),
        Prune(u8),
        Remove(u8),
        Promote(u8),
    }

    fn action() -> impl Strategy<Value = Action> {
        prop_oneof![
            prop::collection::vec((0u8..3, -20i8..20), 0..4).prop_map(Action::Add),
            (0u8..8).prop_map(Action::Age),
            (1u8..4).prop_map(Action::Prune),
            any::<u8>().prop_map(Action::Remove),
            any::<u8>().prop_map(Action::Promote),
        ]
    }

    proptest! {
        #[test]
        fn no_dangling_edges_and_monotone_track_ids(actions in prop::collection::vec(action(), 1..30)) {
            let mut g = GlobalGraph::new(cams(3), 2);
            let mut issued: Vec<TrackId> = Vec::new();
            for a in actions {
                match a {
                    Action::Add(list) => {
                        let dets: Vec<Detection> = list
                            .iter()
                            .map(|(c, x)| det(&format!("c{c}"), [*x as f64, 0.5, 0.0], vec![*x as f64, 1.0]))
                            .collect();
                        g.add_detection_nodes(&dets).unwrap();
                    }
                    Action::Age(k) => {
                        for _ in 0..k { g.increment_ages(); }
                    }
                    Action::Prune(m) => {
                        let removed = g.prune(m as u32);
                        for id in removed { prop_assert!(!g.contains(id)); }
                        prop_assert!(g.nodes().all(|n| n.is_detection() || n.age <= m as u32));
                    }
                    Action::Remove(k) => {
                        let ids = g.node_ids();
                        if !ids.is_empty() {
                            g.remove_node(ids[k as usize % ids.len()]).unwrap();
                        }
                    }
                    Action::Promote(k) => {
                        let ids = g.detection_ids();
                        if !ids.is_empty() {
                            let t = g.next_track_id();
                            if let Some(last) = issued.last() { prop_assert!(t > *last); }
                            issued.push(t);
                            g.promote(ids[k as usize % ids.len()], t).unwrap();
                        }
                    }
                }
                for ((a, b), e) in g.edges() {
                    prop_assert!(a != b && g.contains(*a) && g.contains(*b));
                    prop_assert!(e.geometry_distance >= 0.0);
                }
                let n = g.len();
                prop_assert_eq!(g.edge_count(), n * n.saturating_sub(1) / 2);
            }
        }

        #[test]
        fn node_input_is_lossless(
            feature in prop::collection::vec(-5.0f64..5.0, 4),
            cam in 0usize..3,
            loc in prop::array::uniform3(-50.0f64..50.0),
        ) {
            let mut g = GlobalGraph::new(cams(3), 4);
            let id = g.add_detection_nodes(&[det(&format!("c{cam}"), loc, feature.clone())]).unwrap()[0];
            let node = g.node(id).unwrap();
            let v = build_node_input(node);
            prop_assert_eq!(v.len(), 4 + 3 + 3);
            prop_assert_eq!(&v[..4], &feature[..]);
            prop_assert_eq!(&v[4..7], &node.camera_encoding()[..]);
            prop_assert_eq!(&v[7..], &loc[..]);
        }
    }
}
