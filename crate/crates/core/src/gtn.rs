//! Graph transformer: the self-attention stack over the global graph, the
//! cross-attention motion decoder, and the linear output heads.
//!
//! Weights are stored `in x out` and applied as `x · W`. Per-head projections
//! are kept as one concatenated matrix; head `i` owns column block `i`.
//! Ordered node pairs `(k, j)` are laid out row-major as row `k·N + j`, so the
//! edge tensor is `N² x D_Z` and includes self pairs.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{euclidean_distance_3d, Vec3};
use crate::graph::{build_node_input, GlobalGraph, NodeId};
use crate::numeric::{Matrix, NumericError, Tape, Var};

#[derive(Debug, Error)]
pub enum GtnError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{layer}: {source}")]
    Shape { layer: String, source: NumericError },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GtnError>;

trait InLayer<T> {
    fn in_layer(self, layer: &str) -> Result<T>;
}

impl<T> InLayer<T> for std::result::Result<T, NumericError> {
    fn in_layer(self, layer: &str) -> Result<T> {
        self.map_err(|source| GtnError::Shape {
            layer: layer.to_string(),
            source,
        })
    }
}

pub fn default_classes() -> Vec<String> {
    ["car", "pedestrian", "bicycle"].iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GtnConfig {
    pub heads: usize,
    pub self_layers: usize,
    pub cross_layers: usize,
    /// Appearance feature length `D_F`.
    pub d_f: usize,
    /// Number of rig cameras `C` (length of the camera one-hot).
    pub num_cameras: usize,
    pub d_z: usize,
    pub ffn_hidden: usize,
    pub classes: Vec<String>,
    /// Multiplier on the appearance feature columns of the node input.
    pub feature_scale: f64,
    /// Meters per input unit for node locations and edge distances.
    pub location_scale: f64,
}

impl Default for GtnConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            self_layers: 2,
            cross_layers: 3,
            d_f: 64,
            num_cameras: 6,
            d_z: 64,
            ffn_hidden: 128,
            classes: default_classes(),
            feature_scale: 8.0,
            location_scale: 10.0,
        }
    }
}

impl GtnConfig {
    /// First-layer input width `D_E = D_F + C + 3`.
    pub fn d_e(&self) -> usize {
        self.d_f + self.num_cameras + 3
    }

    pub fn d_head(&self) -> usize {
        self.d_z / self.heads
    }

    /// Width of the raw head output: 3 location delta, 3 log-size, 1 yaw
    /// delta, then `K + 1` class logits (the last is "no object").
    pub fn head_width(&self) -> usize {
        7 + self.classes.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("heads", self.heads),
            ("self_layers", self.self_layers),
            ("d_f", self.d_f),
            ("num_cameras", self.num_cameras),
            ("d_z", self.d_z),
            ("ffn_hidden", self.ffn_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(GtnError::Config(format!("{name} must be at least 1")));
        }
        if self.d_z % self.heads != 0 {
            return Err(GtnError::Config(format!(
                "d_z {} not divisible by heads {}",
                self.d_z, self.heads
            )));
        }
        if self.classes.is_empty() {
            return Err(GtnError::Config("class list is empty".into()));
        }
        if !(self.feature_scale > 0.0 && self.feature_scale.is_finite())
            || !(self.location_scale > 0.0 && self.location_scale.is_finite())
        {
            return Err(GtnError::Config("input scales must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn class_index(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }

    /// Name and shape of every parameter, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let (dz, f) = (self.d_z, self.ffn_hidden);
        let mut out = vec![("edge_in.w".to_string(), (1, dz)), ("edge_in.b".to_string(), (1, dz))];
        let ffn = |prefix: String, out: &mut Vec<(String, (usize, usize))>| {
            out.push((format!("{prefix}.w1"), (dz, f)));
            out.push((format!("{prefix}.b1"), (1, f)));
            out.push((format!("{prefix}.w2"), (f, dz)));
            out.push((format!("{prefix}.b2"), (1, dz)));
        };
        let norm = |prefix: String, out: &mut Vec<(String, (usize, usize))>| {
            out.push((format!("{prefix}.gain"), (1, dz)));
            out.push((format!("{prefix}.bias"), (1, dz)));
        };
        for l in 0..self.self_layers {
            let din = if l == 0 { self.d_e() } else { dz };
            for m in ["q", "k", "v"] {
                out.push((format!("self.{l}.{m}"), (din, dz)));
            }
            for m in ["e", "o_h", "o_e"] {
                out.push((format!("self.{l}.{m}"), (dz, dz)));
            }
            if din != dz {
                out.push((format!("self.{l}.res"), (din, dz)));
            }
            ffn(format!("self.{l}.ffn_h"), &mut out);
            ffn(format!("self.{l}.ffn_e"), &mut out);
            for n in ["norm_h1", "norm_h2", "norm_e1", "norm_e2"] {
                norm(format!("self.{l}.{n}"), &mut out);
            }
        }
        for l in 0..self.cross_layers {
            for m in ["q", "k", "v", "o_z"] {
                out.push((format!("cross.{l}.{m}"), (dz, dz)));
            }
            ffn(format!("cross.{l}.ffn"), &mut out);
            norm(format!("cross.{l}.norm1"), &mut out);
            norm(format!("cross.{l}.norm2"), &mut out);
        }
        ffn("head.ffn".to_string(), &mut out);
        out.push(("head.out.w".to_string(), (dz, self.head_width())));
        out.push(("head.out.b".to_string(), (1, self.head_width())));
        out.push(("scorer.w".to_string(), (3 * dz, 2)));
        out.push(("scorer.b".to_string(), (1, 2)));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Matrix)>) -> Self {
        let mut set = Self {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        };
        for (name, value) in entries {
            set.index.insert(name.clone(), set.names.len());
            set.names.push(name);
            set.values.push(value);
        }
        set
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.id(name).map(|id| &mut self.values[id.0])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }
}

/// Parameters bound as leaves on a tape.
pub struct Bound<'a> {
    set: &'a ParamSet,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    pub fn new(tape: &mut Tape, set: &'a ParamSet) -> Self {
        let vars = set.values.iter().map(|m| tape.leaf(m.clone())).collect();
        Self { set, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        let id = self.set.id(name).unwrap_or_else(|| panic!("missing parameter `{name}`"));
        self.vars[id.0]
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.set.id(name).map(|id| self.vars[id.0])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gtn {
    pub config: GtnConfig,
    pub params: ParamSet,
}

/// Node and pair inputs to the self-attention stack.
#[derive(Debug, Clone)]
pub struct GraphInputs {
    /// Row `r` of `h0` belongs to `node_ids[r]`.
    pub node_ids: Vec<NodeId>,
    pub h0: Matrix,
    /// `N² x 1` geometry distances, row `k·N + j`.
    pub distances: Matrix,
}

impl GraphInputs {
    pub fn from_rows(node_ids: Vec<NodeId>, rows: &[Vec<f64>], locations: &[Vec3]) -> Self {
        let n = rows.len();
        let mut distances = Matrix::zeros(n * n, 1);
        for k in 0..n {
            for j in 0..n {
                distances.set(k * n + j, 0, euclidean_distance_3d(&locations[k], &locations[j]));
            }
        }
        let h0 = if n == 0 {
            Matrix::zeros(0, 0)
        } else {
            Matrix::from_rows(rows)
        };
        Self {
            node_ids,
            h0,
            distances,
        }
    }

    /// All graph nodes in id order.
    pub fn from_graph(graph: &GlobalGraph) -> Self {
        let nodes: Vec<_> = graph.nodes().collect();
        let rows: Vec<Vec<f64>> = nodes.iter().map(|n| build_node_input(n)).collect();
        let locations: Vec<Vec3> = nodes.iter().map(|n| n.location).collect();
        Self::from_rows(nodes.iter().map(|n| n.id).collect(), &rows, &locations)
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }
}

/// Output of the self-attention stack on a tape.
pub struct SelfAttnOutput {
    /// `N x D_Z` node embeddings.
    pub h: Var,
    /// `N² x D_Z` ordered-pair edge embeddings.
    pub e: Var,
    /// Per layer, per head: `N² x d_head` attention weights; each block of
    /// `N` rows (one query node) sums to 1 per column.
    pub attention: Vec<Vec<Var>>,
}

pub struct CrossAttnOutput {
    /// `N_T x D_Z` decoded tracklet embeddings.
    pub z: Var,
    /// Per layer, per head: `(N_T·N_O) x 1` weights, blocks of `N_O` rows.
    pub attention: Vec<Vec<Var>>,
}

/// Decoded motion/box prediction for one tracklet or detection.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackPrediction {
    pub location: Vec3,
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_logits: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl TrackPrediction {
    /// Decodes a raw head row relative to the previous state: location delta
    /// is added, log-size is exponentiated onto the previous size and yaw
    /// delta is added.
    pub fn decode(raw: &[f64], prev_location: Vec3, prev_size: [f64; 3], prev_yaw: f64, embedding: Vec<f64>) -> Self {
        Self {
            location: prev_location + Vec3::new(raw[0], raw[1], raw[2]),
            size: [
                prev_size[0] * raw[3].exp(),
                prev_size[1] * raw[4].exp(),
                prev_size[2] * raw[5].exp(),
            ],
            yaw: prev_yaw + raw[6],
            class_logits: raw[7..].to_vec(),
            embedding,
        }
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("sizes agree")
}

fn is_weight(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or("");
    !matches!(last, "b" | "b1" | "b2" | "gain" | "bias") || name.starts_with("edge_in.")
}

impl Gtn {
    pub fn new(config: GtnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = config
            .param_shapes()
            .into_iter()
            .map(|(name, (r, c))| {
                let value = if name.ends_with(".gain") {
                    Matrix::filled(r, c, 1.0)
                } else if is_weight(&name) {
                    xavier(&mut rng, r, c)
                } else {
                    Matrix::zeros(r, c)
                };
                (name, value)
            })
            .collect();
        Ok(Self {
            config,
            params: ParamSet::new(entries),
        })
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape) -> Bound<'a> {
        Bound::new(tape, &self.params)
    }

    fn ffn(&self, tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let hid = tape.matmul(x, p.var(&format!("{prefix}.w1"))).in_layer(prefix)?;
        let hid = tape.add_row(hid, p.var(&format!("{prefix}.b1"))).in_layer(prefix)?;
        let hid = tape.relu(hid);
        let out = tape.matmul(hid, p.var(&format!("{prefix}.w2"))).in_layer(prefix)?;
        tape.add_row(out, p.var(&format!("{prefix}.b2"))).in_layer(prefix)
    }

    fn norm(&self, tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        tape.layer_norm_rows(x, p.var(&format!("{prefix}.gain")), p.var(&format!("{prefix}.bias")))
            .in_layer(prefix)
    }

    /// Node inputs and distances with the configured feature and location
    /// scales applied.
    pub fn scaled_inputs(&self, inputs: &GraphInputs) -> (Matrix, Matrix) {
        let (df, c) = (self.config.d_f, self.config.num_cameras);
        let mut h0 = inputs.h0.clone();
        for r in 0..h0.rows() {
            let row = h0.row_mut(r);
            row[..df].iter_mut().for_each(|v| *v *= self.config.feature_scale);
            row[df + c..].iter_mut().for_each(|v| *v /= self.config.location_scale);
        }
        let mut d = inputs.distances.clone();
        d.as_mut_slice().iter_mut().for_each(|v| *v /= self.config.location_scale);
        (h0, d)
    }

    /// `e⁰_kj = d_kj · w + b` for every ordered pair.
    pub fn initial_edges(&self, tape: &mut Tape, p: &Bound, distances: Var) -> Result<Var> {
        let e = tape.matmul(distances, p.var("edge_in.w")).in_layer("edge_in")?;
        tape.add_row(e, p.var("edge_in.b")).in_layer("edge_in")
    }

    /// One self-attention layer over `n` nodes.
    pub fn self_layer(
        &self,
        tape: &mut Tape,
        p: &Bound,
        l: usize,
        h: Var,
        e: Var,
        n: usize,
    ) -> Result<(Var, Var, Vec<Var>)> {
        let name = format!("self.{l}");
        let pv = |s: &str| p.var(&format!("{name}.{s}"));
        let dh = self.config.d_head();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = tape.matmul(h, pv("q")).in_layer(&name)?;
        let k = tape.matmul(h, pv("k")).in_layer(&name)?;
        let v = tape.matmul(h, pv("v")).in_layer(&name)?;
        let ee = tape.matmul(e, pv("e")).in_layer(&name)?;
        let value_rows: Vec<usize> = (0..n * n).map(|i| i % n).collect();

        let (mut messages, mut raw, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..self.config.heads {
            let qi = tape.slice_cols(q, i * dh, dh).in_layer(&name)?;
            let ki = tape.slice_cols(k, i * dh, dh).in_layer(&name)?;
            let vi = tape.slice_cols(v, i * dh, dh).in_layer(&name)?;
            let ei = tape.slice_cols(ee, i * dh, dh).in_layer(&name)?;
            let kt = tape.transpose(ki);
            let s = tape.matmul(qi, kt).in_layer(&name)?;
            let s = tape.scale(s, scale);
            let s = tape.reshape(s, n * n, 1).in_layer(&name)?;
            let w_raw = tape.mul_col(ei, s).in_layer(&name)?;
            let w = tape.segment_softmax(w_raw, n).in_layer(&name)?;
            let vj = tape.gather_rows(vi, &value_rows).in_layer(&name)?;
            let m = tape.mul(w, vj).in_layer(&name)?;
            messages.push(tape.segment_sum(m, n).in_layer(&name)?);
            raw.push(w_raw);
            weights.push(w);
        }
        let hcat = tape.concat_cols(&messages).in_layer(&name)?;
        let h_att = tape.matmul(hcat, pv("o_h")).in_layer(&name)?;
        let ecat = tape.concat_cols(&raw).in_layer(&name)?;
        let e_att = tape.matmul(ecat, pv("o_e")).in_layer(&name)?;

        let h_res = match p.try_var(&format!("{name}.res")) {
            Some(res) => tape.matmul(h, res).in_layer(&name)?,
            None => h,
        };
        let h1 = tape.add(h_res, h_att).in_layer(&name)?;
        let h1 = self.norm(tape, p, &format!("{name}.norm_h1"), h1)?;
        let f = self.ffn(tape, p, &format!("{name}.ffn_h"), h1)?;
        let h2 = tape.add(h1, f).in_layer(&name)?;
        let h2 = self.norm(tape, p, &format!("{name}.norm_h2"), h2)?;

        let e1 = tape.add(e, e_att).in_layer(&name)?;
        let e1 = self.norm(tape, p, &format!("{name}.norm_e1"), e1)?;
        let f = self.ffn(tape, p, &format!("{name}.ffn_e"), e1)?;
        let e2 = tape.add(e1, f).in_layer(&name)?;
        let e2 = self.norm(tape, p, &format!("{name}.norm_e2"), e2)?;
        Ok((h2, e2, weights))
    }

    /// The full self-attention stack on prepared inputs.
    pub fn self_attention(&self, tape: &mut Tape, p: &Bound, inputs: &GraphInputs) -> Result<SelfAttnOutput> {
        let n = inputs.len();
        if n == 0 {
            return Err(GtnError::Config("self-attention needs at least one node".into()));
        }
        if inputs.h0.cols() != self.config.d_e() {
            return Err(GtnError::Shape {
                layer: "self.0".into(),
                source: NumericError::Shape {
                    op: "node input",
                    lhs: inputs.h0.shape(),
                    rhs: (self.config.d_e(), self.config.d_z),
                },
            });
        }
        let (h0, d) = self.scaled_inputs(inputs);
        let mut h = tape.leaf(h0);
        let d = tape.leaf(d);
        let mut e = self.initial_edges(tape, p, d)?;
        let mut attention = Vec::new();
        for l in 0..self.config.self_layers {
            let (h2, e2, w) = self.self_layer(tape, p, l, h, e, n)?;
            h = h2;
            e = e2;
            attention.push(w);
        }
        Ok(SelfAttnOutput { h, e, attention })
    }

    /// One cross-attention layer: tracklets query detections.
    pub fn cross_layer(&self, tape: &mut Tape, p: &Bound, l: usize, xt: Var, xo: Var) -> Result<(Var, Vec<Var>)> {
        let name = format!("cross.{l}");
        let pv = |s: &str| p.var(&format!("{name}.{s}"));
        let (nt, no) = (tape.shape(xt).0, tape.shape(xo).0);
        let dh = self.config.d_head();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = tape.matmul(xt, pv("q")).in_layer(&name)?;
        let k = tape.matmul(xo, pv("k")).in_layer(&name)?;
        let v = tape.matmul(xo, pv("v")).in_layer(&name)?;
        let value_rows: Vec<usize> = (0..nt * no).map(|i| i % no).collect();
        let (mut heads, mut weights) = (Vec::new(), Vec::new());
        for i in 0..self.config.heads {
            let qi = tape.slice_cols(q, i * dh, dh).in_layer(&name)?;
            let ki = tape.slice_cols(k, i * dh, dh).in_layer(&name)?;
            let vi = tape.slice_cols(v, i * dh, dh).in_layer(&name)?;
            let kt = tape.transpose(ki);
            let s = tape.matmul(qi, kt).in_layer(&name)?;
            let s = tape.scale(s, scale);
            let s = tape.reshape(s, nt * no, 1).in_layer(&name)?;
            let w = tape.segment_softmax(s, no).in_layer(&name)?;
            let vj = tape.gather_rows(vi, &value_rows).in_layer(&name)?;
            let m = tape.mul_col(vj, w).in_layer(&name)?;
            heads.push(tape.segment_sum(m, no).in_layer(&name)?);
            weights.push(w);
        }
        let cat = tape.concat_cols(&heads).in_layer(&name)?;
        let att = tape.matmul(cat, pv("o_z")).in_layer(&name)?;
        let x1 = tape.add(xt, att).in_layer(&name)?;
        let x1 = self.norm(tape, p, &format!("{name}.norm1"), x1)?;
        let f = self.ffn(tape, p, &format!("{name}.ffn"), x1)?;
        let x2 = tape.add(x1, f).in_layer(&name)?;
        let x2 = self.norm(tape, p, &format!("{name}.norm2"), x2)?;
        Ok((x2, weights))
    }

    /// Cross-attention stack followed by the residual head FFN. With no
    /// detections the attention layers are skipped.
    pub fn cross_attention(&self, tape: &mut Tape, p: &Bound, xt: Var, xo: Option<Var>) -> Result<CrossAttnOutput> {
        let mut x = xt;
        let mut attention = Vec::new();
        if let Some(xo) = xo.filter(|&xo| tape.shape(xo).0 > 0) {
            for l in 0..self.config.cross_layers {
                let (x2, w) = self.cross_layer(tape, p, l, x, xo)?;
                x = x2;
                attention.push(w);
            }
        }
        let f = self.ffn(tape, p, "head.ffn", x)?;
        let z = tape.add(x, f).in_layer("head.ffn")?;
        Ok(CrossAttnOutput { z, attention })
    }

    /// Raw linear head outputs, one row per input row.
    pub fn head(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let out = tape.matmul(z, p.var("head.out.w")).in_layer("head.out")?;
        tape.add_row(out, p.var("head.out.b")).in_layer("head.out")
    }

    /// Value-only decode of one embedding, for inference.
    pub fn decode_track_outputs(
        &self,
        z: &[f64],
        prev_location: Vec3,
        prev_size: [f64; 3],
        prev_yaw: f64,
    ) -> TrackPrediction {
        let w = self.params.by_name("head.out.w").expect("head weights");
        let b = self.params.by_name("head.out.b").expect("head bias");
        let raw: Vec<f64> = (0..w.cols())
            .map(|c| b.get(0, c) + z.iter().enumerate().map(|(r, zr)| zr * w.get(r, c)).sum::<f64>())
            .collect();
        TrackPrediction::decode(&raw, prev_location, prev_size, prev_yaw, z.to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let tensors = self
            .params
            .iter()
            .map(|(name, m)| {
                (
                    name.to_string(),
                    Tensor {
                        shape: [m.rows(), m.cols()],
                        data: m.as_slice().to_vec(),
                    },
                )
            })
            .collect();
        let ckpt = Checkpoint {
            config: self.config.clone(),
            tensors,
        };
        serde_json::to_string(&ckpt).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut ckpt: Checkpoint = serde_json::from_str(text)?;
        ckpt.config.validate()?;
        let mut entries = Vec::new();
        for (name, shape) in ckpt.config.param_shapes() {
            let t = ckpt
                .tensors
                .remove(&name)
                .ok_or_else(|| GtnError::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape != [shape.0, shape.1] {
                return Err(GtnError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape, shape
                )));
            }
            let m = Matrix::from_vec(shape.0, shape.1, t.data)
                .map_err(|e| GtnError::Checkpoint(format!("tensor `{name}`: {e}")))?;
            if !m.is_finite() {
                return Err(GtnError::Checkpoint(format!("tensor `{name}` is not finite")));
            }
            entries.push((name, m));
        }
        if let Some(extra) = ckpt.tensors.keys().next() {
            return Err(GtnError::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self {
            config: ckpt.config,
            params: ParamSet::new(entries),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: GtnConfig,
    tensors: BTreeMap<String, Tensor>,
}
