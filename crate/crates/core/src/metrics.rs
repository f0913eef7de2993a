//! Detection metrics (AP over BEV center distance, TP errors, NDS) and
//! tracking metrics (CLEAR MOT, AMOTA/AMOTP).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::hungarian;
use crate::geometry::wrap_angle;
use crate::graph::Detection;
use crate::numeric::Matrix;
use crate::simulator::GtRecord;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("metric `{0}` is missing or not applicable")]
    MissingComponent(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetEvalConfig {
    pub center_dist_thresholds: Vec<f64>,
    pub tp_threshold: f64,
}

impl Default for DetEvalConfig {
    fn default() -> Self {
        Self {
            center_dist_thresholds: vec![0.5, 1.0, 2.0, 4.0],
            tp_threshold: 2.0,
        }
    }
}

impl DetEvalConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.center_dist_thresholds;
        let ascending = t.windows(2).all(|w| w[0] < w[1]);
        if t.is_empty() || !ascending || t[0] <= 0.0 || !(self.tp_threshold > 0.0) {
            return Err(MetricsError::Config(
                "thresholds must be positive and strictly ascending".into(),
            ));
        }
        Ok(())
    }
}

/// Metric values (`None` when not applicable), per-class breakdown and counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metrics: BTreeMap<String, Option<f64>>,
    pub per_class: BTreeMap<String, BTreeMap<String, Option<f64>>>,
    pub counts: BTreeMap<String, u64>,
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied().flatten()
    }

    pub fn count(&self, name: &str) -> u64 {
        self.counts.get(name).copied().unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// A scored box for detection evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBox {
    pub frame: u64,
    pub camera: String,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class: String,
    pub score: f64,
    pub velocity: Option<[f64; 3]>,
    pub attribute: Option<String>,
}

impl From<&Detection> for EvalBox {
    fn from(d: &Detection) -> Self {
        Self {
            frame: d.frame,
            camera: d.camera.clone(),
            center: d.center,
            size: d.size,
            yaw: d.yaw,
            class: d.class.clone(),
            score: d.score,
            velocity: None,
            attribute: None,
        }
    }
}

impl From<&GtRecord> for EvalBox {
    fn from(g: &GtRecord) -> Self {
        Self {
            frame: g.frame,
            camera: g.camera.clone(),
            center: g.center,
            size: g.size,
            yaw: g.yaw,
            class: g.class.clone(),
            score: 1.0,
            velocity: Some(g.velocity),
            attribute: None,
        }
    }
}

fn bev_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Predictions by descending score, ties broken on a canonical key so the
/// result does not depend on input order.
fn ranked<'a>(preds: &[&'a EvalBox]) -> Vec<&'a EvalBox> {
    let mut p = preds.to_vec();
    p.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.frame.cmp(&b.frame))
            .then(a.camera.cmp(&b.camera))
            .then(a.center[0].total_cmp(&b.center[0]))
            .then(a.center[1].total_cmp(&b.center[1]))
            .then(a.center[2].total_cmp(&b.center[2]))
    });
    p
}

/// Greedy matching by descending score to the nearest unmatched gt in the
/// same frame and camera. Returns, per ranked prediction, the matched gt
/// index and distance.
fn greedy_match(preds: &[&EvalBox], gt: &[&EvalBox], threshold: f64) -> Vec<Option<(usize, f64)>> {
    let mut by_key: BTreeMap<(u64, &str), Vec<usize>> = BTreeMap::new();
    for (i, g) in gt.iter().enumerate() {
        by_key.entry((g.frame, g.camera.as_str())).or_default().push(i);
    }
    let mut taken = vec![false; gt.len()];
    preds
        .iter()
        .map(|p| {
            let cands = by_key.get(&(p.frame, p.camera.as_str()))?;
            let mut best: Option<(usize, f64)> = None;
            for &g in cands {
                if taken[g] {
                    continue;
                }
                let d = bev_distance(&p.center, &gt[g].center);
                if d <= threshold && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((g, d));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            best
        })
        .collect()
}

/// 101-point interpolated average precision.
fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 || tp.is_empty() {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        if let Some(i) = recall.iter().position(|&x| x >= r - 1e-12) {
            sum += precision[i];
        }
    }
    sum / 101.0
}

/// Scale error after aligning centers and orientation.
fn aligned_iou(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let inter: f64 = (0..3).map(|i| a[i].min(b[i])).product();
    let va: f64 = a.iter().product();
    let vb: f64 = b.iter().product();
    inter / (va + vb - inter)
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

pub const TP_ERRORS: [&str; 5] = ["mATE", "mASE", "mAOE", "mAVE", "mAAE"];

/// AP per class and center-distance threshold, and true-positive errors.
pub fn eval_detection(preds: &[EvalBox], gt: &[EvalBox], cfg: &DetEvalConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let mut report = MetricReport::default();
    let classes: BTreeSet<&str> = gt.iter().chain(preds).map(|b| b.class.as_str()).collect();
    let mut aps = Vec::new();
    let mut tp_err: BTreeMap<&str, Vec<Option<f64>>> = TP_ERRORS.iter().map(|&k| (k, Vec::new())).collect();
    let (mut tp_total, mut fp_total, mut gt_total) = (0u64, 0u64, 0u64);
    for class in classes {
        let g: Vec<&EvalBox> = gt.iter().filter(|b| b.class == class).collect();
        let p: Vec<&EvalBox> = preds.iter().filter(|b| b.class == class).collect();
        let p = ranked(&p);
        if g.is_empty() {
            report.notes.push(format!("class `{class}` has no ground truth and is skipped"));
            fp_total += p.len() as u64;
            continue;
        }
        let mut row = BTreeMap::new();
        let mut class_aps = Vec::new();
        for &t in &cfg.center_dist_thresholds {
            let m = greedy_match(&p, &g, t);
            let hits: Vec<bool> = m.iter().map(Option::is_some).collect();
            let ap = average_precision(&hits, g.len());
            row.insert(format!("AP@{t}"), Some(ap));
            class_aps.push(ap);
        }
        let class_ap = mean(&class_aps).expect("thresholds non-empty");
        row.insert("AP".into(), Some(class_ap));
        aps.push(class_ap);

        let m = greedy_match(&p, &g, cfg.tp_threshold);
        let (mut ate, mut ase, mut aoe, mut ave, mut aae) = (vec![], vec![], vec![], vec![], vec![]);
        for (pred, hit) in p.iter().zip(&m) {
            let Some((gi, d)) = hit else {
                continue;
            };
            let gb = g[*gi];
            ate.push(*d);
            ase.push(1.0 - aligned_iou(&pred.size, &gb.size));
            aoe.push(wrap_angle(pred.yaw - gb.yaw).abs());
            if let (Some(vp), Some(vg)) = (pred.velocity, gb.velocity) {
                ave.push(((vp[0] - vg[0]).powi(2) + (vp[1] - vg[1]).powi(2)).sqrt());
            }
            if let (Some(ap), Some(ag)) = (&pred.attribute, &gb.attribute) {
                aae.push(if ap == ag { 0.0 } else { 1.0 });
            }
        }
        let tp = m.iter().filter(|x| x.is_some()).count() as u64;
        tp_total += tp;
        fp_total += p.len() as u64 - tp;
        gt_total += g.len() as u64;
        for (name, values) in [("mATE", &ate), ("mASE", &ase), ("mAOE", &aoe), ("mAVE", &ave), ("mAAE", &aae)] {
            let v = mean(values);
            row.insert(name.to_string(), v);
            tp_err.get_mut(name).expect("metric").push(v);
        }
        report.per_class.insert(class.to_string(), row);
    }
    report.metrics.insert("mAP".into(), Some(mean(&aps).unwrap_or(0.0)));
    for (name, values) in tp_err {
        // a component is applicable when some class produced a value
        let present: Vec<f64> = values.into_iter().flatten().collect();
        report.metrics.insert(name.to_string(), mean(&present));
    }
    report.counts.insert("TP".into(), tp_total);
    report.counts.insert("FP".into(), fp_total);
    report.counts.insert("FN".into(), gt_total - tp_total);
    report.counts.insert("GT".into(), gt_total);
    let recall = (gt_total > 0).then(|| tp_total as f64 / gt_total as f64);
    report.metrics.insert("recall".into(), recall);
    let nds = compute_nds(&report).ok();
    if nds.is_none() {
        report.notes.push("NDS not applicable: a TP error component is missing".into());
    }
    report.metrics.insert("NDS".into(), nds);
    Ok(report)
}

/// `(5·mAP + Σ (1 − min(1, mTP))) / 10`.
pub fn compute_nds(report: &MetricReport) -> Result<f64> {
    let get = |k: &str| report.get(k).ok_or_else(|| MetricsError::MissingComponent(k.to_string()));
    let map = get("mAP")?;
    let mut sum = 5.0 * map;
    for k in TP_ERRORS {
        sum += 1.0 - get(k)?.min(1.0);
    }
    Ok(sum / 10.0)
}

/// False positives among the highest-scored predictions needed to reach
/// `recall` at the TP threshold; `None` if that recall is never reached.
pub fn false_positives_at_recall(preds: &[EvalBox], gt: &[EvalBox], cfg: &DetEvalConfig, recall: f64) -> Option<u64> {
    let mut fp_total = 0u64;
    let mut needed_tp = 0u64;
    let mut per_class = Vec::new();
    for class in gt.iter().map(|b| b.class.as_str()).collect::<BTreeSet<_>>() {
        let g: Vec<&EvalBox> = gt.iter().filter(|b| b.class == class).collect();
        let p: Vec<&EvalBox> = preds.iter().filter(|b| b.class == class).collect();
        let p = ranked(&p);
        let m = greedy_match(&p, &g, cfg.tp_threshold);
        per_class.push((p, m));
    }
    let total_gt = gt.len() as f64;
    // pool predictions over classes in global score order
    let mut pooled: Vec<(f64, bool)> = per_class
        .iter()
        .flat_map(|(p, m)| p.iter().zip(m).map(|(b, hit)| (b.score, hit.is_some())))
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let target = (recall * total_gt - 1e-9).ceil().max(0.0) as u64;
    if target == 0 {
        return Some(0);
    }
    for (_, hit) in pooled {
        if hit {
            needed_tp += 1;
        } else {
            fp_total += 1;
        }
        if needed_tp >= target {
            return Some(fp_total);
        }
    }
    None
}

/// A frame-stamped box with a track identity.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackBox {
    pub frame: u64,
    pub id: u64,
    pub center: [f64; 3],
    pub score: f64,
}

/// One box per `(frame, track_id)`, from per-camera ground-truth rows.
pub fn gt_tracks(records: &[GtRecord]) -> Vec<TrackBox> {
    let mut seen = BTreeMap::new();
    for g in records {
        seen.entry((g.frame, g.track_id)).or_insert(TrackBox {
            frame: g.frame,
            id: g.track_id,
            center: g.center,
            score: 1.0,
        });
    }
    seen.into_values().collect()
}

pub const DEFAULT_MOT_THRESHOLD: f64 = 2.0;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct MotCounts {
    gt: u64,
    tp: u64,
    fp: u64,
    fn_: u64,
    ids: u64,
    dist_sum: f64,
}

struct MotOutcome {
    counts: MotCounts,
    frag: u64,
    mt: u64,
    ml: u64,
    tracks: u64,
}

fn run_clearmot(preds: &[&TrackBox], gt: &[TrackBox], threshold: f64) -> MotOutcome {
    let mut frames: BTreeSet<u64> = gt.iter().map(|b| b.frame).collect();
    frames.extend(preds.iter().map(|b| b.frame));
    let mut gt_by: BTreeMap<u64, Vec<&TrackBox>> = BTreeMap::new();
    for g in gt {
        gt_by.entry(g.frame).or_default().push(g);
    }
    let mut pr_by: BTreeMap<u64, Vec<&TrackBox>> = BTreeMap::new();
    for &p in preds {
        pr_by.entry(p.frame).or_default().push(p);
    }
    let mut c = MotCounts::default();
    let mut current: BTreeMap<u64, u64> = BTreeMap::new();
    let mut last_id: BTreeMap<u64, u64> = BTreeMap::new();
    let mut history: BTreeMap<u64, Vec<bool>> = BTreeMap::new();
    for f in frames {
        let g = gt_by.remove(&f).unwrap_or_default();
        let p = pr_by.remove(&f).unwrap_or_default();
        let mut g_used = vec![false; g.len()];
        let mut p_used = vec![false; p.len()];
        let mut matches: Vec<(usize, usize, f64)> = Vec::new();
        // keep previous correspondences that are still valid
        for (gi, gb) in g.iter().enumerate() {
            let Some(&pid) = current.get(&gb.id) else {
                continue;
            };
            if let Some(pi) = p.iter().position(|pb| pb.id == pid) {
                let d = bev_distance(&gb.center, &p[pi].center);
                if d <= threshold && !p_used[pi] {
                    g_used[gi] = true;
                    p_used[pi] = true;
                    matches.push((gi, pi, d));
                }
            }
        }
        let gr: Vec<usize> = (0..g.len()).filter(|&i| !g_used[i]).collect();
        let pr: Vec<usize> = (0..p.len()).filter(|&i| !p_used[i]).collect();
        if !gr.is_empty() && !pr.is_empty() {
            let big = threshold * 1e3 + 1e6;
            let mut cost = Matrix::zeros(gr.len(), pr.len());
            for (r, &gi) in gr.iter().enumerate() {
                for (cc, &pi) in pr.iter().enumerate() {
                    let d = bev_distance(&g[gi].center, &p[pi].center);
                    cost.set(r, cc, if d <= threshold { d } else { big });
                }
            }
            for (r, cc) in hungarian(&cost).pairs {
                let (gi, pi) = (gr[r], pr[cc]);
                let d = bev_distance(&g[gi].center, &p[pi].center);
                if d <= threshold {
                    g_used[gi] = true;
                    p_used[pi] = true;
                    matches.push((gi, pi, d));
                }
            }
        }
        for &(gi, pi, d) in &matches {
            let (gid, pid) = (g[gi].id, p[pi].id);
            if last_id.get(&gid).is_some_and(|&prev| prev != pid) {
                c.ids += 1;
            }
            last_id.insert(gid, pid);
            current.insert(gid, pid);
            c.tp += 1;
            c.dist_sum += d;
        }
        for (gi, gb) in g.iter().enumerate() {
            history.entry(gb.id).or_default().push(g_used[gi]);
            if !g_used[gi] {
                current.remove(&gb.id);
            }
        }
        c.gt += g.len() as u64;
        c.fn_ += g_used.iter().filter(|u| !**u).count() as u64;
        c.fp += p_used.iter().filter(|u| !**u).count() as u64;
    }
    let (mut frag, mut mt, mut ml) = (0, 0, 0);
    for h in history.values() {
        let covered = h.iter().filter(|x| **x).count() as f64 / h.len() as f64;
        if covered >= 0.8 {
            mt += 1;
        } else if covered < 0.2 {
            ml += 1;
        }
        // tracked -> untracked -> tracked again
        let first = h.iter().position(|x| *x);
        let last = h.iter().rposition(|x| *x);
        if let (Some(a), Some(b)) = (first, last) {
            frag += h[a..=b].windows(2).filter(|w| w[0] && !w[1]).count() as u64;
        }
    }
    MotOutcome {
        counts: c,
        frag,
        mt,
        ml,
        tracks: history.len() as u64,
    }
}

/// CLEAR MOT with BEV center distance gating at `threshold` meters.
pub fn eval_clearmot(preds: &[TrackBox], gt: &[TrackBox], threshold: f64) -> MetricReport {
    let refs: Vec<&TrackBox> = preds.iter().collect();
    let o = run_clearmot(&refs, gt, threshold);
    let c = o.counts;
    let mut report = MetricReport::default();
    let mota = (c.gt > 0).then(|| 1.0 - (c.fn_ + c.fp + c.ids) as f64 / c.gt as f64);
    let motp = (c.tp > 0).then(|| c.dist_sum / c.tp as f64);
    report.metrics.insert("MOTA".into(), mota);
    report.metrics.insert("MOTP".into(), motp);
    report.metrics.insert("recall".into(), (c.gt > 0).then(|| c.tp as f64 / c.gt as f64));
    for (k, v) in [
        ("GT", c.gt),
        ("TP", c.tp),
        ("FP", c.fp),
        ("FN", c.fn_),
        ("IDS", c.ids),
        ("FRAG", o.frag),
        ("MT", o.mt),
        ("ML", o.ml),
        ("GT_TRACKS", o.tracks),
    ] {
        report.counts.insert(k.into(), v);
    }
    let ids: BTreeSet<u64> = preds.iter().map(|p| p.id).collect();
    report.counts.insert("PRED_TRACKS".into(), ids.len() as u64);
    report
}

pub const AMOTA_RECALL_POINTS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub recall_threshold: f64,
    pub score_threshold: Option<f64>,
    pub achieved_recall: f64,
    /// Recall-normalized MOTA, `max(0, 1 − (IDS + FP) / TP)`.
    pub motar: f64,
    pub motp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmotaResult {
    pub amota: f64,
    pub amotp: f64,
    pub sweep: Vec<SweepPoint>,
}

/// Average recall-normalized MOTA over recall thresholds `k / 40`. For each
/// threshold the highest score cutoff reaching that recall is used.
/// Thresholds that are never reached contribute MOTAR 0 and MOTP equal to
/// the gating distance.
pub fn eval_amota_amotp(preds: &[TrackBox], gt: &[TrackBox], threshold: f64) -> AmotaResult {
    let mut cutoffs: Vec<f64> = preds.iter().map(|p| p.score).collect();
    cutoffs.sort_by(|a, b| b.total_cmp(a));
    cutoffs.dedup();
    let n_gt = gt.len() as f64;
    let evaluated: Vec<(f64, MotCounts)> = cutoffs
        .iter()
        .map(|&s| {
            let kept: Vec<&TrackBox> = preds.iter().filter(|p| p.score >= s).collect();
            (s, run_clearmot(&kept, gt, threshold).counts)
        })
        .collect();
    let mut sweep = Vec::with_capacity(AMOTA_RECALL_POINTS);
    for k in 1..=AMOTA_RECALL_POINTS {
        let r = k as f64 / AMOTA_RECALL_POINTS as f64;
        let hit = evaluated
            .iter()
            .find(|(_, c)| n_gt > 0.0 && c.tp as f64 / n_gt >= r - 1e-12);
        sweep.push(match hit {
            Some((s, c)) => SweepPoint {
                recall_threshold: r,
                score_threshold: Some(*s),
                achieved_recall: c.tp as f64 / n_gt,
                motar: (1.0 - (c.ids + c.fp) as f64 / c.tp as f64).max(0.0),
                motp: Some(c.dist_sum / c.tp as f64),
            },
            None => SweepPoint {
                recall_threshold: r,
                score_threshold: None,
                achieved_recall: 0.0,
                motar: 0.0,
                motp: None,
            },
        });
    }
    let amota = sweep.iter().map(|p| p.motar).sum::<f64>() / sweep.len() as f64;
    let amotp = sweep.iter().map(|p| p.motp.unwrap_or(threshold)).sum::<f64>() / sweep.len() as f64;
    AmotaResult { amota, amotp, sweep }
}

/// CLEAR MOT plus AMOTA/AMOTP in one report.
pub fn eval_tracking(preds: &[TrackBox], gt: &[TrackBox], threshold: f64) -> MetricReport {
    let mut report = eval_clearmot(preds, gt, threshold);
    let a = eval_amota_amotp(preds, gt, threshold);
    report.metrics.insert("AMOTA".into(), Some(a.amota));
    report.metrics.insert("AMOTP".into(), Some(a.amotp));
    report
}
