//! Detection metrics: per-class AP, grouped mAP, recall@K and harmonic means
//! for the zero-/few-/any-shot protocols and their generalized variants.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentModel;
use crate::detector::{
    detection_order, iou, nms, predict, BoundingBox, Detection, NMS_IOU, POSITIVE_IOU, SCORE_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::semantics::{Partition, SemanticMatrix};
use crate::synthdata::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EvalMode {
    Zsd,
    Fsd,
    Asd,
    Gzsd,
    Gfsd,
    Gasd,
}

impl EvalMode {
    pub const ALL: [EvalMode; 6] = [
        EvalMode::Zsd,
        EvalMode::Fsd,
        EvalMode::Asd,
        EvalMode::Gzsd,
        EvalMode::Gfsd,
        EvalMode::Gasd,
    ];

    pub fn is_generalized(self) -> bool {
        matches!(self, EvalMode::Gzsd | EvalMode::Gfsd | EvalMode::Gasd)
    }

    /// Groups whose mAP enters the report (and its harmonic mean).
    pub fn reported_groups(self) -> &'static [Partition] {
        use Partition::*;
        match self {
            EvalMode::Zsd => &[Unseen],
            EvalMode::Fsd => &[FewShot],
            EvalMode::Asd => &[FewShot, Unseen],
            EvalMode::Gzsd => &[Seen, Unseen],
            EvalMode::Gfsd => &[Seen, FewShot],
            EvalMode::Gasd => &[Seen, FewShot, Unseen],
        }
    }

    /// Class indices scored by the detector in this mode.
    pub fn scored_classes(self, semantics: &SemanticMatrix) -> Vec<usize> {
        if self.is_generalized() {
            semantics.all_indices()
        } else {
            semantics.indices(self.reported_groups())
        }
    }

    pub fn check(self, semantics: &SemanticMatrix) -> Result<()> {
        for &group in self.reported_groups() {
            if semantics.count(group) == 0 {
                return Err(Error::ModeMismatch {
                    mode: self.to_string(),
                    reason: format!("the split has no {group} classes"),
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Zsd => "ZSD",
            EvalMode::Fsd => "FSD",
            EvalMode::Asd => "ASD",
            EvalMode::Gzsd => "GZSD",
            EvalMode::Gfsd => "GFSD",
            EvalMode::Gasd => "GASD",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown evaluation mode `{s}`")))
    }
}

/// A detection tagged with the scene it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneDetection {
    pub scene: usize,
    pub det: Detection,
}

/// A ground-truth box tagged with its scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneBox {
    pub scene: usize,
    pub bbox: BoundingBox,
}

fn scene_det_order(a: &SceneDetection, b: &SceneDetection) -> std::cmp::Ordering {
    detection_order(&a.det, &b.det).then(a.scene.cmp(&b.scene))
}

/// True/false-positive flags for detections of one class, in descending
/// score order. Each detection claims the unmatched box it overlaps most.
fn match_flags(dets: &[SceneDetection], gt: &[SceneBox], iou_thr: f64) -> Vec<bool> {
    let mut order: Vec<&SceneDetection> = dets.iter().collect();
    order.sort_by(|a, b| scene_det_order(a, b));
    let mut taken = vec![false; gt.len()];
    order
        .into_iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gt.iter().enumerate() {
                if taken[j] || g.scene != d.scene {
                    continue;
                }
                let o = iou(&d.det.bbox, &g.bbox);
                if o >= iou_thr && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-points interpolated average precision for a single class.
/// Returns 0 when there is no ground truth or no detection.
pub fn average_precision(dets: &[SceneDetection], gt: &[SceneBox], iou_thr: f64) -> f64 {
    if gt.is_empty() || dets.is_empty() {
        return 0.0;
    }
    let flags = match_flags(dets, gt, iou_thr);
    let mut recall = Vec::with_capacity(flags.len() + 2);
    let mut precision = Vec::with_capacity(flags.len() + 2);
    recall.push(0.0);
    precision.push(0.0);
    let mut tp = 0usize;
    for (i, &hit) in flags.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / gt.len() as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    // precision envelope, right to left
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len())
        .filter(|&i| recall[i] != recall[i - 1])
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum()
}

/// Fraction of ground-truth boxes recovered by the `k` best detections of
/// each scene (class must agree).
pub fn recall_at_k(
    dets_per_scene: &[Vec<Detection>],
    gt_per_scene: &[Vec<(BoundingBox, usize)>],
    k: usize,
    iou_thr: f64,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("recall@k needs k >= 1".into()));
    }
    let total: usize = gt_per_scene.iter().map(Vec::len).sum();
    if total == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (s, gt) in gt_per_scene.iter().enumerate() {
        let mut dets = dets_per_scene.get(s).cloned().unwrap_or_default();
        dets.sort_by(detection_order);
        dets.truncate(k);
        let mut taken = vec![false; gt.len()];
        for d in &dets {
            let mut best: Option<(usize, f64)> = None;
            for (j, (b, c)) in gt.iter().enumerate() {
                if taken[j] || *c != d.class_id {
                    continue;
                }
                let o = iou(&d.bbox, b);
                if o >= iou_thr && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / total as f64)
}

/// `n / sum(1 / v)`, or 0 if any value is 0.
pub fn harmonic_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("harmonic mean"));
    }
    if values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Domain("harmonic mean needs finite non-negative values".into()));
    }
    if values.contains(&0.0) {
        return Ok(0.0);
    }
    Ok(values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>())
}

/// Detection thresholds used at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub score: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
    pub recall_k: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            score: SCORE_THRESHOLD,
            nms_iou: NMS_IOU,
            match_iou: POSITIVE_IOU,
            recall_k: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub iou_threshold: f64,
    pub per_class_ap: BTreeMap<String, f64>,
    pub map_seen: Option<f64>,
    pub map_few: Option<f64>,
    pub map_unseen: Option<f64>,
    pub hm: f64,
    pub recall_at_100: f64,
}

impl EvalReport {
    pub fn group_map(&self, group: Partition) -> Option<f64> {
        match group {
            Partition::Seen => self.map_seen,
            Partition::FewShot => self.map_few,
            Partition::Unseen => self.map_unseen,
        }
    }

    /// Mean AP over every novel class in the report.
    pub fn novel_map(&self, semantics: &SemanticMatrix) -> Option<f64> {
        let novel: Vec<f64> = semantics
            .class_names()
            .iter()
            .zip(semantics.partition())
            .filter(|(_, p)| p.is_novel())
            .filter_map(|(name, _)| self.per_class_ap.get(name).copied())
            .collect();
        (!novel.is_empty()).then(|| novel.iter().sum::<f64>() / novel.len() as f64)
    }
}

/// Thresholded, NMS-filtered detections for every scene.
pub fn detect_scenes(
    model: &AlignmentModel,
    scenes: &[Scene],
    semantics: &SemanticMatrix,
    subset: &[usize],
    thresholds: &Thresholds,
) -> Result<Vec<Vec<Detection>>> {
    scenes
        .par_iter()
        .map(|scene| Ok(nms(&predict(scene, model, semantics, subset, thresholds.score)?, thresholds.nms_iou)))
        .collect()
}

/// Evaluates `model` on the test split under `mode`.
pub fn evaluate(
    model: &AlignmentModel,
    d_ts: &[Scene],
    semantics: &SemanticMatrix,
    mode: EvalMode,
    thresholds: &Thresholds,
) -> Result<EvalReport> {
    mode.check(semantics)?;
    let subset = mode.scored_classes(semantics);
    let dets = detect_scenes(model, d_ts, semantics, &subset, thresholds)?;
    report_from_detections(&dets, d_ts, semantics, mode, thresholds)
}

/// Builds a report from precomputed per-scene detections.
pub fn report_from_detections(
    dets: &[Vec<Detection>],
    d_ts: &[Scene],
    semantics: &SemanticMatrix,
    mode: EvalMode,
    thresholds: &Thresholds,
) -> Result<EvalReport> {
    mode.check(semantics)?;
    let groups = mode.reported_groups();
    let part = semantics.partition();
    let names = semantics.class_names();

    let mut per_class_ap = BTreeMap::new();
    let mut group_aps: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for class in semantics.indices(groups) {
        let gt: Vec<SceneBox> = d_ts
            .iter()
            .enumerate()
            .flat_map(|(s, scene)| {
                scene
                    .boxes
                    .iter()
                    .filter(move |(_, c)| *c == class)
                    .map(move |(bbox, _)| SceneBox { scene: s, bbox: *bbox })
            })
            .collect();
        if gt.is_empty() {
            continue;
        }
        let class_dets: Vec<SceneDetection> = dets
            .iter()
            .enumerate()
            .flat_map(|(s, ds)| {
                ds.iter()
                    .filter(move |d| d.class_id == class)
                    .map(move |d| SceneDetection { scene: s, det: *d })
            })
            .collect();
        let ap = average_precision(&class_dets, &gt, thresholds.match_iou);
        per_class_ap.insert(names[class].clone(), ap);
        let gi = groups.iter().position(|g| *g == part[class]).expect("class is in a reported group");
        group_aps.entry(gi).or_default().push(ap);
    }

    let mut means = Vec::with_capacity(groups.len());
    for (gi, group) in groups.iter().enumerate() {
        let aps = group_aps.get(&gi).ok_or_else(|| Error::ModeMismatch {
            mode: mode.to_string(),
            reason: format!("no {group} objects in the test split"),
        })?;
        means.push(aps.iter().sum::<f64>() / aps.len() as f64);
    }
    let mut map = [None; 3];
    for (group, &m) in groups.iter().zip(&means) {
        let slot = match group {
            Partition::Seen => 0,
            Partition::FewShot => 1,
            Partition::Unseen => 2,
        };
        map[slot] = Some(m);
    }

    let target: Vec<Vec<(BoundingBox, usize)>> = d_ts
        .iter()
        .map(|scene| scene.boxes.iter().copied().filter(|(_, c)| groups.contains(&part[*c])).collect())
        .collect();
    let recall = recall_at_k(dets, &target, thresholds.recall_k, thresholds.match_iou)?;

    Ok(EvalReport {
        mode,
        iou_threshold: thresholds.match_iou,
        per_class_ap,
        map_seen: map[0],
        map_few: map[1],
        map_unseen: map[2],
        hm: harmonic_mean(&means)?,
        recall_at_100: recall,
    })
}

fn pct(v: f64) -> f64 {
    (v * 100.0 * 100.0).round() / 100.0
}

fn pct_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", pct(x))).unwrap_or_default()
}

/// Export form of a report: percentages rounded to two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportExport {
    pub mode: EvalMode,
    pub iou_threshold: f64,
    pub per_class_ap: BTreeMap<String, f64>,
    pub map_seen: Option<f64>,
    pub map_few: Option<f64>,
    pub map_unseen: Option<f64>,
    pub hm: f64,
    pub recall_at_100: f64,
}

impl From<&EvalReport> for ReportExport {
    fn from(r: &EvalReport) -> Self {
        ReportExport {
            mode: r.mode,
            iou_threshold: r.iou_threshold,
            per_class_ap: r.per_class_ap.iter().map(|(k, v)| (k.clone(), pct(*v))).collect(),
            map_seen: r.map_seen.map(pct),
            map_few: r.map_few.map(pct),
            map_unseen: r.map_unseen.map(pct),
            hm: pct(r.hm),
            recall_at_100: pct(r.recall_at_100),
        }
    }
}

pub const SUMMARY_HEADER: &str = "mode,map_seen,map_few,map_unseen,hm,recall_at_100";

pub fn summary_row(r: &EvalReport) -> String {
    format!(
        "{},{},{},{},{:.2},{:.2}",
        r.mode,
        pct_cell(r.map_seen),
        pct_cell(r.map_few),
        pct_cell(r.map_unseen),
        pct(r.hm),
        pct(r.recall_at_100)
    )
}

pub fn write_report_json<W: Write>(out: W, r: &EvalReport) -> Result<()> {
    serde_json::to_writer_pretty(out, &ReportExport::from(r))?;
    Ok(())
}
