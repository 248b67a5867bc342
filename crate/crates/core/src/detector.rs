//! Detection geometry: IoU, anchor matching, thresholded prediction and NMS.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::alignment::AlignmentModel;
use crate::error::{Error, Result};
use crate::semantics::SemanticMatrix;
use crate::synthdata::Scene;

pub const POSITIVE_IOU: f64 = 0.5;
pub const NEGATIVE_IOU: f64 = 0.4;
pub const SCORE_THRESHOLD: f64 = 0.3;
pub const NMS_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_max > x_min && y_max > y_min) {
            return Err(Error::Domain(format!(
                "degenerate box ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn inside(&self, extent: &BoundingBox) -> bool {
        self.x_min >= extent.x_min
            && self.y_min >= extent.y_min
            && self.x_max <= extent.x_max
            && self.y_max <= extent.y_max
    }

    fn cmp_coords(&self, other: &Self) -> Ordering {
        self.x_min
            .total_cmp(&other.x_min)
            .then(self.y_min.total_cmp(&other.y_min))
            .then(self.x_max.total_cmp(&other.x_max))
            .then(self.y_max.total_cmp(&other.y_max))
    }
}

/// Intersection over union.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    if inter == 0.0 {
        return 0.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive { class: usize, gt: usize },
    Negative,
    Ignore,
}

/// Assigns every anchor to the ground-truth box it overlaps most.
pub fn match_anchors(
    anchors: &[BoundingBox],
    gt: &[(BoundingBox, usize)],
    pos_thr: f64,
    neg_thr: f64,
) -> Result<Vec<AnchorLabel>> {
    if pos_thr <= neg_thr {
        return Err(Error::Config(format!(
            "positive threshold {pos_thr} must exceed negative threshold {neg_thr}"
        )));
    }
    Ok(anchors
        .iter()
        .map(|anchor| {
            let mut best: Option<(usize, f64)> = None;
            for (j, (b, _)) in gt.iter().enumerate() {
                let o = iou(anchor, b);
                if best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, o)) if o >= pos_thr => AnchorLabel::Positive { class: gt[j].1, gt: j },
                Some((_, o)) if o >= neg_thr => AnchorLabel::Ignore,
                _ => AnchorLabel::Negative,
            }
        })
        .collect())
}

/// Emits one detection per (anchor, class) whose score exceeds
/// `score_threshold`. `subset` holds global class indices.
pub fn predict(
    scene: &Scene,
    model: &AlignmentModel,
    semantics: &SemanticMatrix,
    subset: &[usize],
    score_threshold: f64,
) -> Result<Vec<Detection>> {
    let scores = model.score_batch(&scene.anchor_features, semantics, subset)?;
    Ok(detections_from_scores(&scene.anchors, &scores, subset, score_threshold))
}

pub fn detections_from_scores(
    anchors: &[BoundingBox],
    scores: &ndarray::Array2<f64>,
    subset: &[usize],
    score_threshold: f64,
) -> Vec<Detection> {
    let mut out = Vec::new();
    for (a, row) in scores.outer_iter().enumerate() {
        for (k, &score) in row.iter().enumerate() {
            if score > score_threshold {
                out.push(Detection {
                    bbox: anchors[a],
                    class_id: subset[k],
                    score,
                });
            }
        }
    }
    out
}

/// Ordering used for output: score descending, then class, then box.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.cmp_coords(&b.bbox))
}

/// Per-class greedy non-maximum suppression.
pub fn nms(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for det in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == det.class_id && iou(&k.bbox, &det.bbox) > iou_thr);
        if !suppressed {
            kept.push(det);
        }
    }
    kept
}

/// Writes `scene_id,class,score,x_min,y_min,x_max,y_max` rows.
pub fn write_detections_csv<W: Write>(
    mut out: W,
    rows: &[(usize, Vec<Detection>)],
    class_names: &[String],
) -> std::io::Result<()> {
    writeln!(out, "scene_id,class,score,x_min,y_min,x_max,y_max")?;
    for (scene, dets) in rows {
        for d in dets {
            writeln!(
                out,
                "{scene},{},{},{},{},{},{}",
                class_names[d.class_id], d.score, d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(3.0, 3.0, 4.0, 4.0)), 0.0);
        assert_abs_diff_eq!(iou(&a, &bb(1.0, 0.0, 3.0, 2.0)), 2.0 / 6.0, epsilon = 1e-15);
        // touching edges share no area
        assert_eq!(iou(&a, &bb(2.0, 0.0, 3.0, 2.0)), 0.0);
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BoundingBox::new(1.0, 0.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn matching_examples() {
        let anchors = [bb(0.0, 0.0, 1.0, 1.0), bb(1.0, 0.0, 2.0, 1.0), bb(0.1, 0.0, 1.1, 1.0)];
        let none = match_anchors(&anchors, &[], 0.5, 0.4).unwrap();
        assert!(none.iter().all(|l| *l == AnchorLabel::Negative));

        let gt = [(bb(0.0, 0.0, 1.0, 1.0), 7)];
        let labels = match_anchors(&anchors, &gt, 0.5, 0.4).unwrap();
        assert_eq!(labels[0], AnchorLabel::Positive { class: 7, gt: 0 });
        assert_eq!(labels[1], AnchorLabel::Negative);
        assert_eq!(labels[2], AnchorLabel::Positive { class: 7, gt: 0 });

        // IoU 0.6/1.4 ~ 0.43 falls in the ignore band
        let mid = match_anchors(&[bb(0.4, 0.0, 1.4, 1.0)], &gt, 0.5, 0.4).unwrap();
        assert_eq!(mid[0], AnchorLabel::Ignore);
        assert!(match_anchors(&anchors, &gt, 0.4, 0.4).is_err());
    }

    #[test]
    fn matching_tie_prefers_lower_index() {
        let gt = [(bb(0.0, 0.0, 1.0, 1.0), 3), (bb(0.0, 0.0, 1.0, 1.0), 5)];
        let labels = match_anchors(&[bb(0.0, 0.0, 1.0, 1.0)], &gt, 0.5, 0.4).unwrap();
        assert_eq!(labels[0], AnchorLabel::Positive { class: 3, gt: 0 });
    }

    fn det(x: f64, class_id: usize, score: f64) -> Detection {
        Detection {
            bbox: bb(x, 0.0, x + 1.0, 1.0),
            class_id,
            score,
        }
    }

    #[test]
    fn nms_examples() {
        assert_eq!(nms(&[det(0.0, 1, 0.4)], 0.5), vec![det(0.0, 1, 0.4)]);
        assert_eq!(nms(&[det(0.0, 1, 0.8), det(0.0, 1, 0.9)], 0.5), vec![det(0.0, 1, 0.9)]);
        // different classes never suppress each other
        let kept = nms(&[det(0.0, 1, 0.8), det(0.0, 2, 0.9)], 0.5);
        assert_eq!(kept, vec![det(0.0, 2, 0.9), det(0.0, 1, 0.8)]);
    }

    #[test]
    fn csv_export() {
        let mut buf = Vec::new();
        let names = vec!["cat".to_string(), "dog".to_string()];
        write_detections_csv(&mut buf, &[(3, vec![det(0.0, 1, 0.5)])], &names).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "scene_id,class,score,x_min,y_min,x_max,y_max\n3,dog,0.5,0,0,1,1\n");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_box() -> impl Strategy<Value = BoundingBox> {
            (0.0f64..1.0, 0.0f64..1.0, 0.01f64..1.0, 0.01f64..1.0)
                .prop_map(|(x, y, w, h)| bb(x, y, x + w, y + h))
        }

        proptest! {
            #[test]
            fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
                let ab = iou(&a, &b);
                prop_assert_eq!(ab, iou(&b, &a));
                prop_assert!((0.0..=1.0).contains(&ab));
                prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
            }

            #[test]
            fn nms_leaves_no_overlapping_pairs(
                raw in proptest::collection::vec((arb_box(), 0usize..3, 0.01f64..0.99), 0..30),
                thr in 0.1f64..0.9,
            ) {
                let dets: Vec<_> = raw.into_iter()
                    .map(|(bbox, class_id, score)| Detection { bbox, class_id, score })
                    .collect();
                let kept = nms(&dets, thr);
                for (i, a) in kept.iter().enumerate() {
                    for b in &kept[i + 1..] {
                        prop_assert!(a.class_id != b.class_id || iou(&a.bbox, &b.bbox) <= thr);
                        prop_assert!(a.score >= b.score);
                    }
                }
            }
        }
    }
}
