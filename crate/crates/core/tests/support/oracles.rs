//! Brute-force references for AP, recall@k, NMS and anchor matching, and
//! randomized comparisons against the library versions.

use anyshot::detector::{iou, match_anchors, nms, AnchorLabel, BoundingBox, Detection};
use anyshot::eval::{average_precision, recall_at_k, SceneBox, SceneDetection};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    // coarse grid so that overlaps above 0.5 are common
    let x = rng.random_range(0..4) as f64 * 0.5;
    let y = rng.random_range(0..4) as f64 * 0.5;
    let w = rng.random_range(1..4) as f64 * 0.5;
    let h = rng.random_range(1..4) as f64 * 0.5;
    BoundingBox::new(x, y, x + w, y + h).unwrap()
}

fn jitter(b: &BoundingBox, rng: &mut ChaCha8Rng) -> BoundingBox {
    let d = |rng: &mut ChaCha8Rng| rng.random_range(-0.2..0.2);
    let x0 = b.x_min + d(rng);
    let y0 = b.y_min + d(rng);
    BoundingBox::new(x0, y0, (b.x_max + d(rng)).max(x0 + 0.1), (b.y_max + d(rng)).max(y0 + 0.1)).unwrap()
}

/// Index of the unused box with the largest IoU at or above `thr`; ties go to
/// the lower index.
fn best_unused(det: &BoundingBox, boxes: &[BoundingBox], used: &[bool], thr: f64) -> Option<usize> {
    let mut pick: Option<usize> = None;
    for j in 0..boxes.len() {
        if used[j] || iou(det, &boxes[j]) < thr {
            continue;
        }
        pick = match pick {
            Some(p) if iou(det, &boxes[p]) >= iou(det, &boxes[j]) => Some(p),
            _ => Some(j),
        };
    }
    pick
}

/// AP as the mean over ground truth of the interpolated precision at each
/// true positive: `sum_tp max_{j >= i} prec(j) / G`.
pub fn oracle_ap(dets: &[SceneDetection], gt: &[SceneBox], thr: f64) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].det.score.partial_cmp(&dets[a].det.score).unwrap());
    let boxes: Vec<BoundingBox> = gt.iter().map(|g| g.bbox).collect();
    let mut used = vec![false; gt.len()];
    let mut hits = Vec::new();
    for &i in &idx {
        let d = &dets[i];
        let mask: Vec<bool> = gt.iter().zip(&used).map(|(g, &u)| u || g.scene != d.scene).collect();
        let hit = best_unused(&d.det.bbox, &boxes, &mask, thr);
        if let Some(j) = hit {
            used[j] = true;
        }
        hits.push(hit.is_some());
    }
    let prec: Vec<f64> = (0..hits.len())
        .map(|i| hits[..=i].iter().filter(|&&h| h).count() as f64 / (i + 1) as f64)
        .collect();
    let mut total = 0.0;
    for i in 0..hits.len() {
        if hits[i] {
            total += prec[i..].iter().cloned().fold(0.0, f64::max);
        }
    }
    total / gt.len() as f64
}

fn random_ap_instance(rng: &mut ChaCha8Rng) -> (Vec<SceneDetection>, Vec<SceneBox>) {
    let scenes = rng.random_range(1..=3);
    let n_gt = rng.random_range(0..=10);
    let gt: Vec<SceneBox> = (0..n_gt)
        .map(|_| SceneBox { scene: rng.random_range(0..scenes), bbox: random_box(rng) })
        .collect();
    let n_det = rng.random_range(0..=10);
    let dets = (0..n_det)
        .map(|_| {
            let (scene, bbox) = if !gt.is_empty() && rng.random_bool(0.6) {
                let g = gt[rng.random_range(0..gt.len())];
                (g.scene, jitter(&g.bbox, rng))
            } else {
                (rng.random_range(0..scenes), random_box(rng))
            };
            SceneDetection { scene, det: Detection { bbox, class_id: 0, score: rng.random::<f64>() } }
        })
        .collect();
    (dets, gt)
}

/// Returns how many instances had an AP strictly between 0 and 1.
pub fn check_average_precision(instances: u64) -> Result<usize, String> {
    let mut partial = 0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut dets, gt) = random_ap_instance(&mut rng);
        let expected = oracle_ap(&dets, &gt, 0.5);
        let got = average_precision(&dets, &gt, 0.5);
        if (got - expected).abs() > 1e-12 {
            return Err(format!("AP seed {seed}: {got} vs {expected}"));
        }
        dets.shuffle(&mut rng);
        if average_precision(&dets, &gt, 0.5) != got {
            return Err(format!("AP seed {seed}: depends on detection order"));
        }
        partial += usize::from(got > 0.0 && got < 1.0);
    }
    Ok(partial)
}

pub fn oracle_recall(dets: &[Vec<Detection>], gt: &[Vec<(BoundingBox, usize)>], k: usize, thr: f64) -> f64 {
    let total: usize = gt.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let mut hits = 0;
    for (s, scene_gt) in gt.iter().enumerate() {
        let mut top = dets[s].clone();
        top.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let boxes: Vec<BoundingBox> = scene_gt.iter().map(|g| g.0).collect();
        let mut used = vec![false; scene_gt.len()];
        for d in top.iter().take(k) {
            let mask: Vec<bool> = scene_gt.iter().zip(&used).map(|(g, &u)| u || g.1 != d.class_id).collect();
            if let Some(j) = best_unused(&d.bbox, &boxes, &mask, thr) {
                used[j] = true;
                hits += 1;
            }
        }
    }
    hits as f64 / total as f64
}

pub fn check_recall(instances: u64) -> Result<(), String> {
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let scenes = rng.random_range(1..=3);
        let mut gt = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..scenes {
            let g: Vec<(BoundingBox, usize)> =
                (0..rng.random_range(0..=5)).map(|_| (random_box(&mut rng), rng.random_range(0..2))).collect();
            let d: Vec<Detection> = (0..rng.random_range(0..=10))
                .map(|_| {
                    let (bbox, class_id) = if !g.is_empty() && rng.random_bool(0.6) {
                        let (b, c) = g[rng.random_range(0..g.len())];
                        (jitter(&b, &mut rng), c)
                    } else {
                        (random_box(&mut rng), rng.random_range(0..2))
                    };
                    Detection { bbox, class_id, score: rng.random() }
                })
                .collect();
            gt.push(g);
            dets.push(d);
        }
        let mut last = 0.0;
        for k in 1..=11 {
            let got = recall_at_k(&dets, &gt, k, 0.5).map_err(|e| e.to_string())?;
            let expected = oracle_recall(&dets, &gt, k, 0.5);
            if (got - expected).abs() > 1e-12 {
                return Err(format!("recall seed {seed} k {k}: {got} vs {expected}"));
            }
            if got < last {
                return Err(format!("recall seed {seed}: drops at k = {k}"));
            }
            last = got;
        }
        if recall_at_k(&dets, &gt, 100, 0.5).map_err(|e| e.to_string())? != last {
            return Err(format!("recall seed {seed}: k = 100 differs from unlimited"));
        }
    }
    Ok(())
}

pub fn oracle_nms(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
    let mut alive = vec![true; dets.len()];
    for (pos, &i) in idx.iter().enumerate() {
        if !alive[i] {
            continue;
        }
        for &j in &idx[pos + 1..] {
            if dets[j].class_id == dets[i].class_id && iou(&dets[i].bbox, &dets[j].bbox) > thr {
                alive[j] = false;
            }
        }
    }
    idx.into_iter().filter(|&i| alive[i]).map(|i| dets[i]).collect()
}

pub fn check_nms(instances: u64) -> Result<(), String> {
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let dets: Vec<Detection> = (0..rng.random_range(0..=10))
            .map(|_| Detection { bbox: random_box(&mut rng), class_id: rng.random_range(0..2), score: rng.random() })
            .collect();
        let thr = [0.3, 0.5, 0.7][rng.random_range(0..3)];
        let got = nms(&dets, thr);
        if got != oracle_nms(&dets, thr) {
            return Err(format!("NMS seed {seed}: kept sets differ"));
        }
        for (a, x) in got.iter().enumerate() {
            for y in &got[a + 1..] {
                if x.class_id == y.class_id && iou(&x.bbox, &y.bbox) > thr {
                    return Err(format!("NMS seed {seed}: overlapping survivors"));
                }
            }
        }
    }
    Ok(())
}

pub fn oracle_match(anchor: &BoundingBox, gt: &[(BoundingBox, usize)], pos: f64, neg: f64) -> AnchorLabel {
    let overlaps: Vec<f64> = gt.iter().map(|(b, _)| iou(anchor, b)).collect();
    let top = overlaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if top >= pos {
        let j = overlaps.iter().position(|&o| o == top).unwrap();
        AnchorLabel::Positive { class: gt[j].1, gt: j }
    } else if top >= neg {
        AnchorLabel::Ignore
    } else {
        AnchorLabel::Negative
    }
}

pub fn check_matching(instances: u64) -> Result<(), String> {
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let anchors: Vec<BoundingBox> = (0..rng.random_range(1..=10)).map(|_| random_box(&mut rng)).collect();
        let gt: Vec<(BoundingBox, usize)> = (0..rng.random_range(0..=10))
            .map(|_| (jitter(&random_box(&mut rng), &mut rng), rng.random_range(0..5)))
            .collect();
        let got = match_anchors(&anchors, &gt, 0.5, 0.4).map_err(|e| e.to_string())?;
        for (a, label) in anchors.iter().zip(&got) {
            if *label != oracle_match(a, &gt, 0.5, 0.4) {
                return Err(format!("matching seed {seed}: {label:?}"));
            }
        }
    }
    Ok(())
}
