//! Prediction decoding, per-class NMS, and all-point interpolated mAP.

use crate::roi::{box_iou, ImageBox};
use crate::toydet::model::{DetectorOutput, STRIDE};

/// One decoded detection in image coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Detection {
    pub b: ImageBox,
    pub score: f64,
    pub class: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct DecodeParams {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams { score_thresh: 0.05, nms_iou: 0.5, max_detections: 50 }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Decode dense head outputs into per-image detection lists. Deterministic:
/// candidates sort by (score desc, cell index asc, class asc); NMS is greedy
/// per class.
pub fn decode_predictions(out: &DetectorOutput, params: &DecodeParams) -> Vec<Vec<Detection>> {
    let d = out.class_logits.dims();
    let (n, k, h, w) = (d[0], d[1], d[2], d[3]);
    let s = STRIDE as f64;
    let (img_w, img_h) = (w as f64 * s, h as f64 * s);
    let mut result = Vec::with_capacity(n);
    for img in 0..n {
        // candidate gathering
        let mut cand: Vec<(Detection, usize)> = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let cell = y * w + x;
                let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                for class in 0..k {
                    let score = sigmoid(out.class_logits.at4(img, class, y, x));
                    if score < params.score_thresh {
                        continue;
                    }
                    let l = out.box_deltas.at4(img, 0, y, x).max(0.0);
                    let t = out.box_deltas.at4(img, 1, y, x).max(0.0);
                    let r = out.box_deltas.at4(img, 2, y, x).max(0.0);
                    let b = out.box_deltas.at4(img, 3, y, x).max(0.0);
                    let bx = ImageBox {
                        x1: (cx - l * s).clamp(0.0, img_w),
                        y1: (cy - t * s).clamp(0.0, img_h),
                        x2: (cx + r * s).clamp(0.0, img_w),
                        y2: (cy + b * s).clamp(0.0, img_h),
                    };
                    if bx.x2 <= bx.x1 || bx.y2 <= bx.y1 {
                        continue;
                    }
                    cand.push((Detection { b: bx, score, class }, cell));
                }
            }
        }
        cand.sort_by(|(a, ca), (b, cb)| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(ca.cmp(cb))
                .then(a.class.cmp(&b.class))
        });
        // greedy per-class NMS
        let mut kept: Vec<Detection> = Vec::new();
        for (det, _) in cand {
            if kept.len() >= params.max_detections {
                break;
            }
            let suppressed = kept
                .iter()
                .any(|k| k.class == det.class && box_iou(&k.b, &det.b) > params.nms_iou);
            if !suppressed {
                kept.push(det);
            }
        }
        result.push(kept);
    }
    result
}

/// Average precision metrics at the standard thresholds.
#[derive(Clone, Debug)]
pub struct MapMetrics {
    /// Mean over thresholds 0.5:0.05:0.95 and classes.
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// (threshold, AP averaged over classes) pairs.
    pub per_threshold: Vec<(f64, f64)>,
}

/// COCO-style IoU thresholds 0.5, 0.55, ..., 0.95.
pub fn standard_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// All-point interpolated average precision for one class at one threshold.
/// Returns None when the class has no ground truth anywhere (class skipped).
fn average_precision(
    preds: &[(usize, Detection)],
    gt: &[Vec<(ImageBox, usize)>],
    class: usize,
    thresh: f64,
) -> Option<f64> {
    let gt_per_image: Vec<Vec<&ImageBox>> = gt
        .iter()
        .map(|g| g.iter().filter(|(_, c)| *c == class).map(|(b, _)| b).collect())
        .collect();
    let total_gt: usize = gt_per_image.iter().map(|g| g.len()).sum();
    if total_gt == 0 {
        return None;
    }

    // predictions of this class, sorted by score desc with deterministic
    // tie-breaking on (image, insertion order)
    let mut dets: Vec<(usize, usize, Detection)> = preds
        .iter()
        .filter(|(_, d)| d.class == class)
        .enumerate()
        .map(|(i, (img, d))| (*img, i, *d))
        .collect();
    dets.sort_by(|a, b| b.2.score.partial_cmp(&a.2.score).unwrap().then(a.1.cmp(&b.1)));

    let mut matched: Vec<Vec<bool>> = gt_per_image.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::with_capacity(dets.len());
    for (img, _, det) in &dets {
        let mut best: Option<(f64, usize)> = None;
        for (gi, gbox) in gt_per_image[*img].iter().enumerate() {
            if matched[*img][gi] {
                continue;
            }
            let iou = box_iou(&det.b, gbox);
            if iou >= thresh && best.map_or(true, |(bi, _)| iou > bi) {
                best = Some((iou, gi));
            }
        }
        if let Some((_, gi)) = best {
            matched[*img][gi] = true;
            tp.push(true);
        } else {
            tp.push(false);
        }
    }

    // precision-recall points, then the interpolated area
    let mut cum_tp = 0usize;
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    for (i, &is_tp) in tp.iter().enumerate() {
        if is_tp {
            cum_tp += 1;
        }
        precision.push(cum_tp as f64 / (i + 1) as f64);
        recall.push(cum_tp as f64 / total_gt as f64);
    }
    // make precision monotone non-increasing from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..recall.len() {
        ap += (recall[i] - prev_r) * precision[i];
        prev_r = recall[i];
    }
    Some(ap)
}

/// Evaluate detections against ground truth. Classes with no ground truth
/// anywhere are excluded from the averages; if nothing has ground truth the
/// result is all zeros.
pub fn evaluate_map(
    preds: &[Vec<Detection>],
    gt: &[Vec<(ImageBox, usize)>],
    num_classes: usize,
) -> MapMetrics {
    assert_eq!(preds.len(), gt.len(), "image count mismatch");
    let flat: Vec<(usize, Detection)> = preds
        .iter()
        .enumerate()
        .flat_map(|(img, dets)| dets.iter().map(move |d| (img, *d)))
        .collect();

    let thresholds = standard_thresholds();
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        let mut acc = 0.0;
        let mut counted = 0usize;
        for class in 0..num_classes {
            if let Some(ap) = average_precision(&flat, gt, class, t) {
                acc += ap;
                counted += 1;
            }
        }
        let ap = if counted > 0 { acc / counted as f64 } else { 0.0 };
        per_threshold.push((t, ap));
    }
    let map = per_threshold.iter().map(|(_, ap)| ap).sum::<f64>() / per_threshold.len() as f64;
    let ap50 = per_threshold[0].1;
    let ap75 = per_threshold[5].1;
    MapMetrics { map, ap50, ap75, per_threshold }
}
