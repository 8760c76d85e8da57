//! Detection task loss: sigmoid focal classification over every cell/class
//! plus L1 box regression on positive cells, with analytic gradients.
//!
//! Assignment rule: a cell is positive for the ground-truth box containing
//! its center (half-open test); when several boxes contain it, the smallest
//! area wins. Cells outside every box are background.

use crate::roi::ImageBox;
use crate::tensor::Tensor;
use crate::toydet::model::STRIDE;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 0.25, gamma: 2.0 }
    }
}

/// Dense assignment for one batch at one feature level.
#[derive(Clone, Debug)]
pub struct DetectionTargets {
    /// Per cell (n*H*W + y*W + x): the assigned class, or None for background.
    pub cls: Vec<Option<usize>>,
    /// [N, 4, H, W] (left, top, right, bottom) distances in stride units;
    /// meaningful only at positive cells.
    pub boxes: Tensor,
    pub num_pos: usize,
    pub num_classes: usize,
}

/// ln(1 + e^x) without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable sigmoid.
#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Center-in-box assignment over a [N, H, W] grid of cells.
pub fn build_targets(
    gt: &[Vec<(ImageBox, usize)>],
    h: usize,
    w: usize,
    num_classes: usize,
) -> DetectionTargets {
    let n = gt.len();
    let mut cls = vec![None; n * h * w];
    let mut boxes = Tensor::zeros(&[n, 4, h, w]);
    let mut num_pos = 0usize;
    let s = STRIDE as f64;
    for (img, gts) in gt.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let cx = (x as f64 + 0.5) * s;
                let cy = (y as f64 + 0.5) * s;
                let mut best: Option<(f64, usize)> = None; // (area, gt index)
                for (gi, (b, _)) in gts.iter().enumerate() {
                    if cx >= b.x1 && cx < b.x2 && cy >= b.y1 && cy < b.y2 {
                        let area = (b.x2 - b.x1) * (b.y2 - b.y1);
                        if best.map_or(true, |(ba, _)| area < ba) {
                            best = Some((area, gi));
                        }
                    }
                }
                if let Some((_, gi)) = best {
                    let (b, class) = gts[gi];
                    cls[(img * h + y) * w + x] = Some(class);
                    *boxes.at4_mut(img, 0, y, x) = (cx - b.x1) / s;
                    *boxes.at4_mut(img, 1, y, x) = (cy - b.y1) / s;
                    *boxes.at4_mut(img, 2, y, x) = (b.x2 - cx) / s;
                    *boxes.at4_mut(img, 3, y, x) = (b.y2 - cy) / s;
                    num_pos += 1;
                }
            }
        }
    }
    DetectionTargets { cls, boxes, num_pos, num_classes }
}

/// Loss value together with gradients w.r.t. the class logits and box
/// deltas. Both terms are normalized by max(num_pos, 1).
pub fn detection_task_loss_grad(
    class_logits: &Tensor,
    box_deltas: &Tensor,
    targets: &DetectionTargets,
    focal: FocalParams,
) -> (f64, Tensor, Tensor) {
    let d = class_logits.dims();
    let (n, k, h, w) = (d[0], d[1], d[2], d[3]);
    assert_eq!(k, targets.num_classes, "class count mismatch");
    assert_eq!(box_deltas.dims(), &[n, 4, h, w], "box head shape");
    assert_eq!(targets.cls.len(), n * h * w, "target grid shape");
    let norm = 1.0 / targets.num_pos.max(1) as f64;
    let (alpha, gamma) = (focal.alpha, focal.gamma);

    let mut loss = 0.0;
    let mut d_cls = Tensor::zeros(&[n, k, h, w]);
    let mut d_box = Tensor::zeros(&[n, 4, h, w]);

    for img in 0..n {
        for y in 0..h {
            for x in 0..w {
                let assigned = targets.cls[(img * h + y) * w + x];
                for class in 0..k {
                    let z = class_logits.at4(img, class, y, x);
                    let p = sigmoid(z);
                    let log_p = -softplus(-z);
                    let log_q = -softplus(z);
                    if assigned == Some(class) {
                        loss += -alpha * (1.0 - p).powf(gamma) * log_p;
                        *d_cls.at4_mut(img, class, y, x) =
                            norm * alpha * (1.0 - p).powf(gamma) * (gamma * p * log_p - (1.0 - p));
                    } else {
                        loss += -(1.0 - alpha) * p.powf(gamma) * log_q;
                        *d_cls.at4_mut(img, class, y, x) =
                            norm * (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * log_q);
                    }
                }
                if assigned.is_some() {
                    for comp in 0..4 {
                        let diff = box_deltas.at4(img, comp, y, x) - targets.boxes.at4(img, comp, y, x);
                        loss += diff.abs();
                        *d_box.at4_mut(img, comp, y, x) = norm * diff.signum();
                    }
                }
            }
        }
    }
    (loss * norm, d_cls, d_box)
}

/// Loss value only.
pub fn detection_task_loss(
    class_logits: &Tensor,
    box_deltas: &Tensor,
    targets: &DetectionTargets,
    focal: FocalParams,
) -> f64 {
    detection_task_loss_grad(class_logits, box_deltas, targets, focal).0
}
