//! Box geometry and RoIAlign extraction of instance features.
//!
//! Coordinate conventions, frozen because the tests' oracles depend on them:
//! - boxes are continuous and half-open, `[x1, x2) x [y1, y2)`, in
//!   feature-map coordinates;
//! - the value of pixel `(r, c)` sits at continuous point `(c + 0.5, r + 0.5)`;
//! - bilinear interpolation between pixel centers, clamped to the border
//!   (replicate) outside the center grid;
//! - each output bin averages `samples x samples` bilinear samples placed on
//!   a regular grid inside the bin;
//! - pooled grids flatten channel-major: index = c*h*w + row*w + col.

use crate::error::{Error, Result};
use crate::kernels::map_indexed;
use crate::tensor::Tensor;

/// Batched dense feature tensor [N, C, H, W] from a detector neck level.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub values: Tensor,
    /// Image pixels per feature pixel.
    pub level_stride: usize,
}

impl FeatureMap {
    pub fn new(values: Tensor, level_stride: usize) -> Result<Self> {
        let d = values.dims();
        if d.len() != 4 || d.iter().any(|&v| v == 0) {
            return Err(Error::shape(format!("feature map must be NCHW with positive dims, got {d:?}")));
        }
        if level_stride == 0 {
            return Err(Error::invalid("level_stride must be >= 1"));
        }
        if !values.is_finite() {
            return Err(Error::invalid("feature map contains non-finite values"));
        }
        Ok(FeatureMap { values, level_stride })
    }

    pub fn batch(&self) -> usize {
        self.values.dims()[0]
    }
    pub fn channels(&self) -> usize {
        self.values.dims()[1]
    }
    pub fn height(&self) -> usize {
        self.values.dims()[2]
    }
    pub fn width(&self) -> usize {
        self.values.dims()[3]
    }
}

/// Axis-aligned rectangle in image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Intersection-over-union of two image-space boxes.
pub fn box_iou(a: &ImageBox, b: &ImageBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Axis-aligned rectangle in feature-map coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl FeatBox {
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }
}

/// Scale an image-space box down to feature coordinates and clip it to the
/// feature bounds. A box entirely outside the bounds is rejected (it belongs
/// to another pyramid level or is a bad annotation); a box that clips to zero
/// area is reported as degenerate so callers can drop it.
pub fn clip_and_scale_box(b: ImageBox, stride: usize, bounds: (usize, usize)) -> Result<FeatBox> {
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    if !(b.x1 < b.x2 && b.y1 < b.y2) {
        return Err(Error::invalid(format!("box has non-positive area: {b:?}")));
    }
    let (h, w) = (bounds.0 as f64, bounds.1 as f64);
    let s = stride as f64;
    let (x1, y1, x2, y2) = (b.x1 / s, b.y1 / s, b.x2 / s, b.y2 / s);
    if x2 <= 0.0 || y2 <= 0.0 || x1 >= w || y1 >= h {
        return Err(Error::BoxOutOfBounds {
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
            w: bounds.1,
            h: bounds.0,
        });
    }
    let clipped = FeatBox {
        x1: x1.clamp(0.0, w),
        y1: y1.clamp(0.0, h),
        x2: x2.clamp(0.0, w),
        y2: y2.clamp(0.0, h),
    };
    if clipped.width() <= 0.0 || clipped.height() <= 0.0 {
        return Err(Error::DegenerateBox);
    }
    Ok(clipped)
}

/// Per-batch list of instance boxes with batch indices and labels.
#[derive(Clone, Debug, Default)]
pub struct InstanceSet {
    boxes: Vec<FeatBox>,
    batch_index: Vec<usize>,
    labels: Vec<usize>,
}

impl InstanceSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Validates every instance against the feature dimensions (N, H, W).
    pub fn new(
        boxes: Vec<FeatBox>,
        batch_index: Vec<usize>,
        labels: Vec<usize>,
        batch: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if boxes.len() != batch_index.len() || boxes.len() != labels.len() {
            return Err(Error::invalid("instance field lengths disagree"));
        }
        for (i, b) in boxes.iter().enumerate() {
            let ok = b.x1 >= 0.0
                && b.x1 < b.x2
                && b.x2 <= width as f64
                && b.y1 >= 0.0
                && b.y1 < b.y2
                && b.y2 <= height as f64;
            if !ok {
                return Err(Error::invalid(format!("instance {i} box {b:?} outside {height}x{width} bounds")));
            }
            if batch_index[i] >= batch {
                return Err(Error::invalid(format!(
                    "instance {i} batch index {} out of range {batch}",
                    batch_index[i]
                )));
            }
        }
        Ok(InstanceSet { boxes, batch_index, labels })
    }

    /// Build from per-image ground-truth boxes in image coordinates. Boxes
    /// that fall outside the feature bounds or clip to zero area are dropped
    /// with a warning instead of poisoning downstream pooling with NaNs.
    pub fn from_image_boxes(
        per_image: &[Vec<(ImageBox, usize)>],
        stride: usize,
        height: usize,
        width: usize,
    ) -> Self {
        let mut boxes = Vec::new();
        let mut batch_index = Vec::new();
        let mut labels = Vec::new();
        for (n, gts) in per_image.iter().enumerate() {
            for &(b, label) in gts {
                match clip_and_scale_box(b, stride, (height, width)) {
                    Ok(fb) => {
                        boxes.push(fb);
                        batch_index.push(n);
                        labels.push(label);
                    }
                    Err(e) => {
                        log::warn!("dropping instance in image {n}: {e}");
                    }
                }
            }
        }
        InstanceSet { boxes, batch_index, labels }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
    pub fn boxes(&self) -> &[FeatBox] {
        &self.boxes
    }
    pub fn batch_index(&self) -> &[usize] {
        &self.batch_index
    }
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Pooled instance features, one row per instance, flattened channel-major.
#[derive(Clone, Debug)]
pub struct RoiFeatureBatch {
    pub values: Tensor,
    /// Row i maps back to this entry of the source `InstanceSet`.
    pub instance_ids: Vec<usize>,
    pub pool_h: usize,
    pub pool_w: usize,
}

impl RoiFeatureBatch {
    pub fn count(&self) -> usize {
        self.values.dims()[0]
    }
    pub fn dim(&self) -> usize {
        self.values.dims()[1]
    }
}

#[inline]
fn bilinear_at(ch: &[f64], height: usize, width: usize, x: f64, y: f64) -> f64 {
    let u = (x - 0.5).clamp(0.0, (width - 1) as f64);
    let v = (y - 0.5).clamp(0.0, (height - 1) as f64);
    let u0 = u.floor() as usize;
    let v0 = v.floor() as usize;
    let u1 = (u0 + 1).min(width - 1);
    let v1 = (v0 + 1).min(height - 1);
    let fu = u - u0 as f64;
    let fv = v - v0 as f64;
    let top = (1.0 - fu) * ch[v0 * width + u0] + fu * ch[v0 * width + u1];
    let bot = (1.0 - fu) * ch[v1 * width + u0] + fu * ch[v1 * width + u1];
    (1.0 - fv) * top + fv * bot
}

/// The four (flat index, weight) taps of a bilinear sample.
#[inline]
fn bilinear_taps(height: usize, width: usize, x: f64, y: f64) -> [(usize, f64); 4] {
    let u = (x - 0.5).clamp(0.0, (width - 1) as f64);
    let v = (y - 0.5).clamp(0.0, (height - 1) as f64);
    let u0 = u.floor() as usize;
    let v0 = v.floor() as usize;
    let u1 = (u0 + 1).min(width - 1);
    let v1 = (v0 + 1).min(height - 1);
    let fu = u - u0 as f64;
    let fv = v - v0 as f64;
    [
        (v0 * width + u0, (1.0 - fu) * (1.0 - fv)),
        (v0 * width + u1, fu * (1.0 - fv)),
        (v1 * width + u0, (1.0 - fu) * fv),
        (v1 * width + u1, fu * fv),
    ]
}

#[inline]
fn sample_point(b: &FeatBox, pool_h: usize, pool_w: usize, by: usize, bx: usize, sy: usize, sx: usize, samples: usize) -> (f64, f64) {
    let bin_h = b.height() / pool_h as f64;
    let bin_w = b.width() / pool_w as f64;
    let y = b.y1 + (by as f64 + (sy as f64 + 0.5) / samples as f64) * bin_h;
    let x = b.x1 + (bx as f64 + (sx as f64 + 0.5) / samples as f64) * bin_w;
    (x, y)
}

/// RoIAlign one box out of one image of the batch; output is [C, h, w].
pub fn roi_align(
    f: &FeatureMap,
    b: FeatBox,
    batch_index: usize,
    pool_h: usize,
    pool_w: usize,
    samples: usize,
) -> Tensor {
    assert!(pool_h >= 1 && pool_w >= 1 && samples >= 1, "pool dims and samples must be >= 1");
    assert!(batch_index < f.batch(), "batch index out of range");
    assert!(b.x1 < b.x2 && b.y1 < b.y2, "box must have positive area");
    let (c, height, width) = (f.channels(), f.height(), f.width());
    let mut out = Tensor::zeros(&[c, pool_h, pool_w]);
    let inv = 1.0 / (samples * samples) as f64;
    let img = &f.values.data()[batch_index * c * height * width..];
    for ch in 0..c {
        let plane = &img[ch * height * width..(ch + 1) * height * width];
        for by in 0..pool_h {
            for bx in 0..pool_w {
                let mut acc = 0.0;
                for sy in 0..samples {
                    for sx in 0..samples {
                        let (x, y) = sample_point(&b, pool_h, pool_w, by, bx, sy, sx, samples);
                        acc += bilinear_at(plane, height, width, x, y);
                    }
                }
                *out.at3_mut(ch, by, bx) = acc * inv;
            }
        }
    }
    out
}

/// Scatter gradients of one pooled box back into the feature-map gradient.
pub fn roi_align_grad_into(
    d_feat: &mut Tensor,
    d_out: &[f64],
    f_dims: &[usize],
    b: FeatBox,
    batch_index: usize,
    pool_h: usize,
    pool_w: usize,
    samples: usize,
) {
    let (c, height, width) = (f_dims[1], f_dims[2], f_dims[3]);
    let inv = 1.0 / (samples * samples) as f64;
    let base = batch_index * c * height * width;
    for ch in 0..c {
        let plane = base + ch * height * width;
        for by in 0..pool_h {
            for bx in 0..pool_w {
                let g = d_out[(ch * pool_h + by) * pool_w + bx] * inv;
                for sy in 0..samples {
                    for sx in 0..samples {
                        let (x, y) = sample_point(&b, pool_h, pool_w, by, bx, sy, sx, samples);
                        for (idx, w) in bilinear_taps(height, width, x, y) {
                            d_feat.data_mut()[plane + idx] += g * w;
                        }
                    }
                }
            }
        }
    }
}

/// Pool every instance and stack the flattened grids, one row per instance in
/// instance-set order. An empty set yields a [0, C*h*w] batch.
pub fn extract_roi_batch(
    f: &FeatureMap,
    instances: &InstanceSet,
    pool_h: usize,
    pool_w: usize,
    samples: usize,
) -> RoiFeatureBatch {
    let dim = f.channels() * pool_h * pool_w;
    let count = instances.len();
    let rows = map_indexed(count, |i| {
        roi_align(f, instances.boxes()[i], instances.batch_index()[i], pool_h, pool_w, samples).into_data()
    });
    let mut data = Vec::with_capacity(count * dim);
    for row in rows {
        data.extend_from_slice(&row);
    }
    RoiFeatureBatch {
        values: Tensor::from_vec(&[count, dim], data).unwrap(),
        instance_ids: (0..count).collect(),
        pool_h,
        pool_w,
    }
}

/// Gradient of `extract_roi_batch` w.r.t. the feature map.
pub fn extract_roi_batch_grad(
    d_rows: &Tensor,
    f_dims: &[usize],
    instances: &InstanceSet,
    pool_h: usize,
    pool_w: usize,
    samples: usize,
) -> Tensor {
    let dim = f_dims[1] * pool_h * pool_w;
    let mut d_feat = Tensor::zeros(f_dims);
    for i in 0..instances.len() {
        let row = &d_rows.data()[i * dim..(i + 1) * dim];
        roi_align_grad_into(
            &mut d_feat,
            row,
            f_dims,
            instances.boxes()[i],
            instances.batch_index()[i],
            pool_h,
            pool_w,
            samples,
        );
    }
    d_feat
}
