//! Spatial soft masks built from instance attention, and the masked feature
//! distillation losses computed under them.

use crate::error::{Error, Result};
use crate::roi::{FeatureMap, InstanceSet};
use crate::selector::AttentionScores;
use crate::tensor::Tensor;

/// How instance scores are rescaled before the mask multiply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rescale {
    /// Use the softmax outputs as-is.
    None,
    /// Multiply each score by its softmax group size (so the mean instance
    /// weight is 1 instead of 1/I), clamped to at most 1.
    MeanOne,
}

/// Per-pixel multiplicative weights [N, 1, H, W]; 1 everywhere no instance
/// region touches, in (0, 1] inside instance regions.
#[derive(Clone, Debug)]
pub struct SoftMask {
    pub values: Tensor,
}

impl SoftMask {
    pub fn all_ones(n: usize, h: usize, w: usize) -> SoftMask {
        SoftMask { values: Tensor::filled(&[n, 1, h, w], 1.0) }
    }
}

/// Integer pixel region of a feature box, rounded outward and clamped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRegion {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

/// Half-open pixel region covered by the box: floor the near edges, ceil the
/// far edges, clamp to the map.
pub fn rasterize_region(x1: f64, y1: f64, x2: f64, y2: f64, h: usize, w: usize) -> PixelRegion {
    PixelRegion {
        row0: (y1.floor().max(0.0) as usize).min(h),
        row1: (y2.ceil().max(0.0) as usize).min(h),
        col0: (x1.floor().max(0.0) as usize).min(w),
        col1: (x2.ceil().max(0.0) as usize).min(w),
    }
}

/// Effective multiplicative weight of instance `i` after rescaling.
#[inline]
pub fn effective_weight(scores: &AttentionScores, i: usize, rescale: Rescale) -> f64 {
    match rescale {
        Rescale::None => scores.values[i],
        Rescale::MeanOne => (scores.values[i] * scores.group_size[i] as f64).min(1.0),
    }
}

/// Build the soft mask: start from all ones and multiply each instance's
/// rasterized region of its own image by the instance weight. Overlapping
/// regions multiply, so crowded pixels are downweighted by every instance
/// covering them.
pub fn build_soft_mask(
    instances: &InstanceSet,
    scores: &AttentionScores,
    shape: (usize, usize, usize),
    rescale: Rescale,
) -> SoftMask {
    let (n, h, w) = shape;
    assert_eq!(instances.len(), scores.len(), "scores do not match instances");
    let mut m = SoftMask::all_ones(n, h, w);
    for i in 0..instances.len() {
        let b = instances.boxes()[i];
        let img = instances.batch_index()[i];
        let a = effective_weight(scores, i, rescale);
        let r = rasterize_region(b.x1, b.y1, b.x2, b.y2, h, w);
        for row in r.row0..r.row1 {
            for col in r.col0..r.col1 {
                *m.values.at4_mut(img, 0, row, col) *= a;
            }
        }
    }
    m
}

/// Gradient of the mask entries w.r.t. each instance's effective weight.
/// Since M[p] is a product of weights, dM[p]/da_i = M[p] / a_i over the
/// pixels instance i covers (weights are softmax outputs, hence nonzero).
pub fn build_soft_mask_grad(
    d_mask: &Tensor,
    mask: &SoftMask,
    instances: &InstanceSet,
    scores: &AttentionScores,
    rescale: Rescale,
) -> Vec<f64> {
    let (h, w) = (mask.values.dims()[2], mask.values.dims()[3]);
    let mut d_weight = vec![0.0; instances.len()];
    for i in 0..instances.len() {
        let b = instances.boxes()[i];
        let img = instances.batch_index()[i];
        let a = effective_weight(scores, i, rescale);
        let r = rasterize_region(b.x1, b.y1, b.x2, b.y2, h, w);
        let mut acc = 0.0;
        for row in r.row0..r.row1 {
            for col in r.col0..r.col1 {
                acc += d_mask.at4(img, 0, row, col) * mask.values.at4(img, 0, row, col) / a;
            }
        }
        d_weight[i] = acc;
    }
    d_weight
}

/// Broadcast multiply: every channel of F gets scaled by the single-channel
/// mask of its image.
pub fn apply_mask(f: &FeatureMap, m: &SoftMask) -> Result<FeatureMap> {
    let fd = f.values.dims();
    let md = m.values.dims();
    if fd[0] != md[0] || fd[2] != md[2] || fd[3] != md[3] {
        return Err(Error::shape(format!("feature {fd:?} vs mask {md:?}")));
    }
    let (n, c, h, w) = (fd[0], fd[1], fd[2], fd[3]);
    let mut out = f.values.clone();
    for img in 0..n {
        for ch in 0..c {
            for row in 0..h {
                for col in 0..w {
                    *out.at4_mut(img, ch, row, col) *= m.values.at4(img, 0, row, col);
                }
            }
        }
    }
    FeatureMap::new(out, f.level_stride)
}

/// Learnable 1x1 linear map from student channels to teacher channels.
#[derive(Clone, Debug)]
pub struct ChannelProjection {
    /// [C_T, C_S]
    pub weight: Tensor,
    /// [C_T]
    pub bias: Option<Tensor>,
}

impl ChannelProjection {
    /// Uniform Kaiming-style init over fan-in.
    pub fn init(c_t: usize, c_s: usize, seed: u64, with_bias: bool) -> ChannelProjection {
        let bound = 1.0 / (c_s as f64).sqrt();
        let weight = crate::testutil::rand_tensor_in(&[c_t, c_s], -bound, bound, seed);
        let bias = with_bias.then(|| Tensor::zeros(&[c_t]));
        ChannelProjection { weight, bias }
    }

    /// Identity map, only valid when channel counts agree.
    pub fn identity(c: usize) -> ChannelProjection {
        let mut weight = Tensor::zeros(&[c, c]);
        for i in 0..c {
            *weight.at2_mut(i, i) = 1.0;
        }
        ChannelProjection { weight, bias: None }
    }

    pub fn c_t(&self) -> usize {
        self.weight.dims()[0]
    }
    pub fn c_s(&self) -> usize {
        self.weight.dims()[1]
    }

    /// Apply across the channel axis: out[n, t, y, x] = Σ_s W[t,s]·f[n,s,y,x] + b[t].
    pub fn apply(&self, f: &Tensor) -> Tensor {
        let d = f.dims();
        assert_eq!(d[1], self.c_s(), "projection input channels");
        let (n, cs, h, w) = (d[0], d[1], d[2], d[3]);
        let ct = self.c_t();
        let mut out = Tensor::zeros(&[n, ct, h, w]);
        for img in 0..n {
            for t in 0..ct {
                let b = self.bias.as_ref().map_or(0.0, |bias| bias.data()[t]);
                for row in 0..h {
                    for col in 0..w {
                        let mut acc = b;
                        for s in 0..cs {
                            acc += self.weight.at2(t, s) * f.at4(img, s, row, col);
                        }
                        *out.at4_mut(img, t, row, col) = acc;
                    }
                }
            }
        }
        out
    }
}

fn check_distill_shapes(f_t: &FeatureMap, f_s: &FeatureMap, proj: &ChannelProjection) -> Result<(usize, usize, usize, usize)> {
    let dt = f_t.values.dims();
    let ds = f_s.values.dims();
    if ds[1] != proj.c_s() {
        return Err(Error::shape(format!("student has {} channels, projection expects {}", ds[1], proj.c_s())));
    }
    if dt[1] != proj.c_t() {
        return Err(Error::shape(format!("teacher has {} channels, projection produces {}", dt[1], proj.c_t())));
    }
    if dt[0] != ds[0] || dt[2] != ds[2] || dt[3] != ds[3] {
        return Err(Error::shape(format!("teacher {dt:?} vs student {ds:?} spatial/batch mismatch")));
    }
    Ok((dt[0], dt[1], dt[2], dt[3]))
}

/// Instance-reweighted feature distillation:
/// (1/(N·C·H·W)) ‖ F_T ⊙ M̂_T − proj(F_S) ⊙ M̂_S ‖², with each mask repeated
/// across its network's channels. Normalized by batch size as well as
/// C·H·W so the loss scale is batch-size invariant.
pub fn masked_distill_loss(
    f_t: &FeatureMap,
    f_s: &FeatureMap,
    m_t: &SoftMask,
    m_s: &SoftMask,
    proj: &ChannelProjection,
) -> Result<f64> {
    let (n, c, h, w) = check_distill_shapes(f_t, f_s, proj)?;
    let p = proj.apply(&f_s.values);
    let mut acc = 0.0;
    for img in 0..n {
        for ch in 0..c {
            for row in 0..h {
                for col in 0..w {
                    let t = f_t.values.at4(img, ch, row, col) * m_t.values.at4(img, 0, row, col);
                    let s = p.at4(img, ch, row, col) * m_s.values.at4(img, 0, row, col);
                    let d = t - s;
                    acc += d * d;
                }
            }
        }
    }
    Ok(acc / (n * c * h * w) as f64)
}

/// Shared-mask variant: (1/(N·C·H·W)) ‖ M̂ ⊙ (F_T − proj(F_S)) ‖².
pub fn generic_masked_loss(
    f_t: &FeatureMap,
    f_s: &FeatureMap,
    m: &SoftMask,
    proj: &ChannelProjection,
) -> Result<f64> {
    let (n, c, h, w) = check_distill_shapes(f_t, f_s, proj)?;
    let p = proj.apply(&f_s.values);
    let mut acc = 0.0;
    for img in 0..n {
        for ch in 0..c {
            for row in 0..h {
                for col in 0..w {
                    let d = m.values.at4(img, 0, row, col)
                        * (f_t.values.at4(img, ch, row, col) - p.at4(img, ch, row, col));
                    acc += d * d;
                }
            }
        }
    }
    Ok(acc / (n * c * h * w) as f64)
}
