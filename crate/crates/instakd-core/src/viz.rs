//! Mask rendering: one grayscale heatmap per image (pixel = mask · 255,
//! rounded) plus a side-by-side teacher/student score dump in JSON.
//!
//! Heatmaps are written at mask resolution so the pixel/value correspondence
//! stays exact; viewers can scale them up losslessly with nearest-neighbor.

use crate::error::{Error, Result};
use crate::kernels::conv2d_fwd;
use crate::mask::{build_soft_mask, effective_weight, SoftMask};
use crate::pipeline::DistillConfig;
use crate::roi::{extract_roi_batch, FeatureMap, InstanceSet};
use crate::selector::{score_groups, AttentionScores, ScoreSource, SelectorEnsemble};
use crate::tensor::Tensor;
use crate::toydet::{batch_ground_truth, batch_images, SyntheticScene, TinyDetector, STRIDE};
use std::path::{Path, PathBuf};

/// Student artifacts needed to render the student-side mask.
pub struct StudentViz<'a> {
    pub model: &'a TinyDetector,
    /// 1x1 projection conv weight [C_T, C_S, 1, 1].
    pub proj_w: &'a Tensor,
    /// Projection bias [C_T].
    pub proj_b: &'a Tensor,
}

/// Everything the renderer reads.
pub struct VizInputs<'a> {
    pub teacher: &'a TinyDetector,
    pub ensemble: &'a SelectorEnsemble,
    pub student: Option<StudentViz<'a>>,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct SideScore {
    /// Averaged softmax score of the instance.
    pub score: f64,
    /// The multiplicative weight actually painted into the mask.
    pub weight: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct InstanceScoreRow {
    pub image: usize,
    pub label: usize,
    /// Instance box in feature-map coordinates.
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub group_size: usize,
    pub teacher: SideScore,
    pub student: Option<SideScore>,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct ScoreDump {
    pub softmax_scope: String,
    pub rescale: String,
    pub instances: Vec<InstanceScoreRow>,
}

/// Quantize one image's mask plane to 8-bit grayscale rows (row-major).
pub fn mask_to_gray(mask: &SoftMask, img: usize) -> (Vec<u8>, usize, usize) {
    let d = mask.values.dims();
    let (h, w) = (d[2], d[3]);
    let mut buf = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let v = mask.values.at4(img, 0, row, col);
            buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    (buf, h, w)
}

/// Write one image's mask as a grayscale PNG.
pub fn save_mask_png(mask: &SoftMask, img: usize, path: &Path) -> Result<()> {
    let (buf, h, w) = mask_to_gray(mask, img);
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::L8)
        .map_err(|e| Error::invalid(format!("cannot write {}: {e}", path.display())))
}

fn scores_for(
    neck: &FeatureMap,
    ensemble: &SelectorEnsemble,
    instances: &InstanceSet,
    groups: &[Vec<usize>],
    pool: (usize, usize, usize),
    source: ScoreSource,
) -> AttentionScores {
    let rows = extract_roi_batch(neck, instances, pool.0, pool.1, pool.2);
    AttentionScores::compute(&rows.values, &ensemble.vectors, groups, source)
}

/// Render heatmaps and the score dump for a batch of scenes. Returns the
/// paths written (PNGs first, `scores.json` last).
pub fn render_masks(
    cfg: &DistillConfig,
    inputs: &VizInputs,
    scenes: &[SyntheticScene],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if scenes.is_empty() {
        return Err(Error::invalid("viz needs at least one scene"));
    }
    std::fs::create_dir_all(out_dir)?;
    let n = scenes.len();
    let images = batch_images(scenes);
    let gt = batch_ground_truth(scenes);
    let pool = (cfg.selector.pool_h, cfg.selector.pool_w, cfg.selector.samples_per_bin);
    let rescale = cfg.distill.rescale;

    let t_out = inputs.teacher.forward(&images)?;
    let neck_t = t_out.neck_features;
    let (hf, wf) = (neck_t.height(), neck_t.width());
    let instances = InstanceSet::from_image_boxes(&gt, STRIDE, hf, wf);
    let groups = score_groups(cfg.distill.softmax_scope, instances.batch_index(), n);

    let att_t = (!instances.is_empty()).then(|| {
        scores_for(&neck_t, inputs.ensemble, &instances, &groups, pool, ScoreSource::Teacher)
    });
    let mask_t = match &att_t {
        Some(att) => build_soft_mask(&instances, att, (n, hf, wf), rescale),
        None => SoftMask::all_ones(n, hf, wf),
    };

    let (att_s, mask_s) = match &inputs.student {
        Some(sv) => {
            let s_out = sv.model.forward(&images)?;
            let proj = conv2d_fwd(&s_out.neck_features.values, sv.proj_w, Some(sv.proj_b), 1, 0);
            let proj_map = FeatureMap::new(proj, STRIDE)?;
            let att = (!instances.is_empty()).then(|| {
                scores_for(&proj_map, inputs.ensemble, &instances, &groups, pool, ScoreSource::Student)
            });
            let mask = match &att {
                Some(a) => build_soft_mask(&instances, a, (n, hf, wf), rescale),
                None => SoftMask::all_ones(n, hf, wf),
            };
            (att, Some(mask))
        }
        None => (None, None),
    };

    let mut written = Vec::new();
    for img in 0..n {
        let p = out_dir.join(format!("mask-teacher-{img}.png"));
        save_mask_png(&mask_t, img, &p)?;
        written.push(p);
        if let Some(ms) = &mask_s {
            let p = out_dir.join(format!("mask-student-{img}.png"));
            save_mask_png(ms, img, &p)?;
            written.push(p);
        }
    }

    let mut rows = Vec::new();
    if let Some(att_t) = &att_t {
        for i in 0..instances.len() {
            let b = instances.boxes()[i];
            rows.push(InstanceScoreRow {
                image: instances.batch_index()[i],
                label: instances.labels()[i],
                x1: b.x1,
                y1: b.y1,
                x2: b.x2,
                y2: b.y2,
                group_size: att_t.group_size[i],
                teacher: SideScore {
                    score: att_t.values[i],
                    weight: effective_weight(att_t, i, rescale),
                },
                student: att_s.as_ref().map(|a| SideScore {
                    score: a.values[i],
                    weight: effective_weight(a, i, rescale),
                }),
            });
        }
    }
    let dump = ScoreDump {
        softmax_scope: format!("{:?}", cfg.distill.softmax_scope).to_lowercase(),
        rescale: format!("{:?}", rescale).to_lowercase(),
        instances: rows,
    };
    let path = out_dir.join("scores.json");
    std::fs::write(&path, serde_json::to_string_pretty(&dump)?)?;
    written.push(path);
    Ok(written)
}
