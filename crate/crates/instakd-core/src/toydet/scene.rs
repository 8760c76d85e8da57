//! Deterministic synthetic scenes: colored geometric shapes (the classes)
//! scattered over a textured, noisy background, with exact bounding boxes.

use crate::error::{Error, Result};
use crate::roi::{box_iou, ImageBox};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub const SHAPE_NAMES: [&str; 3] = ["circle", "square", "triangle"];

/// Knobs of the generator. Everything else is derived from the seed.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub image_size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Number of shape classes in play (at most 3: circle, square, triangle).
    pub num_classes: usize,
    /// Amplitude of per-pixel uniform noise added on top of the texture.
    pub noise: f64,
    /// Shape half-extent range in pixels.
    pub min_radius: f64,
    pub max_radius: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 128,
            min_instances: 1,
            max_instances: 4,
            num_classes: 3,
            noise: 0.06,
            min_radius: 10.0,
            max_radius: 22.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::invalid("image_size must be at least 32"));
        }
        if self.min_instances > self.max_instances {
            return Err(Error::invalid("min_instances must not exceed max_instances"));
        }
        if self.num_classes == 0 || self.num_classes > SHAPE_NAMES.len() {
            return Err(Error::invalid(format!(
                "num_classes must be in 1..={}",
                SHAPE_NAMES.len()
            )));
        }
        if !(self.noise >= 0.0 && self.noise <= 0.5) {
            return Err(Error::invalid("noise must be in [0, 0.5]"));
        }
        if !(self.min_radius >= 3.0 && self.min_radius <= self.max_radius) {
            return Err(Error::invalid("radius range invalid"));
        }
        if self.max_radius * 2.0 >= self.image_size as f64 / 2.0 {
            return Err(Error::invalid("max_radius too large for image size"));
        }
        Ok(())
    }
}

/// One generated image with its ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    /// [3, H, W], values in [0, 1].
    pub image: Tensor,
    pub ground_truth: Vec<(ImageBox, usize)>,
    pub generator_seed: u64,
}

/// Signed coverage of a shape at a pixel center: 1 fully inside, 0 outside,
/// a soft ramp of about one pixel at the boundary so edges are not aliased
/// into hard staircases.
fn shape_coverage(class: usize, cx: f64, cy: f64, r: f64, px: f64, py: f64) -> f64 {
    let soft = |signed_dist: f64| (0.5 - signed_dist).clamp(0.0, 1.0);
    match class {
        // circle: distance from center minus radius
        0 => {
            let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() - r;
            soft(d)
        }
        // square: Chebyshev distance minus half-side
        1 => {
            let d = (px - cx).abs().max((py - cy).abs()) - r;
            soft(d)
        }
        // isoceles triangle, apex up at (0, -r), base corners (+-r, +r);
        // signed distance is the max over the three edge half-planes
        2 => {
            let (lx, ly) = (px - cx, py - cy);
            let d_base = ly - r;
            let s5 = 5.0f64.sqrt();
            let d_right = (2.0 * lx - ly - r) / s5;
            let d_left = (-2.0 * lx - ly - r) / s5;
            soft(d_base.max(d_right).max(d_left))
        }
        _ => unreachable!("class id out of palette"),
    }
}

/// Tight bounding box of a shape in image coordinates. All three shapes are
/// sized to exactly span the 2r x 2r box around their center.
fn shape_box(_class: usize, cx: f64, cy: f64, r: f64) -> ImageBox {
    ImageBox { x1: cx - r, y1: cy - r, x2: cx + r, y2: cy + r }
}

/// Render one scene. Bit-exact reproducible from (seed, spec): the RNG is
/// seeded only by `seed`, and all arithmetic is deterministic.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> SyntheticScene {
    let size = spec.image_size;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // Low-frequency textured background: two sinusoids with random phase
    // and orientation per channel, around a random mid gray.
    let mut image = Tensor::zeros(&[3, size, size]);
    let mut base = [0.0f64; 3];
    let mut freq = [[0.0f64; 4]; 3];
    for c in 0..3 {
        base[c] = 0.25 + 0.3 * rng.gen::<f64>();
        for f in 0..4 {
            freq[c][f] = rng.gen::<f64>();
        }
    }
    for c in 0..3 {
        let (fx, fy, phase, amp) = (
            0.02 + 0.06 * freq[c][0],
            0.02 + 0.06 * freq[c][1],
            std::f64::consts::TAU * freq[c][2],
            0.04 + 0.06 * freq[c][3],
        );
        for y in 0..size {
            for x in 0..size {
                let t = (fx * x as f64 + fy * y as f64 + phase).sin();
                *image.at3_mut(c, y, x) = base[c] + amp * t;
            }
        }
    }

    // Instances: rejection-sample centers so boxes stay inside the image and
    // do not overlap too heavily (IoU <= 0.3 against accepted boxes).
    let count = rng.gen_range(spec.min_instances..=spec.max_instances);
    let mut ground_truth: Vec<(ImageBox, usize)> = Vec::with_capacity(count);
    let mut shapes = Vec::with_capacity(count);
    let margin = 2.0;
    for _ in 0..count {
        let class = rng.gen_range(0..spec.num_classes);
        let mut placed = false;
        for _attempt in 0..40 {
            let r = rng.gen_range(spec.min_radius..=spec.max_radius);
            let lo = r + margin;
            let hi = size as f64 - r - margin;
            let cx = rng.gen_range(lo..hi);
            let cy = rng.gen_range(lo..hi);
            let bb = shape_box(class, cx, cy, r);
            if ground_truth.iter().all(|(other, _)| box_iou(&bb, other) <= 0.3) {
                // Shape color pushed away from the local background so the
                // task is learnable: pick a saturated random hue.
                let color = [
                    0.15 + 0.8 * rng.gen::<f64>(),
                    0.15 + 0.8 * rng.gen::<f64>(),
                    0.15 + 0.8 * rng.gen::<f64>(),
                ];
                ground_truth.push((bb, class));
                shapes.push((class, cx, cy, r, color));
                placed = true;
                break;
            }
        }
        if !placed {
            // Crowded scene; skip this instance rather than loop forever.
            continue;
        }
    }

    // Paint shapes in placement order (later shapes occlude earlier ones).
    for &(class, cx, cy, r, color) in &shapes {
        let bb = shape_box(class, cx, cy, r);
        let x0 = (bb.x1.floor().max(0.0)) as usize;
        let y0 = (bb.y1.floor().max(0.0)) as usize;
        let x1 = (bb.x2.ceil() as usize).min(size);
        let y1 = (bb.y2.ceil() as usize).min(size);
        for y in y0..y1 {
            for x in x0..x1 {
                let cov = shape_coverage(class, cx, cy, r, x as f64 + 0.5, y as f64 + 0.5);
                if cov > 0.0 {
                    for c in 0..3 {
                        let v = image.at3(c, y, x);
                        *image.at3_mut(c, y, x) = v * (1.0 - cov) + color[c] * cov;
                    }
                }
            }
        }
    }

    // Per-pixel noise last, clamped into range.
    if spec.noise > 0.0 {
        for v in image.data_mut() {
            let n = spec.noise * (2.0 * rng.gen::<f64>() - 1.0);
            *v = (*v + n).clamp(0.0, 1.0);
        }
    } else {
        for v in image.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }

    SyntheticScene { image, ground_truth, generator_seed: seed }
}

/// Stack scenes into an image batch [N, 3, H, W].
pub fn batch_images(scenes: &[SyntheticScene]) -> Tensor {
    assert!(!scenes.is_empty(), "cannot batch zero scenes");
    let d = scenes[0].image.dims();
    let (c, h, w) = (d[0], d[1], d[2]);
    let mut out = Tensor::zeros(&[scenes.len(), c, h, w]);
    let plane = c * h * w;
    for (i, s) in scenes.iter().enumerate() {
        assert_eq!(s.image.dims(), d, "scene image sizes differ");
        out.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(s.image.data());
    }
    out
}

/// Ground truth of a batch, in the per-image layout the loss and the
/// instance-set builder expect.
pub fn batch_ground_truth(scenes: &[SyntheticScene]) -> Vec<Vec<(ImageBox, usize)>> {
    scenes.iter().map(|s| s.ground_truth.clone()).collect()
}
