//! A deliberately tiny single-level dense detector. Stride-8 backbone of
//! three downsampling convs, one neck conv (the distillation site), and two
//! 3x3 heads: per-pixel class logits and per-pixel box distances.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::kernels::conv2d_fwd;
use crate::roi::FeatureMap;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Image pixels per feature pixel at the single detection level.
pub const STRIDE: usize = 8;

/// Classification bias init so the initial foreground probability is ~2%,
/// which keeps the focal loss from being swamped by background early on.
pub const CLS_BIAS_INIT: f64 = -3.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DetectorConfig {
    pub channels: usize,
    pub num_classes: usize,
}

/// Dense single-level outputs of a forward pass.
#[derive(Clone, Debug)]
pub struct DetectorOutput {
    pub neck_features: FeatureMap,
    /// [N, num_classes, H, W]
    pub class_logits: Tensor,
    /// [N, 4, H, W]: distances to (left, top, right, bottom) box edges from
    /// the cell center, in stride units.
    pub box_deltas: Tensor,
}

/// Parameters as an ordered, named list: deterministic iteration for the
/// optimizer and a stable naming scheme for checkpoints.
#[derive(Clone, Debug)]
pub struct TinyDetector {
    pub cfg: DetectorConfig,
    pub params: Vec<(String, Tensor)>,
}

/// (name, out_channels, in_channels, stride) for each conv, in forward order.
fn layer_plan(cfg: &DetectorConfig) -> [(&'static str, usize, usize, usize); 6] {
    let c = cfg.channels;
    [
        ("stem", c, 3, 2),
        ("c2", c, c, 2),
        ("c3", c, c, 2),
        ("neck", c, c, 1),
        ("cls", cfg.num_classes, c, 1),
        ("box", 4, c, 1),
    ]
}

impl TinyDetector {
    pub fn init(cfg: DetectorConfig, seed: u64) -> TinyDetector {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (name, c_out, c_in, _) in layer_plan(&cfg) {
            let fan_in = (c_in * 9) as f64;
            let bound = 1.0 / fan_in.sqrt();
            let mut w = Tensor::zeros(&[c_out, c_in, 3, 3]);
            for v in w.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
            let bias_init = if name == "cls" { CLS_BIAS_INIT } else { 0.0 };
            let b = Tensor::filled(&[c_out], bias_init);
            params.push((format!("{name}_w"), w));
            params.push((format!("{name}_b"), b));
        }
        TinyDetector { cfg, params }
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params.iter().find(|(n, _)| n == name).expect("unknown parameter").1
    }

    /// Plain inference forward (no gradients recorded).
    pub fn forward(&self, images: &Tensor) -> Result<DetectorOutput> {
        let mut x = images.clone();
        for (name, _, _, stride) in layer_plan(&self.cfg) {
            if name == "cls" || name == "box" {
                break;
            }
            let w = self.param(&format!("{name}_w"));
            let b = self.param(&format!("{name}_b"));
            x = conv2d_fwd(&x, w, Some(b), stride, 1).map(|v| v.max(0.0));
        }
        let neck = x;
        let class_logits = conv2d_fwd(&neck, self.param("cls_w"), Some(self.param("cls_b")), 1, 1);
        let box_deltas = conv2d_fwd(&neck, self.param("box_w"), Some(self.param("box_b")), 1, 1);
        Ok(DetectorOutput {
            neck_features: FeatureMap::new(neck, STRIDE)?,
            class_logits,
            box_deltas,
        })
    }
}

/// The detector's parameters registered on a tape, in `params` order.
#[derive(Clone, Debug)]
pub struct TapedParams {
    pub vars: Vec<Var>,
}

/// Taped forward outputs.
#[derive(Clone, Copy, Debug)]
pub struct TapedOutput {
    pub neck: Var,
    pub class_logits: Var,
    pub box_deltas: Var,
}

/// Register every parameter on the tape: leaves when training the detector,
/// constants when it acts as a frozen teacher.
pub fn tape_params(tape: &mut Tape, model: &TinyDetector, trainable: bool) -> TapedParams {
    let vars = model
        .params
        .iter()
        .map(|(_, t)| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
        .collect();
    TapedParams { vars }
}

/// Forward pass with gradient recording. `images` must already be on the tape.
pub fn forward_taped(
    tape: &mut Tape,
    model: &TinyDetector,
    params: &TapedParams,
    images: Var,
) -> TapedOutput {
    let var_of = |name: &str| {
        let idx = model
            .params
            .iter()
            .position(|(n, _)| n == name)
            .expect("unknown parameter");
        params.vars[idx]
    };
    let mut x = images;
    for (name, _, _, stride) in layer_plan(&model.cfg) {
        if name == "cls" || name == "box" {
            break;
        }
        let w = var_of(&format!("{name}_w"));
        let b = var_of(&format!("{name}_b"));
        let y = tape.conv2d(x, w, Some(b), stride, 1);
        x = tape.relu(y);
    }
    let neck = x;
    let (cls_w, cls_b) = (var_of("cls_w"), var_of("cls_b"));
    let (box_w, box_b) = (var_of("box_w"), var_of("box_b"));
    let class_logits = tape.conv2d(neck, cls_w, Some(cls_b), 1, 1);
    let box_deltas = tape.conv2d(neck, box_w, Some(box_b), 1, 1);
    TapedOutput { neck, class_logits, box_deltas }
}
