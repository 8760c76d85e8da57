//! Acceptance gate: one test per release criterion. Each test ends with a
//! single `[acceptance] cN ...: PASS` line carrying its measured numbers
//! (visible under `--nocapture`); the harness result line for the test is
//! the binding pass/fail signal.
//!
//! c1-c6 are property and oracle checks on the core math. c7-c9 share one
//! full-scale training experiment, built once behind a `OnceLock` and
//! reused by all three.

use instakd_core::autograd::Tape;
use instakd_core::gradcheck::{max_rel_err, numerical_grad, DEFAULT_EPS};
use instakd_core::kernels::conv2d_fwd;
use instakd_core::mask::{
    apply_mask, build_soft_mask, masked_distill_loss, ChannelProjection, Rescale, SoftMask,
};
use instakd_core::pipeline::{
    build_corpora, distill_run, load_checkpoint, params_identical, train_selectors, train_teacher,
    warmup_factor, DistillConfig, StepRecord, TrainVariant,
};
use instakd_core::roi::{
    extract_roi_batch, roi_align, roi_align_grad_into, FeatBox, FeatureMap, InstanceSet,
};
use instakd_core::selector::{
    diversity_loss, diversity_loss_grad, score_groups, score_instances, AttentionScores,
    ScoreScope, ScoreSource,
};
use instakd_core::testutil::{rand_tensor, rand_tensor_in};
use instakd_core::toydet::{
    build_targets, detection_task_loss, detection_task_loss_grad, FocalParams, STRIDE,
};
use instakd_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::sync::OnceLock;
use std::time::Instant;

// ---------------------------------------------------------------------------
// c1: RoIAlign against an independently written dense-sampling oracle
// ---------------------------------------------------------------------------

/// Independent bilinear lookup against the frozen convention: the value of
/// pixel (r, c) sits at continuous point (c + 0.5, r + 0.5), clamped to the
/// border outside the outermost centers. Written corner-first and blending
/// the y axis before x — the opposite order from the production kernel — so
/// a shared mistake cannot cancel.
fn oracle_bilinear(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let cx = (x - 0.5).max(0.0).min((w - 1) as f64);
    let cy = (y - 0.5).max(0.0).min((h - 1) as f64);
    let c0 = cx.floor() as usize;
    let r0 = cy.floor() as usize;
    let c1 = if c0 + 1 < w { c0 + 1 } else { w - 1 };
    let r1 = if r0 + 1 < h { r0 + 1 } else { h - 1 };
    let ax = cx - c0 as f64;
    let ay = cy - r0 as f64;
    let left = plane[r0 * w + c0] * (1.0 - ay) + plane[r1 * w + c0] * ay;
    let right = plane[r0 * w + c1] * (1.0 - ay) + plane[r1 * w + c1] * ay;
    left * (1.0 - ax) + right * ax
}

/// Dense-sampling oracle: average a `density` x `density` midpoint grid of
/// bilinear samples over every pooled bin, channel-major output.
fn oracle_roi_align(
    f: &FeatureMap,
    b: FeatBox,
    batch_index: usize,
    ph: usize,
    pw: usize,
    density: usize,
) -> Vec<f64> {
    let (c, h, w) = (f.channels(), f.height(), f.width());
    let img = &f.values.data()[batch_index * c * h * w..(batch_index + 1) * c * h * w];
    let bin_h = (b.y2 - b.y1) / ph as f64;
    let bin_w = (b.x2 - b.x1) / pw as f64;
    let mut out = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for by in 0..ph {
            for bx in 0..pw {
                let mut acc = 0.0;
                for sy in 0..density {
                    for sx in 0..density {
                        let y = b.y1 + (by as f64 + (sy as f64 + 0.5) / density as f64) * bin_h;
                        let x = b.x1 + (bx as f64 + (sx as f64 + 0.5) / density as f64) * bin_w;
                        acc += oracle_bilinear(plane, h, w, x, y);
                    }
                }
                out.push(acc / (density * density) as f64);
            }
        }
    }
    out
}

fn rand_box(rng: &mut ChaCha12Rng, h: usize, w: usize, margin: f64) -> FeatBox {
    let x1 = rng.gen_range(margin..w as f64 - margin - 0.3);
    let x2 = rng.gen_range(x1 + 0.3..w as f64 - margin);
    let y1 = rng.gen_range(margin..h as f64 - margin - 0.3);
    let y2 = rng.gen_range(y1 + 0.3..h as f64 - margin);
    FeatBox { x1, y1, x2, y2 }
}

/// Values placed at pixel centers from a globally bilinear field
/// a + b*x + c*y + d*x*y. Bilinear interpolation reconstructs such a field
/// exactly, so any symmetric midpoint sample grid inside an interior box
/// averages to the same bin value regardless of its density.
fn bilinear_field(dims: &[usize], coef: [f64; 4]) -> Tensor {
    let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    let mut t = Tensor::zeros(dims);
    for img in 0..n {
        for ch in 0..c {
            let shift = (img * c + ch) as f64 * 0.63;
            for r in 0..h {
                for col in 0..w {
                    let x = col as f64 + 0.5;
                    let y = r as f64 + 0.5;
                    *t.at4_mut(img, ch, r, col) =
                        coef[0] + shift + coef[1] * x + coef[2] * y + coef[3] * x * y;
                }
            }
        }
    }
    t
}

#[test]
fn c1_roi_align_matches_dense_sampling_oracle() {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut pairs = 0usize;

    // Family 1: arbitrary random feature maps and boxes; the oracle samples
    // at the same density the kernel is asked to use, so the comparison is
    // exact for any box while every piece of geometry (bin layout, sample
    // placement, center convention, border clamp, flatten order) is checked
    // against an independent implementation.
    let mut rng = ChaCha12Rng::seed_from_u64(0xACCE01);
    for trial in 0..64u64 {
        let samples = [1usize, 2, 3, 7][(trial % 4) as usize];
        let n = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=3);
        let h = rng.gen_range(5..=9);
        let w = rng.gen_range(5..=9);
        let f = FeatureMap::new(rand_tensor(&[n, c, h, w], 1000 + trial), STRIDE).unwrap();
        let b = rand_box(&mut rng, h, w, 0.0);
        let bi = rng.gen_range(0..n);
        let ph = rng.gen_range(1..=4);
        let pw = rng.gen_range(1..=4);
        let got = roi_align(&f, b, bi, ph, pw, samples);
        let want = oracle_roi_align(&f, b, bi, ph, pw, samples);
        for (g, o) in got.data().iter().zip(&want) {
            worst = worst.max((g - o).abs());
        }
        pairs += 1;
    }

    // Family 2: globally bilinear fields with interior boxes. Here the
    // 100x100 dense average and the production 2x2 sampling are the same
    // number mathematically, so the default sampling rate is held to the
    // dense oracle directly.
    for _trial in 0..56u64 {
        let c = rng.gen_range(1..=2);
        let h = rng.gen_range(6..=10);
        let w = rng.gen_range(6..=10);
        let coef = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.2..0.2),
        ];
        let f = FeatureMap::new(bilinear_field(&[1, c, h, w], coef), STRIDE).unwrap();
        let b = rand_box(&mut rng, h, w, 0.7);
        let ph = rng.gen_range(1..=3);
        let pw = rng.gen_range(1..=3);
        let got = roi_align(&f, b, 0, ph, pw, 2);
        let want = oracle_roi_align(&f, b, 0, ph, pw, 100);
        for (g, o) in got.data().iter().zip(&want) {
            worst = worst.max((g - o).abs());
        }
        pairs += 1;
    }
    assert!(pairs >= 100, "need at least 100 oracle pairs, ran {pairs}");
    assert!(worst < 1e-6, "oracle disagreement {worst:.3e} >= 1e-6");

    // Frozen cross-language constants: the same dense oracle implemented
    // from scratch in another language produced these numbers for a fixed
    // deterministic feature pattern. Guards the convention itself against
    // drift in both implementations at once.
    let mut data = Vec::with_capacity(2 * 36);
    for i in 0..72usize {
        data.push(i as f64 * 0.37 - 3.1);
    }
    let f = FeatureMap::new(Tensor::from_vec(&[1, 2, 6, 6], data).unwrap(), STRIDE).unwrap();
    let case1 = roi_align(&f, FeatBox { x1: 0.7, y1: 1.2, x2: 4.9, y2: 5.3 }, 0, 2, 3, 2);
    let frozen1 = [
        1.0624999999999996,
        1.5804999999999998,
        2.0985,
        5.6135,
        6.1315,
        6.649500000000001,
        14.382499999999999,
        14.9005,
        15.418499999999998,
        18.9335,
        19.4515,
        19.9695,
    ];
    for (g, o) in case1.data().iter().zip(&frozen1) {
        assert!((g - o).abs() < 1e-9, "frozen case 1: {g} vs {o}");
    }
    let case2 = roi_align(&f, FeatBox { x1: 0.0, y1: 0.0, x2: 6.0, y2: 6.0 }, 0, 3, 3, 3);
    let frozen2 = [
        -1.661111111111111,
        -0.9416666666666667,
        -0.22222222222222227,
        2.655555555555556,
        3.375000000000001,
        4.094444444444445,
        6.972222222222222,
        7.691666666666666,
        8.41111111111111,
        11.658888888888889,
        12.378333333333334,
        13.097777777777779,
        15.975555555555555,
        16.695,
        17.41444444444444,
        20.292222222222218,
        21.011666666666667,
        21.73111111111111,
    ];
    for (g, o) in case2.data().iter().zip(&frozen2) {
        assert!((g - o).abs() < 1e-9, "frozen case 2: {g} vs {o}");
    }

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 30.0, "oracle suite took {secs:.1}s, budget 30s");
    println!(
        "[acceptance] c1 roi-align dense oracle: PASS ({pairs} pairs + 2 frozen, max abs err {worst:.2e}, {secs:.2}s)"
    );
}

// ---------------------------------------------------------------------------
// c2: gradient suite, five functions against central finite differences
// ---------------------------------------------------------------------------

const GRAD_TOL: f64 = 1e-4;
const PROBES: u64 = 24;

fn random_groups(rng: &mut ChaCha12Rng, count: usize) -> Vec<Vec<usize>> {
    let n_groups = rng.gen_range(1..=count);
    let mut groups = vec![Vec::new(); n_groups];
    for i in 0..count {
        groups[rng.gen_range(0..n_groups)].push(i);
    }
    groups.retain(|g| !g.is_empty());
    groups
}

fn probe_roi_align_grad(seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (c, h, w) = (rng.gen_range(1..=2), rng.gen_range(5..=7), rng.gen_range(5..=7));
    let x = rand_tensor(&[1, c, h, w], seed.wrapping_mul(31) + 7);
    let b = rand_box(&mut rng, h, w, 0.0);
    let (ph, pw, samples) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=2));
    let weights = rand_tensor(&[c, ph, pw], seed.wrapping_mul(17) + 3);

    let objective = |t: &Tensor| {
        let f = FeatureMap::new(t.clone(), STRIDE).unwrap();
        let out = roi_align(&f, b, 0, ph, pw, samples);
        out.data().iter().zip(weights.data()).map(|(o, g)| o * g).sum()
    };
    let mut analytic = Tensor::zeros(x.dims());
    roi_align_grad_into(&mut analytic, weights.data(), x.dims(), b, 0, ph, pw, samples);
    let numeric = numerical_grad(&x, objective, DEFAULT_EPS);
    max_rel_err(analytic.data(), numeric.data(), 1e-6)
}

fn probe_score_instances_grad(seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (i, d, k) = (rng.gen_range(2..=6), rng.gen_range(3..=9), rng.gen_range(1..=4));
    let feats = rand_tensor(&[i, d], seed.wrapping_mul(41) + 1);
    let vectors = rand_tensor(&[k, d], seed.wrapping_mul(43) + 2);
    let groups = random_groups(&mut rng, i);
    let target = rand_tensor(&[i, k], seed.wrapping_mul(47) + 5);
    let sq = |s: &Tensor| -> f64 {
        s.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum()
    };

    let mut tape = Tape::new();
    let f_v = tape.leaf(feats.clone());
    let e_v = tape.leaf(vectors.clone());
    let logits = tape.matmul_nt(f_v, e_v);
    let probs = tape.softmax_groups(logits, &groups);
    let t_v = tape.constant(target.clone());
    let diff = tape.sub(probs, t_v);
    let loss = tape.sum_sq(diff);
    let grads = tape.backward(loss);

    let g_f = grads.get(f_v).expect("features gradient");
    let g_e = grads.get(e_v).expect("selector gradient");
    let num_f = numerical_grad(&feats, |t| sq(&score_instances(t, &vectors, &groups)), DEFAULT_EPS);
    let num_e = numerical_grad(&vectors, |t| sq(&score_instances(&feats, t, &groups)), DEFAULT_EPS);
    max_rel_err(g_f.data(), num_f.data(), 1e-6).max(max_rel_err(g_e.data(), num_e.data(), 1e-6))
}

fn probe_diversity_grad(seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (k, d) = (rng.gen_range(2..=6), rng.gen_range(2..=10));
    let v = rand_tensor(&[k, d], seed.wrapping_mul(53) + 11);
    let (_, analytic) = diversity_loss_grad(&v);
    let numeric = numerical_grad(&v, diversity_loss, DEFAULT_EPS);
    max_rel_err(analytic.data(), numeric.data(), 1e-6)
}

struct MaskedProbe {
    neck_t: FeatureMap,
    m_t: SoftMask,
    f_s: Tensor,
    proj_w: Tensor,
    proj_b: Tensor,
    vectors: Tensor,
    instances: InstanceSet,
    groups: Vec<Vec<usize>>,
    sizes: Vec<usize>,
    rescale: Rescale,
    pool: (usize, usize, usize),
}

fn masked_probe(seed: u64, rescale: Rescale) -> MaskedProbe {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (n, c_s, c_t, hf, wf) = (1usize, 2usize, 3usize, 6usize, 6usize);
    let f_s = rand_tensor(&[n, c_s, hf, wf], seed.wrapping_mul(59) + 1);
    let neck_t = FeatureMap::new(rand_tensor(&[n, c_t, hf, wf], seed.wrapping_mul(61) + 2), STRIDE).unwrap();
    let proj_w = rand_tensor_in(&[c_t, c_s, 1, 1], -0.7, 0.7, seed.wrapping_mul(67) + 3);
    let proj_b = rand_tensor_in(&[c_t], -0.2, 0.2, seed.wrapping_mul(71) + 4);
    let boxes = (0..3)
        .map(|_| rand_box(&mut rng, hf, wf, 0.0))
        .collect::<Vec<_>>();
    let instances = InstanceSet::new(boxes, vec![0, 0, 0], vec![0, 1, 2], n, hf, wf).unwrap();
    let groups = score_groups(ScoreScope::Batch, instances.batch_index(), n);
    let sizes = vec![instances.len(); instances.len()];
    let (ph, pw) = (2usize, 2usize);
    // Concentrated selector directions keep mean-one rescaling away from its
    // clamp corner so finite differences stay on one side of it.
    let scale = if rescale == Rescale::MeanOne { 4.0 } else { 1.0 };
    let mut vectors = rand_tensor(&[2, c_t * ph * pw], seed.wrapping_mul(73) + 5);
    for v in vectors.data_mut() {
        *v *= scale;
    }
    let att_t = {
        let rows = extract_roi_batch(&neck_t, &instances, ph, pw, 2);
        AttentionScores::compute(&rows.values, &vectors, &groups, ScoreSource::Teacher)
    };
    let m_t = build_soft_mask(&instances, &att_t, (n, hf, wf), rescale);
    MaskedProbe {
        neck_t,
        m_t,
        f_s,
        proj_w,
        proj_b,
        vectors,
        instances,
        groups,
        sizes,
        rescale,
        pool: (ph, pw, 2),
    }
}

/// Plain (tape-free) recomputation of the student-aware masked loss: project,
/// pool, score, mask, then the masked squared difference.
fn masked_composite_plain(p: &MaskedProbe, f_s: &Tensor, w: &Tensor, b: &Tensor) -> f64 {
    let proj = conv2d_fwd(f_s, w, Some(b), 1, 0);
    let pm = FeatureMap::new(proj, STRIDE).unwrap();
    let (ph, pw, samples) = p.pool;
    let rows = extract_roi_batch(&pm, &p.instances, ph, pw, samples);
    let att = AttentionScores::compute(&rows.values, &p.vectors, &p.groups, ScoreSource::Student);
    let dims = p.neck_t.values.dims();
    let m_s = build_soft_mask(&p.instances, &att, (dims[0], dims[2], dims[3]), p.rescale);
    let ident = ChannelProjection::identity(dims[1]);
    masked_distill_loss(&p.neck_t, &pm, &p.m_t, &m_s, &ident).unwrap()
}

/// Check that mean-one rescaling is not sitting on its clamp corner for any
/// instance, where the two one-sided derivatives differ and a central
/// difference would measure neither.
fn assert_away_from_clamp(p: &MaskedProbe, f_s: &Tensor) {
    if p.rescale != Rescale::MeanOne {
        return;
    }
    let proj = conv2d_fwd(f_s, &p.proj_w, Some(&p.proj_b), 1, 0);
    let pm = FeatureMap::new(proj, STRIDE).unwrap();
    let (ph, pw, samples) = p.pool;
    let rows = extract_roi_batch(&pm, &p.instances, ph, pw, samples);
    let att = AttentionScores::compute(&rows.values, &p.vectors, &p.groups, ScoreSource::Student);
    for (i, &v) in att.values.iter().enumerate() {
        let a = v * att.group_size[i] as f64;
        assert!(
            (a - 1.0).abs() > 1e-3,
            "probe degenerate: instance {i} sits at the mean-one clamp ({a})"
        );
    }
}

fn probe_masked_distill_grad(seed: u64, rescale: Rescale) -> f64 {
    let p = masked_probe(seed, rescale);
    assert_away_from_clamp(&p, &p.f_s);
    let dims = p.neck_t.values.dims();
    let norm = 1.0 / (dims[0] * dims[1] * dims[2] * dims[3]) as f64;
    let (ph, pw, samples) = p.pool;

    let mut tape = Tape::new();
    let f_v = tape.leaf(p.f_s.clone());
    let w_v = tape.leaf(p.proj_w.clone());
    let b_v = tape.leaf(p.proj_b.clone());
    let proj = tape.conv2d(f_v, w_v, Some(b_v), 1, 0);
    let rows = tape.roi_batch(proj, STRIDE, &p.instances, ph, pw, samples);
    let e_v = tape.constant(p.vectors.clone());
    let logits = tape.matmul_nt(rows, e_v);
    let probs = tape.softmax_groups(logits, &p.groups);
    let avg = tape.mean_axis1(probs);
    let m_s = tape.build_mask(avg, &p.instances, (dims[0], dims[2], dims[3]), p.rescale, &p.sizes);
    let s_masked = tape.mul_mask(proj, m_s);
    let t_masked = apply_mask(&p.neck_t, &p.m_t).unwrap();
    let t_v = tape.constant(t_masked.values);
    let diff = tape.sub(t_v, s_masked);
    let ss = tape.sum_sq(diff);
    let loss = tape.scale(ss, norm);

    let analytic_value = tape.scalar_value(loss);
    let plain_value = masked_composite_plain(&p, &p.f_s, &p.proj_w, &p.proj_b);
    assert!(
        (analytic_value - plain_value).abs() <= 1e-9 * plain_value.abs().max(1.0),
        "taped value {analytic_value} diverges from plain recomputation {plain_value}"
    );

    let grads = tape.backward(loss);
    let g_f = grads.get(f_v).expect("student feature gradient");
    let g_w = grads.get(w_v).expect("projection weight gradient");
    let g_b = grads.get(b_v).expect("projection bias gradient");
    let num_f = numerical_grad(&p.f_s, |t| masked_composite_plain(&p, t, &p.proj_w, &p.proj_b), DEFAULT_EPS);
    let num_w = numerical_grad(&p.proj_w, |t| masked_composite_plain(&p, &p.f_s, t, &p.proj_b), DEFAULT_EPS);
    let num_b = numerical_grad(&p.proj_b, |t| masked_composite_plain(&p, &p.f_s, &p.proj_w, t), DEFAULT_EPS);
    max_rel_err(g_f.data(), num_f.data(), 1e-6)
        .max(max_rel_err(g_w.data(), num_w.data(), 1e-6))
        .max(max_rel_err(g_b.data(), num_b.data(), 1e-6))
}

fn probe_detection_loss_grad(seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (n, classes, h, w) = (1usize, rng.gen_range(1..=3), 4usize, 4usize);
    let img = (w * STRIDE) as f64;
    let mut gt = vec![Vec::new(); n];
    for img_gt in gt.iter_mut() {
        for _ in 0..rng.gen_range(1..=3) {
            let x1 = rng.gen_range(0.0..img - 10.0);
            let y1 = rng.gen_range(0.0..img - 10.0);
            let b = instakd_core::roi::ImageBox {
                x1,
                y1,
                x2: rng.gen_range(x1 + 9.0..img),
                y2: rng.gen_range(y1 + 9.0..img),
            };
            img_gt.push((b, rng.gen_range(0..classes)));
        }
    }
    let targets = build_targets(&gt, h, w, classes);
    let logits = rand_tensor(&[n, classes, h, w], seed.wrapping_mul(83) + 9);
    // Keep every regression residual well away from zero so the kink in the
    // absolute-value term stays outside the finite-difference window.
    let mut deltas = targets.boxes.clone();
    for v in deltas.data_mut() {
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        *v += sign * rng.gen_range(0.05..0.5);
    }
    let focal = FocalParams::default();
    let (_, d_cls, d_box) = detection_task_loss_grad(&logits, &deltas, &targets, focal);
    let num_cls = numerical_grad(&logits, |t| detection_task_loss(t, &deltas, &targets, focal), DEFAULT_EPS);
    let num_box = numerical_grad(&deltas, |t| detection_task_loss(&logits, t, &targets, focal), DEFAULT_EPS);
    max_rel_err(d_cls.data(), num_cls.data(), 1e-6)
        .max(max_rel_err(d_box.data(), num_box.data(), 1e-6))
}

#[test]
fn c2_gradient_suite_matches_finite_differences() {
    let t0 = Instant::now();
    let mut worst = [0.0f64; 5];
    for probe in 0..PROBES {
        worst[0] = worst[0].max(probe_roi_align_grad(0x6A01 + probe));
        worst[1] = worst[1].max(probe_score_instances_grad(0x6A02 + probe));
        worst[2] = worst[2].max(probe_diversity_grad(0x6A03 + probe));
        let rescale = if probe % 3 == 2 { Rescale::MeanOne } else { Rescale::None };
        worst[3] = worst[3].max(probe_masked_distill_grad(0x6A04 + probe, rescale));
        worst[4] = worst[4].max(probe_detection_loss_grad(0x6A05 + probe));
    }
    let names = ["roi_align", "score_instances", "diversity_loss", "masked_distill_loss", "detection_task_loss"];
    for (name, &err) in names.iter().zip(&worst) {
        assert!(err < GRAD_TOL, "{name}: max rel err {err:.3e} >= {GRAD_TOL:.0e} over {PROBES} probes");
    }
    println!(
        "[acceptance] c2 gradient suite: PASS ({PROBES} probes each; worst rel err roi {:.1e}, scores {:.1e}, diversity {:.1e}, distill {:.1e}, detection {:.1e}; {:.1}s)",
        worst[0], worst[1], worst[2], worst[3], worst[4], t0.elapsed().as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// c3: diversity loss closed forms and invariances
// ---------------------------------------------------------------------------

#[test]
fn c3_diversity_closed_forms_and_invariances() {
    // Mutually orthogonal rows -> 0, including a non-axis-aligned basis.
    let axis = Tensor::from_vec(&[3, 3], vec![2.0, 0.0, 0.0, 0.0, -1.5, 0.0, 0.0, 0.0, 0.25]).unwrap();
    assert!(diversity_loss(&axis).abs() < 1e-9);
    let rotated = Tensor::from_vec(&[3, 3], vec![3.0, 4.0, 0.0, -4.0, 3.0, 0.0, 0.0, 0.0, 7.0]).unwrap();
    assert!(diversity_loss(&rotated).abs() < 1e-9);

    // K identical unit vectors -> K - 1.
    for k in 2..=6usize {
        let unit = [0.6, 0.8, 0.0, 0.0];
        let mut data = Vec::new();
        for _ in 0..k {
            data.extend_from_slice(&unit);
        }
        let v = Tensor::from_vec(&[k, 4], data).unwrap();
        assert!(
            (diversity_loss(&v) - (k as f64 - 1.0)).abs() < 1e-9,
            "k={k}: {}",
            diversity_loss(&v)
        );
    }

    // The two-vector worked example (1,0), (1,1) -> 2/3.
    let pair = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
    assert!((diversity_loss(&pair) - 2.0 / 3.0).abs() < 1e-9);

    // Scale and permutation invariance on random ensembles.
    let mut rng = ChaCha12Rng::seed_from_u64(0xD1F);
    let mut worst: f64 = 0.0;
    for trial in 0..12u64 {
        let (k, d) = (rng.gen_range(2..=6), rng.gen_range(2..=12));
        let v = rand_tensor(&[k, d], 0xC3 + trial);
        let base = diversity_loss(&v);
        for scale in [0.03, 0.5, 9.0, 120.0] {
            let mut scaled = v.clone();
            for x in scaled.data_mut() {
                *x *= scale;
            }
            worst = worst.max((diversity_loss(&scaled) - base).abs());
        }
        let mut order: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut permuted = Vec::with_capacity(k * d);
        for &row in &order {
            permuted.extend_from_slice(&v.data()[row * d..(row + 1) * d]);
        }
        let pv = Tensor::from_vec(&[k, d], permuted).unwrap();
        worst = worst.max((diversity_loss(&pv) - base).abs());
    }
    assert!(worst < 1e-9, "invariance violation {worst:.3e}");
    println!("[acceptance] c3 diversity closed forms: PASS (worst invariance deviation {worst:.2e})");
}

// ---------------------------------------------------------------------------
// c4: unit scores reduce the masked loss to the plain feature difference
// ---------------------------------------------------------------------------

#[test]
fn c4_unit_scores_reduce_to_plain_feature_mse() {
    let mut rng = ChaCha12Rng::seed_from_u64(0xFE7);
    let mut worst: f64 = 0.0;
    for trial in 0..10u64 {
        let (n, c_t, c_s, h, w) = (
            rng.gen_range(1..=2),
            rng.gen_range(2..=4),
            rng.gen_range(1..=3),
            rng.gen_range(4..=7),
            rng.gen_range(4..=7),
        );
        let f_t = FeatureMap::new(rand_tensor(&[n, c_t, h, w], 0x40 + trial), STRIDE).unwrap();
        let f_s = FeatureMap::new(rand_tensor(&[n, c_s, h, w], 0x80 + trial), STRIDE).unwrap();
        let proj = ChannelProjection::init(c_t, c_s, 0xC0 + trial, true);

        let count = rng.gen_range(1..=4);
        let boxes = (0..count).map(|_| rand_box(&mut rng, h, w, 0.0)).collect::<Vec<_>>();
        let batch_index = (0..count).map(|_| rng.gen_range(0..n)).collect::<Vec<_>>();
        let instances = InstanceSet::new(boxes, batch_index, vec![0; count], n, h, w).unwrap();
        let unit = AttentionScores {
            values: vec![1.0; count],
            source: ScoreSource::Teacher,
            per_selector: None,
            group_size: vec![count; count],
        };
        let m = build_soft_mask(&instances, &unit, (n, h, w), Rescale::None);

        let masked = masked_distill_loss(&f_t, &f_s, &m, &m, &proj).unwrap();
        let ones = SoftMask::all_ones(n, h, w);
        let all_ones = masked_distill_loss(&f_t, &f_s, &ones, &ones, &proj).unwrap();
        let p = proj.apply(&f_s.values);
        let mut mse = 0.0;
        for (t, s) in f_t.values.data().iter().zip(p.data()) {
            mse += (t - s) * (t - s);
        }
        mse /= (n * c_t * h * w) as f64;

        worst = worst.max((masked - mse).abs()).max((all_ones - mse).abs());
    }
    assert!(worst < 1e-9, "reduction identity violated by {worst:.3e}");
    println!("[acceptance] c4 unit-score reduction identity: PASS (10 random inputs, worst gap {worst:.2e})");
}

// ---------------------------------------------------------------------------
// c5: soft mask against per-pixel brute force
// ---------------------------------------------------------------------------

#[test]
fn c5_soft_mask_matches_brute_force() {
    let mut rng = ChaCha12Rng::seed_from_u64(0x3A5C);
    let mut background_pixels = 0usize;
    let mut overlapping_configs = 0usize;
    for trial in 0..60 {
        let n = rng.gen_range(1..=2);
        let h = rng.gen_range(4..=9);
        let w = rng.gen_range(4..=9);
        let count = rng.gen_range(0..=7);
        let rescale = if trial % 2 == 0 { Rescale::None } else { Rescale::MeanOne };
        // Half the configs keep row 0 instance-free so exact background
        // coverage is exercised every time.
        let y_floor = if trial % 2 == 0 { 1.2 } else { 0.0 };

        let mut boxes = Vec::new();
        let mut batch_index = Vec::new();
        for _ in 0..count {
            let x1 = rng.gen_range(0.0..w as f64 - 0.4);
            let x2 = rng.gen_range(x1 + 0.3..w as f64);
            let y1 = rng.gen_range(y_floor..h as f64 - 0.4);
            let y2 = rng.gen_range(y1 + 0.3..h as f64);
            boxes.push(FeatBox { x1, y1, x2, y2 });
            batch_index.push(rng.gen_range(0..n));
        }
        let instances = InstanceSet::new(boxes, batch_index, vec![0; count], n, h, w).unwrap();
        let scores = AttentionScores {
            values: (0..count).map(|_| rng.gen_range(1e-6..1.0)).collect(),
            source: ScoreSource::Teacher,
            per_selector: None,
            group_size: (0..count).map(|_| rng.gen_range(1..=4)).collect(),
        };
        let m = build_soft_mask(&instances, &scores, (n, h, w), rescale);

        // Independent per-pixel recomputation, multiplying weights in
        // instance order exactly as the contract states.
        let mut covered_twice = false;
        for img in 0..n {
            for row in 0..h {
                for col in 0..w {
                    let mut expect = 1.0;
                    let mut cover = 0usize;
                    for i in 0..instances.len() {
                        if instances.batch_index()[i] != img {
                            continue;
                        }
                        let b = instances.boxes()[i];
                        let inside = (row as f64) >= b.y1.floor()
                            && (row as f64) < b.y2.ceil()
                            && (col as f64) >= b.x1.floor()
                            && (col as f64) < b.x2.ceil();
                        if inside {
                            let a = match rescale {
                                Rescale::None => scores.values[i],
                                Rescale::MeanOne => {
                                    (scores.values[i] * scores.group_size[i] as f64).min(1.0)
                                }
                            };
                            expect *= a;
                            cover += 1;
                        }
                    }
                    let got = m.values.at4(img, 0, row, col);
                    assert_eq!(
                        got.to_bits(),
                        expect.to_bits(),
                        "trial {trial} pixel ({img},{row},{col}): {got} vs {expect}"
                    );
                    if cover == 0 {
                        assert_eq!(got, 1.0, "background pixel must be exactly 1");
                        background_pixels += 1;
                    }
                    if cover >= 2 {
                        covered_twice = true;
                    }
                }
            }
        }
        if covered_twice {
            overlapping_configs += 1;
        }
    }
    assert!(background_pixels > 0, "no background pixels exercised");
    assert!(overlapping_configs >= 10, "too few overlapping configurations: {overlapping_configs}");
    println!(
        "[acceptance] c5 soft-mask brute force: PASS (60 configs bit-exact, {overlapping_configs} with overlaps, {background_pixels} background pixels exactly 1)"
    );
}

// ---------------------------------------------------------------------------
// c6: detached scores carry exactly zero gradient through the student path
// ---------------------------------------------------------------------------

#[test]
fn c6_detached_scores_cut_student_score_gradient() {
    let p = masked_probe(0x0DE7AC, Rescale::None);
    let dims = p.neck_t.values.dims();
    let shape = (dims[0], dims[2], dims[3]);
    let norm = 1.0 / (dims[0] * dims[1] * dims[2] * dims[3]) as f64;
    let (ph, pw, samples) = p.pool;
    let t_masked = apply_mask(&p.neck_t, &p.m_t).unwrap();

    // Run A: full graph with the score path detached, as training does.
    let grad_detached = {
        let mut tape = Tape::new();
        let f_v = tape.leaf(p.f_s.clone());
        let w_v = tape.leaf(p.proj_w.clone());
        let b_v = tape.leaf(p.proj_b.clone());
        let proj = tape.conv2d(f_v, w_v, Some(b_v), 1, 0);
        let rows = tape.roi_batch(proj, STRIDE, &p.instances, ph, pw, samples);
        let rows = tape.detach(rows);
        let e_v = tape.constant(p.vectors.clone());
        let logits = tape.matmul_nt(rows, e_v);
        let probs = tape.softmax_groups(logits, &p.groups);
        let avg = tape.mean_axis1(probs);
        let m_s = tape.build_mask(avg, &p.instances, shape, p.rescale, &p.sizes);
        let s_masked = tape.mul_mask(proj, m_s);
        let t_v = tape.constant(t_masked.values.clone());
        let diff = tape.sub(t_v, s_masked);
        let ss = tape.sum_sq(diff);
        let loss = tape.scale(ss, norm);
        let grads = tape.backward(loss);
        (
            grads.get(f_v).unwrap().clone(),
            grads.get(w_v).unwrap().clone(),
            grads.get(b_v).unwrap().clone(),
        )
    };

    // Run B: frozen-score recomputation — the student mask is rebuilt as a
    // constant from plainly computed scores, so no score path exists at all.
    let grad_frozen = {
        let proj_plain = conv2d_fwd(&p.f_s, &p.proj_w, Some(&p.proj_b), 1, 0);
        let pm = FeatureMap::new(proj_plain, STRIDE).unwrap();
        let rows = extract_roi_batch(&pm, &p.instances, ph, pw, samples);
        let att = AttentionScores::compute(&rows.values, &p.vectors, &p.groups, ScoreSource::Student);
        let m_s_plain = build_soft_mask(&p.instances, &att, shape, p.rescale);

        let mut tape = Tape::new();
        let f_v = tape.leaf(p.f_s.clone());
        let w_v = tape.leaf(p.proj_w.clone());
        let b_v = tape.leaf(p.proj_b.clone());
        let proj = tape.conv2d(f_v, w_v, Some(b_v), 1, 0);
        let m_s = tape.constant(m_s_plain.values);
        let s_masked = tape.mul_mask(proj, m_s);
        let t_v = tape.constant(t_masked.values.clone());
        let diff = tape.sub(t_v, s_masked);
        let ss = tape.sum_sq(diff);
        let loss = tape.scale(ss, norm);
        let grads = tape.backward(loss);
        (
            grads.get(f_v).unwrap().clone(),
            grads.get(w_v).unwrap().clone(),
            grads.get(b_v).unwrap().clone(),
        )
    };

    for ((a, b), name) in [
        ((&grad_detached.0, &grad_frozen.0), "features"),
        ((&grad_detached.1, &grad_frozen.1), "projection weight"),
        ((&grad_detached.2, &grad_frozen.2), "projection bias"),
    ] {
        assert_eq!(a.dims(), b.dims());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(
                x.to_bits(),
                y.to_bits(),
                "{name}: detached gradient differs from frozen-score recomputation ({x} vs {y})"
            );
        }
    }

    // Run C: isolate the score path by also detaching the feature branch.
    // With detached scores nothing reaches the inputs: the gradient is not
    // merely small, it does not exist.
    {
        let mut tape = Tape::new();
        let f_v = tape.leaf(p.f_s.clone());
        let w_v = tape.leaf(p.proj_w.clone());
        let b_v = tape.leaf(p.proj_b.clone());
        let proj = tape.conv2d(f_v, w_v, Some(b_v), 1, 0);
        let rows = tape.roi_batch(proj, STRIDE, &p.instances, ph, pw, samples);
        let rows = tape.detach(rows);
        let e_v = tape.constant(p.vectors.clone());
        let logits = tape.matmul_nt(rows, e_v);
        let probs = tape.softmax_groups(logits, &p.groups);
        let avg = tape.mean_axis1(probs);
        let m_s = tape.build_mask(avg, &p.instances, shape, p.rescale, &p.sizes);
        let proj_frozen = tape.detach(proj);
        let s_masked = tape.mul_mask(proj_frozen, m_s);
        let t_v = tape.constant(t_masked.values.clone());
        let diff = tape.sub(t_v, s_masked);
        let ss = tape.sum_sq(diff);
        let loss = tape.scale(ss, norm);
        let grads = tape.backward(loss);
        assert!(grads.get(f_v).is_none(), "detached score path leaked gradient to features");
        assert!(grads.get(w_v).is_none(), "detached score path leaked gradient to weights");
    }

    // Run D: the same isolated graph without the detach must carry gradient,
    // proving the detach is what cut it rather than the path being dead.
    {
        let mut tape = Tape::new();
        let f_v = tape.leaf(p.f_s.clone());
        let w_v = tape.leaf(p.proj_w.clone());
        let b_v = tape.leaf(p.proj_b.clone());
        let proj = tape.conv2d(f_v, w_v, Some(b_v), 1, 0);
        let rows = tape.roi_batch(proj, STRIDE, &p.instances, ph, pw, samples);
        let e_v = tape.constant(p.vectors.clone());
        let logits = tape.matmul_nt(rows, e_v);
        let probs = tape.softmax_groups(logits, &p.groups);
        let avg = tape.mean_axis1(probs);
        let m_s = tape.build_mask(avg, &p.instances, shape, p.rescale, &p.sizes);
        let proj_frozen = tape.detach(proj);
        let s_masked = tape.mul_mask(proj_frozen, m_s);
        let t_v = tape.constant(t_masked.values.clone());
        let diff = tape.sub(t_v, s_masked);
        let ss = tape.sum_sq(diff);
        let loss = tape.scale(ss, norm);
        let grads = tape.backward(loss);
        let g = grads.get(f_v).expect("live score path must reach features");
        assert!(g.data().iter().any(|v| v.abs() > 0.0), "live score path produced an all-zero gradient");
    }

    println!("[acceptance] c6 detach contract: PASS (bitwise equal to frozen-score run; isolated path carries no gradient)");
}

// ---------------------------------------------------------------------------
// Shared full-scale experiment for c7-c9
// ---------------------------------------------------------------------------

struct Experiment {
    teacher_map: f64,
    liaf: Vec<f64>,
    fitnet: Vec<f64>,
    no_kd: Vec<f64>,
    teacher_only: Vec<f64>,
    comparison_cpu_min: f64,
    comparison_wall_min: f64,
    liaf_steps: Vec<StepRecord>,
    no_kd_steps: Vec<StepRecord>,
    liaf_rerun_max_curve_diff: f64,
    liaf_rerun_ckpt_identical: bool,
    tom_rerun_bit_identical: bool,
    warmup_frac: f64,
    lambda: f64,
    ensemble_dims: Vec<usize>,
    /// Student architecture trained from scratch for as many epochs as the
    /// teacher got, to show the capacity gap is real.
    scratch_at_teacher_epochs: f64,
    /// One attention-distilled run with per-image softmax normalization, so
    /// both scoping conventions appear in the report.
    image_scope_liaf: f64,
}

/// Process CPU time in seconds from /proc/self/stat (utime + stime at the
/// usual 100 ticks per second), NaN when unavailable.
fn cpu_seconds() -> f64 {
    let Ok(stat) = std::fs::read_to_string("/proc/self/stat") else {
        return f64::NAN;
    };
    let Some(pos) = stat.rfind(')') else {
        return f64::NAN;
    };
    let fields: Vec<&str> = stat[pos + 1..].split_whitespace().collect();
    // After the parenthesized command: state is field 0, utime is field 11,
    // stime is field 12.
    match (fields.get(11), fields.get(12)) {
        (Some(u), Some(s)) => {
            let ticks: f64 = u.parse::<f64>().unwrap_or(f64::NAN) + s.parse::<f64>().unwrap_or(f64::NAN);
            ticks / 100.0
        }
        _ => f64::NAN,
    }
}

fn steps_bit_identical(a: &[StepRecord], b: &[StepRecord]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.step == y.step
                && x.task_loss.to_bits() == y.task_loss.to_bits()
                && x.distill_loss.to_bits() == y.distill_loss.to_bits()
                && x.lr.to_bits() == y.lr.to_bits()
        })
}

fn max_curve_diff(a: &[StepRecord], b: &[StepRecord]) -> f64 {
    assert_eq!(a.len(), b.len(), "runs produced different step counts");
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            (x.task_loss - y.task_loss)
                .abs()
                .max((x.distill_loss - y.distill_loss).abs())
        })
        .fold(0.0, f64::max)
}

fn run_experiment() -> Experiment {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    let mut cfg = DistillConfig::default();
    cfg.root_seed = 0;
    cfg.data_seed = Some(0);
    cfg.validate().expect("default config validates");
    let corpora = build_corpora(&cfg);
    let seeds = [101u64, 102, 103];

    let wall0 = Instant::now();
    let cpu0 = cpu_seconds();
    println!("[acceptance] training teacher ...");
    let (teacher, trec) = train_teacher(&cfg, &corpora, &root.join("teacher")).expect("teacher");
    let teacher_map = trec.final_map().expect("teacher evaluated");
    println!("[acceptance] teacher map {teacher_map:.4}; training selectors ...");
    let (ensemble, _) = train_selectors(&cfg, &teacher, &corpora, &root.join("sel")).expect("selectors");

    let mut liaf = Vec::new();
    let mut fitnet = Vec::new();
    let mut no_kd = Vec::new();
    let mut liaf_steps = Vec::new();
    let mut no_kd_steps = Vec::new();
    for &seed in &seeds {
        let mut c = cfg.clone();
        c.root_seed = seed;
        let (_, r) = distill_run(&c, TrainVariant::Liaf, Some(&teacher), Some(&ensemble), &corpora, &root.join(format!("liaf-{seed}"))).expect("liaf run");
        println!("[acceptance] liaf seed {seed}: map {:.4}", r.final_map().unwrap());
        if seed == seeds[0] {
            liaf_steps = r.steps.clone();
        }
        liaf.push(r.final_map().unwrap());
        let (_, r) = distill_run(&c, TrainVariant::FitnetAllOnes, Some(&teacher), None, &corpora, &root.join(format!("fit-{seed}"))).expect("fitnet run");
        println!("[acceptance] fitnet seed {seed}: map {:.4}", r.final_map().unwrap());
        fitnet.push(r.final_map().unwrap());
        let (_, r) = distill_run(&c, TrainVariant::NoKd, None, None, &corpora, &root.join(format!("nokd-{seed}"))).expect("no_kd run");
        println!("[acceptance] no_kd seed {seed}: map {:.4}", r.final_map().unwrap());
        if seed == seeds[0] {
            no_kd_steps = r.steps.clone();
        }
        no_kd.push(r.final_map().unwrap());
    }
    let comparison_cpu_min = (cpu_seconds() - cpu0) / 60.0;
    let comparison_wall_min = wall0.elapsed().as_secs_f64() / 60.0;

    // Teacher-only masking ablation, plus a bit-exact repeat on one seed.
    let mut teacher_only = Vec::new();
    let mut tom_first_steps = Vec::new();
    for &seed in &seeds {
        let mut c = cfg.clone();
        c.root_seed = seed;
        let (_, r) = distill_run(&c, TrainVariant::TeacherOnlyMask, Some(&teacher), Some(&ensemble), &corpora, &root.join(format!("tom-{seed}"))).expect("teacher-only run");
        println!("[acceptance] teacher_only_mask seed {seed}: map {:.4}", r.final_map().unwrap());
        if seed == seeds[0] {
            tom_first_steps = r.steps.clone();
        }
        teacher_only.push(r.final_map().unwrap());
    }
    let tom_rerun_bit_identical = {
        let mut c = cfg.clone();
        c.root_seed = seeds[0];
        let (_, r) = distill_run(&c, TrainVariant::TeacherOnlyMask, Some(&teacher), Some(&ensemble), &corpora, &root.join("tom-rerun")).expect("teacher-only rerun");
        let a = load_checkpoint(&root.join(format!("tom-{}/student.ckpt", seeds[0]))).unwrap();
        let b = load_checkpoint(&root.join("tom-rerun/student.ckpt")).unwrap();
        steps_bit_identical(&tom_first_steps, &r.steps) && params_identical(&a.tensors, &b.tensors)
    };

    // Determinism: repeat the first distillation run exactly.
    let (liaf_rerun_max_curve_diff, liaf_rerun_ckpt_identical) = {
        let mut c = cfg.clone();
        c.root_seed = seeds[0];
        let (_, r) = distill_run(&c, TrainVariant::Liaf, Some(&teacher), Some(&ensemble), &corpora, &root.join("liaf-rerun")).expect("liaf rerun");
        let a = load_checkpoint(&root.join(format!("liaf-{}/student.ckpt", seeds[0]))).unwrap();
        let b = load_checkpoint(&root.join("liaf-rerun/student.ckpt")).unwrap();
        (max_curve_diff(&liaf_steps, &r.steps), params_identical(&a.tensors, &b.tensors))
    };

    // Capacity reference: the student architecture trained from scratch for
    // the teacher's epoch count.
    let scratch_at_teacher_epochs = {
        let mut c = cfg.clone();
        c.root_seed = seeds[0];
        c.student.epochs = cfg.teacher.epochs;
        let (_, r) = distill_run(&c, TrainVariant::NoKd, None, None, &corpora, &root.join("scratch-long")).expect("scratch run");
        let m = r.final_map().unwrap();
        println!("[acceptance] student-from-scratch at teacher epochs: map {m:.4}");
        m
    };

    // Per-image softmax scope, selectors retrained to match, one seed.
    let image_scope_liaf = {
        let mut c = cfg.clone();
        c.distill.softmax_scope = ScoreScope::Image;
        let (ens_im, _) = train_selectors(&c, &teacher, &corpora, &root.join("sel-im")).expect("image-scope selectors");
        c.root_seed = seeds[0];
        let (_, r) = distill_run(&c, TrainVariant::Liaf, Some(&teacher), Some(&ens_im), &corpora, &root.join("liaf-im")).expect("image-scope liaf");
        let m = r.final_map().unwrap();
        println!("[acceptance] image-scope liaf seed {}: map {m:.4}", seeds[0]);
        m
    };

    Experiment {
        teacher_map,
        liaf,
        fitnet,
        no_kd,
        teacher_only,
        comparison_cpu_min,
        comparison_wall_min,
        liaf_steps,
        no_kd_steps,
        liaf_rerun_max_curve_diff,
        liaf_rerun_ckpt_identical,
        tom_rerun_bit_identical,
        warmup_frac: cfg.distill.warmup_frac,
        lambda: cfg.distill.lambda,
        ensemble_dims: ensemble.vectors.dims().to_vec(),
        scratch_at_teacher_epochs,
        image_scope_liaf,
    }
}

fn experiment() -> &'static Experiment {
    static EXP: OnceLock<Result<Experiment, String>> = OnceLock::new();
    let cell = EXP.get_or_init(|| {
        std::panic::catch_unwind(run_experiment).map_err(|e| {
            e.downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "experiment panicked".into())
        })
    });
    cell.as_ref().unwrap_or_else(|e| panic!("shared experiment failed: {e}"))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------------------
// c7: end-to-end ordering at matched budget
// ---------------------------------------------------------------------------

#[test]
fn c7_distilled_student_outperforms_baselines() {
    let ex = experiment();
    let (ml, mf, mn) = (mean(&ex.liaf), mean(&ex.fitnet), mean(&ex.no_kd));
    let budget = if ex.comparison_cpu_min.is_nan() {
        ex.comparison_wall_min
    } else {
        ex.comparison_cpu_min
    };
    assert!(
        ml > mf,
        "attention-masked distillation ({ml:.4}) must beat plain feature mimicking ({mf:.4}); per-seed liaf {:?} fitnet {:?}",
        ex.liaf, ex.fitnet
    );
    assert!(
        mf > mn,
        "plain feature mimicking ({mf:.4}) must beat the undistilled student ({mn:.4}); per-seed fitnet {:?} no_kd {:?}",
        ex.fitnet, ex.no_kd
    );
    assert!(
        ml >= mn + 0.01,
        "distillation gain {:.4} is under one mAP point (liaf {ml:.4}, no_kd {mn:.4})",
        ml - mn
    );
    assert!(budget <= 30.0, "comparison took {budget:.1} CPU-minutes, budget 30");
    println!(
        "[acceptance] c7 ordering: PASS (teacher {:.4}; mean mAP liaf {ml:.4} > fitnet {mf:.4} > no_kd {mn:.4}; gain {:.4} >= 0.01; {:.1} cpu-min / {:.1} wall-min)",
        ex.teacher_map,
        ml - mn,
        ex.comparison_cpu_min,
        ex.comparison_wall_min
    );
}

// ---------------------------------------------------------------------------
// c8: teacher-only masking runs, is reported, and reproduces bit-exactly
// ---------------------------------------------------------------------------

#[test]
fn c8_teacher_only_mask_completes_and_reproduces() {
    let ex = experiment();
    assert_eq!(ex.teacher_only.len(), 3);
    for (&m, &l) in ex.teacher_only.iter().zip(&ex.liaf) {
        assert!(m.is_finite() && (0.0..=1.0).contains(&m), "teacher-only map out of range: {m}");
        assert!(l.is_finite(), "liaf map missing for comparison");
    }
    assert!(ex.tom_rerun_bit_identical, "teacher-only rerun was not bit-exact");
    println!(
        "[acceptance] c8 teacher-only masking: PASS (mean mAP {:.4} vs student-aware {:.4}; per-seed {:?}; rerun bit-exact)",
        mean(&ex.teacher_only),
        mean(&ex.liaf),
        ex.teacher_only
    );
}

// ---------------------------------------------------------------------------
// c9: determinism of repeated distillation runs
// ---------------------------------------------------------------------------

#[test]
fn c9_repeated_distill_runs_are_identical() {
    let ex = experiment();
    assert!(
        ex.liaf_rerun_max_curve_diff <= 1e-6,
        "loss curves differ by {:.3e} between identical runs",
        ex.liaf_rerun_max_curve_diff
    );
    assert!(ex.liaf_rerun_ckpt_identical, "final checkpoints differ between identical runs");
    println!(
        "[acceptance] c9 determinism: PASS (max curve diff {:.1e}, final checkpoints identical)",
        ex.liaf_rerun_max_curve_diff
    );
}

// ---------------------------------------------------------------------------
// Training-dynamics invariant piggybacking on the shared experiment
// ---------------------------------------------------------------------------

#[test]
fn stage_two_total_loss_decreases_within_first_epoch() {
    let ex = experiment();
    let first_epoch = |steps: &[StepRecord], lambda: f64, frac: f64| -> (f64, f64) {
        let epoch0: Vec<&StepRecord> = steps.iter().filter(|s| s.epoch == 0).collect();
        let total_steps = steps.len() as u64;
        let dec = (epoch0.len() / 10).max(1);
        let total = |s: &StepRecord| {
            s.task_loss + lambda * warmup_factor(s.step, total_steps, frac) * s.distill_loss
        };
        let head = epoch0[..dec].iter().map(|s| total(s)).sum::<f64>() / dec as f64;
        let tail = epoch0[epoch0.len() - dec..].iter().map(|s| total(s)).sum::<f64>() / dec as f64;
        (head, tail)
    };
    let (h_nokd, t_nokd) = first_epoch(&ex.no_kd_steps, 0.0, ex.warmup_frac);
    assert!(t_nokd < h_nokd, "plain student loss did not decrease in epoch 0: {h_nokd:.4} -> {t_nokd:.4}");
    let (h_liaf, t_liaf) = first_epoch(&ex.liaf_steps, ex.lambda, ex.warmup_frac);
    assert!(t_liaf < h_liaf, "distilling student loss did not decrease in epoch 0: {h_liaf:.4} -> {t_liaf:.4}");
    println!(
        "[acceptance] first-epoch descent: PASS (no_kd {h_nokd:.3} -> {t_nokd:.3}; distilling {h_liaf:.3} -> {t_liaf:.3})"
    );
}

#[test]
fn wider_teacher_beats_scratch_student_at_equal_epochs() {
    let ex = experiment();
    assert!(
        ex.teacher_map > ex.scratch_at_teacher_epochs,
        "teacher ({:.4}) did not beat the narrower student trained equally long ({:.4})",
        ex.teacher_map,
        ex.scratch_at_teacher_epochs
    );
    println!(
        "[acceptance] capacity gap: PASS (teacher {:.4} > equal-epoch scratch student {:.4})",
        ex.teacher_map, ex.scratch_at_teacher_epochs
    );
}

#[test]
fn default_ensemble_shape_and_both_scopes_reported() {
    let ex = experiment();
    let cfg = DistillConfig::default();
    let expected = vec![
        cfg.selector.k,
        cfg.teacher.channels * cfg.selector.pool_h * cfg.selector.pool_w,
    ];
    assert_eq!(ex.ensemble_dims, expected, "saved ensemble shape mismatch");
    assert!(
        ex.image_scope_liaf.is_finite() && (0.0..=1.0).contains(&ex.image_scope_liaf),
        "image-scope run produced an invalid mAP: {}",
        ex.image_scope_liaf
    );
    println!(
        "[acceptance] ensemble {:?}; softmax scope report: batch-wide mean {:.4}, per-image single seed {:.4}",
        ex.ensemble_dims,
        mean(&ex.liaf),
        ex.image_scope_liaf
    );
}
