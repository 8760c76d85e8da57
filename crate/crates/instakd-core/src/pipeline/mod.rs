//! Two-stage training orchestration: teacher pretraining, selector learning
//! on the frozen teacher, and masked feature distillation into the student —
//! plus the baselines, the ablation grid, and the artifact plumbing
//! (checkpoints, run records, corpora manifests) they all share.
//!
//! Training loops are sequential state machines; scene rendering and the
//! numeric kernels may fan out internally but are bit-deterministic, so a run
//! is a pure function of (config, seed).

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod optim;
pub mod record;

pub use checkpoint::{load_checkpoint, params_identical, save_checkpoint, Checkpoint, CheckpointMeta};
pub use config::{
    AblateConfig, CorpusConfig, DistillConfig, DistillSection, MaskMode, OptimConfig,
    SelectorConfig, StudentConfig, TeacherConfig, ENV_PREFIX,
};
pub use corpus::{derive_seed, gt_of, spec_hash, Corpus};
pub use optim::{cosine_lr, warmup_factor, SgdMomentum};
pub use record::{curves_match, EpochRecord, RunRecord, StepRecord};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::{apply_mask, build_soft_mask, ChannelProjection, Rescale};
use crate::roi::{extract_roi_batch, FeatureMap, ImageBox, InstanceSet};
use crate::selector::{
    score_groups, AttentionScores, ScoreScope, ScoreSource, SelectorEnsemble,
};
use crate::tensor::Tensor;
use crate::toydet::{
    batch_ground_truth, batch_images, build_targets, decode_predictions, detection_task_loss_grad,
    evaluate_map, forward_taped, tape_params, DecodeParams, DetectorConfig, FocalParams,
    MapMetrics, TinyDetector, STRIDE,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Which stage-2 policy a student run follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainVariant {
    /// Full method: teacher mask and student-aware mask per the config.
    Liaf,
    /// Task loss only; the distillation term is never computed.
    NoKd,
    /// Plain feature mimicking: all-ones mask on the full feature difference.
    FitnetAllOnes,
    /// Teacher scores drive both masks; the student's own scores are unused.
    TeacherOnlyMask,
}

impl TrainVariant {
    pub fn name(&self) -> &'static str {
        match self {
            TrainVariant::Liaf => "liaf",
            TrainVariant::NoKd => "no_kd",
            TrainVariant::FitnetAllOnes => "fitnet_allones",
            TrainVariant::TeacherOnlyMask => "teacher_only_mask",
        }
    }

    pub fn parse(s: &str) -> Result<TrainVariant> {
        match s {
            "liaf" => Ok(TrainVariant::Liaf),
            "no_kd" => Ok(TrainVariant::NoKd),
            "fitnet_allones" => Ok(TrainVariant::FitnetAllOnes),
            "teacher_only_mask" => Ok(TrainVariant::TeacherOnlyMask),
            other => Err(Error::invalid(format!(
                "unknown variant {other}; expected liaf, no_kd, fitnet_allones, or teacher_only_mask"
            ))),
        }
    }
}

/// Train and eval splits drawn from the same scene spec.
#[derive(Clone, Debug)]
pub struct Corpora {
    pub train: Corpus,
    pub eval: Corpus,
}

/// Derive both splits from the config's data seed.
pub fn build_corpora(cfg: &DistillConfig) -> Corpora {
    let seed = cfg.effective_data_seed();
    Corpora {
        train: Corpus::derive(seed, "train", cfg.corpus.train_scenes, &cfg.scene),
        eval: Corpus::derive(seed, "eval", cfg.corpus.eval_scenes, &cfg.scene),
    }
}

/// Write `train.jsonl` and `eval.jsonl` manifests into `dir`.
pub fn write_corpus_manifests(corpora: &Corpora, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    corpora.train.save_manifest(&dir.join("train.jsonl"))?;
    corpora.eval.save_manifest(&dir.join("eval.jsonl"))?;
    Ok(())
}

/// Exclusive hold on an output directory, released on drop. Concurrent runs
/// must target distinct directories; a stale file from a crashed run has to
/// be removed by hand, which is the safe default for training artifacts.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "pid {}", std::process::id());
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(dir.display().to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Deterministic shuffle of 0..n for one epoch.
fn epoch_order(seed: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
}

/// Group size of every instance under the given softmax grouping.
fn group_sizes(groups: &[Vec<usize>], count: usize) -> Vec<usize> {
    let mut sizes = vec![0usize; count];
    for g in groups {
        for &i in g {
            sizes[i] = g.len();
        }
    }
    sizes
}

/// Detection task loss on taped head outputs, with its analytic gradients
/// registered on the tape. Returns the loss node and its plain value.
fn taped_task_loss(
    tape: &mut Tape,
    class_logits: Var,
    box_deltas: Var,
    gt: &[Vec<(ImageBox, usize)>],
    num_classes: usize,
) -> (Var, f64) {
    let d = tape.value(class_logits).dims();
    let (h, w) = (d[2], d[3]);
    let targets = build_targets(gt, h, w, num_classes);
    let (loss, d_cls, d_box) = detection_task_loss_grad(
        tape.value(class_logits),
        tape.value(box_deltas),
        &targets,
        FocalParams::default(),
    );
    let v = tape.scalar_with_grads(loss, vec![(class_logits, d_cls), (box_deltas, d_box)]);
    (v, loss)
}

/// Run the detector over a whole corpus and score it.
pub fn evaluate_detector(
    model: &TinyDetector,
    corpus: &Corpus,
    batch_size: usize,
) -> Result<MapMetrics> {
    assert!(batch_size > 0, "batch_size must be >= 1");
    let mut preds = Vec::with_capacity(corpus.len());
    let mut gt = Vec::with_capacity(corpus.len());
    let indices: Vec<usize> = (0..corpus.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let scenes = corpus.scenes(chunk);
        let images = batch_images(&scenes);
        let out = model.forward(&images)?;
        preds.extend(decode_predictions(&out, &DecodeParams::default()));
        gt.extend(batch_ground_truth(&scenes));
    }
    Ok(evaluate_map(&preds, &gt, model.cfg.num_classes))
}

/// Rebuild a detector from a checkpoint's named tensors; the architecture is
/// recovered from the parameter shapes.
pub fn detector_from_checkpoint(ckpt: &Checkpoint) -> Result<TinyDetector> {
    let stem = ckpt.tensor("stem_w")?;
    let cls = ckpt.tensor("cls_w")?;
    let cfg = DetectorConfig { channels: stem.dims()[0], num_classes: cls.dims()[0] };
    let mut model = TinyDetector::init(cfg, 0);
    for (name, t) in model.params.iter_mut() {
        let stored = ckpt.tensor(name)?;
        if stored.dims() != t.dims() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                stored.dims(),
                t.dims()
            )));
        }
        *t = stored.clone();
    }
    Ok(model)
}

/// Rebuild a selector ensemble from its checkpoint.
pub fn ensemble_from_checkpoint(ckpt: &Checkpoint) -> Result<SelectorEnsemble> {
    let vectors = ckpt.tensor("selectors")?.clone();
    if vectors.dims().len() != 2 {
        return Err(Error::Checkpoint(format!(
            "selectors tensor must be [K, D], got {:?}",
            vectors.dims()
        )));
    }
    Ok(SelectorEnsemble { vectors })
}

fn base_meta(cfg: &DistillConfig, stage: &str, step: u64) -> CheckpointMeta {
    CheckpointMeta {
        stage: stage.to_string(),
        step,
        config_hash: cfg.hash(),
        src_hash: crate::SRC_HASH.to_string(),
        metrics: Default::default(),
        notes: Default::default(),
    }
}

// ---------------------------------------------------------------------------
// Stage 0: teacher pretraining
// ---------------------------------------------------------------------------

/// Train the teacher on the task loss alone and checkpoint it with its final
/// eval score. Zero epochs saves the raw initialization.
pub fn train_teacher(
    cfg: &DistillConfig,
    corpora: &Corpora,
    out_dir: &Path,
) -> Result<(TinyDetector, RunRecord)> {
    std::fs::create_dir_all(out_dir)?;
    let det_cfg = DetectorConfig {
        channels: cfg.teacher.channels,
        num_classes: cfg.scene.num_classes,
    };
    let mut model = TinyDetector::init(det_cfg, derive_seed(cfg.root_seed, "teacher-init"));
    let mut opt = SgdMomentum::new(model.params.len(), cfg.optim.momentum, cfg.optim.weight_decay);
    let mut rec = RunRecord::new(cfg.to_toml_string(), cfg.hash());

    let steps_per_epoch = corpora.train.len().div_ceil(cfg.teacher.batch_size);
    let total_steps = (steps_per_epoch * cfg.teacher.epochs) as u64;
    let mut step: u64 = 0;

    for epoch in 0..cfg.teacher.epochs {
        let order = epoch_order(
            derive_seed(cfg.root_seed, &format!("teacher-order-{epoch}")),
            corpora.train.len(),
        );
        for chunk in order.chunks(cfg.teacher.batch_size) {
            let t0 = Instant::now();
            let scenes = corpora.train.scenes(chunk);
            let images = batch_images(&scenes);
            let gt = batch_ground_truth(&scenes);
            let lr = cosine_lr(cfg.teacher.lr, step, total_steps);

            let mut tape = Tape::new();
            let images_v = tape.constant(images);
            let tp = tape_params(&mut tape, &model, true);
            let out = forward_taped(&mut tape, &model, &tp, images_v);
            let (loss_v, task) =
                taped_task_loss(&mut tape, out.class_logits, out.box_deltas, &gt, det_cfg.num_classes);
            if !task.is_finite() {
                return Err(Error::Diverged { step: step as usize, what: "teacher task loss".into() });
            }
            let mut grads = tape.backward(loss_v);
            let g: Vec<Option<Tensor>> = tp.vars.iter().map(|v| grads.take(*v)).collect();
            opt.step(&mut model.params, &g, lr);

            rec.steps.push(StepRecord {
                step,
                epoch,
                task_loss: task,
                distill_loss: 0.0,
                diversity_loss: 0.0,
                lr,
                wall_ms: t0.elapsed().as_millis() as u64,
            });
            step += 1;
        }
        let m = evaluate_detector(&model, &corpora.eval, cfg.teacher.batch_size)?;
        log::info!("teacher epoch {epoch}: map {:.4} ap50 {:.4} ap75 {:.4}", m.map, m.ap50, m.ap75);
        rec.epochs.push(EpochRecord { epoch, map: m.map, ap50: m.ap50, ap75: m.ap75 });
    }

    let mut meta = base_meta(cfg, "teacher", step);
    if let Some(map) = rec.final_map() {
        meta.metrics.insert("map".into(), map);
    }
    save_checkpoint(&out_dir.join("teacher.ckpt"), &meta, &model.params)?;
    rec.save(out_dir)?;
    Ok((model, rec))
}

// ---------------------------------------------------------------------------
// Stage 1: selector learning on the frozen teacher
// ---------------------------------------------------------------------------

/// Learn the selector ensemble: mask the frozen teacher's own features with
/// the ensemble's attention and ask the frozen heads to still solve the task,
/// plus the diversity penalty. Only the ensemble receives updates.
pub fn train_selectors(
    cfg: &DistillConfig,
    teacher: &TinyDetector,
    corpora: &Corpora,
    out_dir: &Path,
) -> Result<(SelectorEnsemble, RunRecord)> {
    std::fs::create_dir_all(out_dir)?;
    let (ph, pw, samples) = (cfg.selector.pool_h, cfg.selector.pool_w, cfg.selector.samples_per_bin);
    let dim = teacher.cfg.channels * ph * pw;
    let ensemble = SelectorEnsemble::init(cfg.selector.k, dim, derive_seed(cfg.root_seed, "selector-init"))?;
    // Held as a named param list so the optimizer applies; no weight decay —
    // shrinking the vectors rescales every logit and destabilizes the
    // normalized diversity term without changing the softmax's preferences.
    let mut params = vec![("selectors".to_string(), ensemble.vectors)];
    let mut opt = SgdMomentum::new(1, cfg.optim.momentum, 0.0);
    let mut rec = RunRecord::new(cfg.to_toml_string(), cfg.hash());

    let num_classes = teacher.cfg.num_classes;
    let steps_per_epoch = corpora.train.len().div_ceil(cfg.teacher.batch_size);
    let total_steps = (steps_per_epoch * cfg.selector.epochs) as u64;
    let mut step: u64 = 0;

    for epoch in 0..cfg.selector.epochs {
        let order = epoch_order(
            derive_seed(cfg.root_seed, &format!("selector-order-{epoch}")),
            corpora.train.len(),
        );
        for chunk in order.chunks(cfg.teacher.batch_size) {
            let t0 = Instant::now();
            let scenes = corpora.train.scenes(chunk);
            let n_batch = scenes.len();
            let images = batch_images(&scenes);
            let gt = batch_ground_truth(&scenes);

            let out = teacher.forward(&images)?;
            let neck = out.neck_features;
            let (hf, wf) = (neck.height(), neck.width());
            let instances = InstanceSet::from_image_boxes(&gt, STRIDE, hf, wf);
            if instances.is_empty() {
                // Nothing to attend to; the selectors get no signal this batch.
                continue;
            }
            let rows = extract_roi_batch(&neck, &instances, ph, pw, samples);
            let groups = score_groups(cfg.distill.softmax_scope, instances.batch_index(), n_batch);
            let sizes = group_sizes(&groups, instances.len());

            let mut tape = Tape::new();
            let e_var = tape.leaf(params[0].1.clone());
            let rows_v = tape.constant(rows.values);
            let logits = tape.matmul_nt(rows_v, e_var);
            let probs = tape.softmax_groups(logits, &groups);
            let avg = tape.mean_axis1(probs);
            // Always the un-rescaled mask here, independent of the distill
            // stage's rescale option: the softmax budget is what forces the
            // selectors to spend attention where the teacher's task loss is
            // most sensitive. Mean-one rescaling (whose clamp saturates most
            // weights at 1) would leave near-uniform attention as a stable
            // optimum and the learned scores uninformative.
            let mask = tape.build_mask(avg, &instances, (n_batch, hf, wf), Rescale::None, &sizes);
            let neck_v = tape.constant(neck.values.clone());
            let masked = tape.mul_mask(neck_v, mask);

            // Frozen teacher heads on the masked features; gradient flows
            // back through the inputs only.
            let cls_w = tape.constant(teacher.param("cls_w").clone());
            let cls_b = tape.constant(teacher.param("cls_b").clone());
            let box_w = tape.constant(teacher.param("box_w").clone());
            let box_b = tape.constant(teacher.param("box_b").clone());
            let class_logits = tape.conv2d(masked, cls_w, Some(cls_b), 1, 1);
            let box_deltas = tape.conv2d(masked, box_w, Some(box_b), 1, 1);

            let (task_v, task) = taped_task_loss(&mut tape, class_logits, box_deltas, &gt, num_classes);
            let (div, d_div) = crate::selector::diversity_loss_grad(&params[0].1);
            let div_v = tape.scalar_with_grads(div, vec![(e_var, d_div)]);
            let div_scaled = tape.scale(div_v, cfg.selector.mu);
            let total_v = tape.add(task_v, div_scaled);
            let total = task + cfg.selector.mu * div;
            if !total.is_finite() {
                return Err(Error::Diverged { step: step as usize, what: "selector loss".into() });
            }

            let lr = cosine_lr(cfg.selector.lr, step, total_steps);
            let mut grads = tape.backward(total_v);
            let g = vec![grads.take(e_var)];
            opt.step(&mut params, &g, lr);

            rec.steps.push(StepRecord {
                step,
                epoch,
                task_loss: task,
                distill_loss: 0.0,
                diversity_loss: div,
                lr,
                wall_ms: t0.elapsed().as_millis() as u64,
            });
            step += 1;
        }
        log::info!(
            "selector epoch {epoch}: diversity {:.6}",
            rec.steps.last().map_or(f64::NAN, |s| s.diversity_loss)
        );
    }

    let vectors = params.pop().expect("selector param list").1;
    let mut meta = base_meta(cfg, "selectors", step);
    meta.metrics.insert("k".into(), cfg.selector.k as f64);
    meta.metrics.insert("dim".into(), dim as f64);
    if let (Some(first), Some(last)) = (rec.steps.first(), rec.steps.last()) {
        meta.metrics.insert("initial_diversity".into(), first.diversity_loss);
        meta.metrics.insert("final_diversity".into(), last.diversity_loss);
    }
    meta.notes.insert("mu".into(), format!("{}", cfg.selector.mu));
    save_checkpoint(
        &out_dir.join("selectors.ckpt"),
        &meta,
        &[("selectors".to_string(), vectors.clone())],
    )?;
    rec.save(out_dir)?;
    Ok((SelectorEnsemble { vectors }, rec))
}

// ---------------------------------------------------------------------------
// Stage 2: distillation and baselines
// ---------------------------------------------------------------------------

/// Everything the distillation term needs beyond the tape itself.
struct DistillInputs<'a> {
    section: &'a DistillSection,
    ensemble: Option<&'a SelectorEnsemble>,
    pool: (usize, usize, usize),
    neck_t: &'a FeatureMap,
    proj_s: Var,
    instances: &'a InstanceSet,
    n_batch: usize,
}

/// Build the taped distillation term per the variant's mask policy and
/// return its node. `proj_s` is the projected student neck on the tape.
fn build_distill_term(tape: &mut Tape, variant: TrainVariant, inp: &DistillInputs) -> Var {
    let (n, hf, wf) = (inp.n_batch, inp.neck_t.height(), inp.neck_t.width());
    let c_t = inp.neck_t.channels();
    let norm = 1.0 / (n * c_t * hf * wf) as f64;

    // No instances to attend to, or mimicking everywhere by design: plain
    // all-ones masked difference.
    if matches!(variant, TrainVariant::FitnetAllOnes) || inp.instances.is_empty() {
        let t_v = tape.constant(inp.neck_t.values.clone());
        let diff = tape.sub(t_v, inp.proj_s);
        let ss = tape.sum_sq(diff);
        return tape.scale(ss, norm);
    }

    let ens = inp.ensemble.expect("masked variants require an ensemble");
    let (ph, pw, samples) = inp.pool;
    let groups = score_groups(inp.section.softmax_scope, inp.instances.batch_index(), n);
    let sizes = group_sizes(&groups, inp.instances.len());

    // Teacher scores never carry gradient: plain computation.
    let rows_t = extract_roi_batch(inp.neck_t, inp.instances, ph, pw, samples);
    let att_t = AttentionScores::compute(&rows_t.values, &ens.vectors, &groups, ScoreSource::Teacher);

    // Student-side averaged scores stay on the tape so the mask can feed
    // gradient back into the student features (unless detached or unused).
    let avg_s: Option<Var> = match variant {
        TrainVariant::TeacherOnlyMask => None,
        _ => {
            let mut rows_s = tape.roi_batch(inp.proj_s, STRIDE, inp.instances, ph, pw, samples);
            if inp.section.detach_scores {
                rows_s = tape.detach(rows_s);
            }
            let e_v = tape.constant(ens.vectors.clone());
            let logits = tape.matmul_nt(rows_s, e_v);
            let probs = tape.softmax_groups(logits, &groups);
            Some(tape.mean_axis1(probs))
        }
    };

    match inp.section.mask_mode {
        MaskMode::Separate => {
            let m_t = build_soft_mask(inp.instances, &att_t, (n, hf, wf), inp.section.rescale);
            let t_masked = apply_mask(inp.neck_t, &m_t).expect("mask matches features");
            let t_v = tape.constant(t_masked.values);
            let m_s = match avg_s {
                Some(avg) => {
                    tape.build_mask(avg, inp.instances, (n, hf, wf), inp.section.rescale, &sizes)
                }
                None => tape.constant(m_t.values),
            };
            let s_masked = tape.mul_mask(inp.proj_s, m_s);
            let diff = tape.sub(t_v, s_masked);
            let ss = tape.sum_sq(diff);
            tape.scale(ss, norm)
        }
        MaskMode::SharedMean => {
            let t_scores =
                tape.constant(Tensor::from_vec(&[att_t.len()], att_t.values.clone()).expect("scores"));
            let combined = match avg_s {
                Some(avg) => {
                    let sum = tape.add(avg, t_scores);
                    tape.scale(sum, 0.5)
                }
                None => t_scores,
            };
            let m = tape.build_mask(combined, inp.instances, (n, hf, wf), inp.section.rescale, &sizes);
            let t_v = tape.constant(inp.neck_t.values.clone());
            let diff = tape.sub(t_v, inp.proj_s);
            let masked = tape.mul_mask(diff, m);
            let ss = tape.sum_sq(masked);
            tape.scale(ss, norm)
        }
    }
}

/// The three offline-verifiable snapshots a distilling run leaves behind,
/// spread evenly over the steps where the distillation term is active.
fn spot_steps(total: u64, warmup_frac: f64) -> Vec<u64> {
    let warm = (total as f64 * warmup_frac).floor() as u64;
    let active = total.saturating_sub(warm);
    let mut out: Vec<u64> = (1..=3)
        .map(|q| warm + active * q / 4)
        .filter(|&s| s < total)
        .collect();
    out.dedup();
    out
}

/// Stage 2: train the student under `variant`'s policy. `teacher` is required
/// for every variant except `no_kd`; `ensemble` for the mask-driven ones.
/// Leaves `student.ckpt`, run records, and (when distilling) three spot
/// checkpoints in `out_dir`.
pub fn distill_run(
    cfg: &DistillConfig,
    variant: TrainVariant,
    teacher: Option<&TinyDetector>,
    ensemble: Option<&SelectorEnsemble>,
    corpora: &Corpora,
    out_dir: &Path,
) -> Result<(TinyDetector, RunRecord)> {
    std::fs::create_dir_all(out_dir)?;
    let needs_teacher = !matches!(variant, TrainVariant::NoKd);
    let needs_ensemble = matches!(variant, TrainVariant::Liaf | TrainVariant::TeacherOnlyMask);
    if needs_teacher && teacher.is_none() {
        return Err(Error::invalid(format!("variant {} requires a teacher", variant.name())));
    }
    if needs_ensemble && ensemble.is_none() {
        return Err(Error::invalid(format!("variant {} requires a selector ensemble", variant.name())));
    }
    let (ph, pw, samples) = (cfg.selector.pool_h, cfg.selector.pool_w, cfg.selector.samples_per_bin);
    if let (Some(t), Some(e)) = (teacher, ensemble) {
        let want = t.cfg.channels * ph * pw;
        if e.dim() != want {
            return Err(Error::invalid(format!(
                "ensemble dim {} does not match teacher pooled dim {want}",
                e.dim()
            )));
        }
    }

    let num_classes = cfg.scene.num_classes;
    let det_cfg = DetectorConfig { channels: cfg.student.channels, num_classes };
    let mut student = TinyDetector::init(det_cfg, derive_seed(cfg.root_seed, "student-init"));
    let mut opt_s = SgdMomentum::new(student.params.len(), cfg.optim.momentum, cfg.optim.weight_decay);

    // The 1x1 projection exists whenever a teacher does, stored as conv
    // weights. Its init draws from its own seed stream, so its presence never
    // perturbs the student's.
    let mut proj_params: Vec<(String, Tensor)> = match teacher {
        Some(t) => {
            let p = ChannelProjection::init(
                t.cfg.channels,
                cfg.student.channels,
                derive_seed(cfg.root_seed, "proj-init"),
                true,
            );
            let c_t = p.c_t();
            let c_s = p.c_s();
            vec![
                ("proj_w".to_string(), Tensor::from_vec(&[c_t, c_s, 1, 1], p.weight.into_data())?),
                ("proj_b".to_string(), p.bias.expect("projection bias")),
            ]
        }
        None => Vec::new(),
    };
    let mut opt_p = SgdMomentum::new(proj_params.len(), cfg.optim.momentum, cfg.optim.weight_decay);

    let mut rec = RunRecord::new(cfg.to_toml_string(), cfg.hash());
    let steps_per_epoch = corpora.train.len().div_ceil(cfg.student.batch_size);
    let total_steps = (steps_per_epoch * cfg.student.epochs) as u64;
    let spots = if needs_teacher && cfg.distill.lambda > 0.0 {
        spot_steps(total_steps, cfg.distill.warmup_frac)
    } else {
        Vec::new()
    };
    let mut step: u64 = 0;

    for epoch in 0..cfg.student.epochs {
        let order = epoch_order(
            derive_seed(cfg.root_seed, &format!("student-order-{epoch}")),
            corpora.train.len(),
        );
        for chunk in order.chunks(cfg.student.batch_size) {
            let t0 = Instant::now();
            let scenes = corpora.train.scenes(chunk);
            let n_batch = scenes.len();
            let images = batch_images(&scenes);
            let gt = batch_ground_truth(&scenes);
            let lr = cosine_lr(cfg.student.lr, step, total_steps);

            let mut tape = Tape::new();
            let images_v = tape.constant(images.clone());
            let sp = tape_params(&mut tape, &student, true);
            let s_out = forward_taped(&mut tape, &student, &sp, images_v);
            let (task_v, task) =
                taped_task_loss(&mut tape, s_out.class_logits, s_out.box_deltas, &gt, num_classes);
            if !task.is_finite() {
                return Err(Error::Diverged { step: step as usize, what: "student task loss".into() });
            }

            let lambda_t = match variant {
                TrainVariant::NoKd => 0.0,
                _ => cfg.distill.lambda * warmup_factor(step, total_steps, cfg.distill.warmup_frac),
            };

            let mut dist_val = 0.0;
            let mut proj_vars: Option<(Var, Var)> = None;
            let total_v = if lambda_t > 0.0 {
                let teacher = teacher.expect("validated above");
                let t_out = teacher.forward(&images)?;
                let neck_t = t_out.neck_features;
                let (hf, wf) = (neck_t.height(), neck_t.width());

                let pw_v = tape.leaf(proj_params[0].1.clone());
                let pb_v = tape.leaf(proj_params[1].1.clone());
                proj_vars = Some((pw_v, pb_v));
                let proj_s = tape.conv2d(s_out.neck, pw_v, Some(pb_v), 1, 0);
                let instances = InstanceSet::from_image_boxes(&gt, STRIDE, hf, wf);

                let inp = DistillInputs {
                    section: &cfg.distill,
                    ensemble,
                    pool: (ph, pw, samples),
                    neck_t: &neck_t,
                    proj_s,
                    instances: &instances,
                    n_batch,
                };
                let dist_v = build_distill_term(&mut tape, variant, &inp);
                dist_val = tape.scalar_value(dist_v);
                if !dist_val.is_finite() {
                    return Err(Error::Diverged {
                        step: step as usize,
                        what: "distillation loss".into(),
                    });
                }

                if spots.contains(&step) {
                    let mut meta = base_meta(cfg, "spot", step);
                    meta.metrics.insert("distill_loss".into(), dist_val);
                    meta.metrics.insert("task_loss".into(), task);
                    meta.metrics.insert("lambda_t".into(), lambda_t);
                    meta.notes.insert("variant".into(), variant.name().to_string());
                    let seeds: Vec<String> =
                        chunk.iter().map(|&i| corpora.train.seeds[i].to_string()).collect();
                    meta.notes.insert("scene_seeds".into(), seeds.join(","));
                    let mut tensors = student.params.clone();
                    tensors.extend(proj_params.iter().cloned());
                    save_checkpoint(&out_dir.join(format!("spot-{step}.ckpt")), &meta, &tensors)?;
                }

                let dist_scaled = tape.scale(dist_v, lambda_t);
                tape.add(task_v, dist_scaled)
            } else {
                task_v
            };

            let mut grads = tape.backward(total_v);
            let gs: Vec<Option<Tensor>> = sp.vars.iter().map(|v| grads.take(*v)).collect();
            opt_s.step(&mut student.params, &gs, lr);
            if let Some((pw_v, pb_v)) = proj_vars {
                let gp = vec![grads.take(pw_v), grads.take(pb_v)];
                opt_p.step(&mut proj_params, &gp, lr);
            }

            rec.steps.push(StepRecord {
                step,
                epoch,
                task_loss: task,
                distill_loss: dist_val,
                diversity_loss: 0.0,
                lr,
                wall_ms: t0.elapsed().as_millis() as u64,
            });
            step += 1;
        }
        let m = evaluate_detector(&student, &corpora.eval, cfg.student.batch_size)?;
        log::info!(
            "{} epoch {epoch}: map {:.4} ap50 {:.4} ap75 {:.4}",
            variant.name(),
            m.map,
            m.ap50,
            m.ap75
        );
        rec.epochs.push(EpochRecord { epoch, map: m.map, ap50: m.ap50, ap75: m.ap75 });
    }

    let mut meta = base_meta(cfg, "student", step);
    if let Some(map) = rec.final_map() {
        meta.metrics.insert("map".into(), map);
    }
    meta.notes.insert("variant".into(), variant.name().to_string());
    let mut tensors = student.params.clone();
    tensors.extend(proj_params.iter().cloned());
    save_checkpoint(&out_dir.join("student.ckpt"), &meta, &tensors)?;
    rec.save(out_dir)?;
    Ok((student, rec))
}

/// Recompute the distillation loss a spot checkpoint logged, from nothing but
/// the checkpoint, the config, and the frozen stage inputs. Returns
/// (logged, recomputed); the two should agree to float reproduction error.
pub fn verify_spot_checkpoint(
    path: &Path,
    cfg: &DistillConfig,
    teacher: &TinyDetector,
    ensemble: Option<&SelectorEnsemble>,
) -> Result<(f64, f64)> {
    let ckpt = load_checkpoint(path)?;
    let logged = *ckpt
        .meta
        .metrics
        .get("distill_loss")
        .ok_or_else(|| Error::Checkpoint("spot checkpoint lacks distill_loss".into()))?;
    let variant = TrainVariant::parse(
        ckpt.meta
            .notes
            .get("variant")
            .ok_or_else(|| Error::Checkpoint("spot checkpoint lacks variant".into()))?,
    )?;
    let seed_list = ckpt
        .meta
        .notes
        .get("scene_seeds")
        .ok_or_else(|| Error::Checkpoint("spot checkpoint lacks scene_seeds".into()))?;
    let seeds: Vec<u64> = seed_list
        .split(',')
        .map(|s| {
            s.parse::<u64>()
                .map_err(|e| Error::Checkpoint(format!("bad scene seed {s}: {e}")))
        })
        .collect::<Result<_>>()?;

    let scenes: Vec<_> =
        seeds.iter().map(|&s| crate::toydet::generate_scene(s, &cfg.scene)).collect();
    let images = batch_images(&scenes);
    let gt = batch_ground_truth(&scenes);
    let n_batch = scenes.len();

    let student = detector_from_checkpoint(&ckpt)?;
    let proj_w = ckpt.tensor("proj_w")?;
    let proj_b = ckpt.tensor("proj_b")?;

    let s_out = student.forward(&images)?;
    let t_out = teacher.forward(&images)?;
    let neck_t = t_out.neck_features;
    let (hf, wf) = (neck_t.height(), neck_t.width());
    let proj_s = crate::kernels::conv2d_fwd(&s_out.neck_features.values, proj_w, Some(proj_b), 1, 0);
    let instances = InstanceSet::from_image_boxes(&gt, STRIDE, hf, wf);

    // Mirror of `build_distill_term` on plain tensors: the taped ops wrap
    // exactly these functions, so the arithmetic reproduces bit for bit.
    let mut tape = Tape::new();
    let proj_v = tape.constant(proj_s);
    let inp = DistillInputs {
        section: &cfg.distill,
        ensemble,
        pool: (cfg.selector.pool_h, cfg.selector.pool_w, cfg.selector.samples_per_bin),
        neck_t: &neck_t,
        proj_s: proj_v,
        instances: &instances,
        n_batch,
    };
    let dist_v = build_distill_term(&mut tape, variant, &inp);
    Ok((logged, tape.scalar_value(dist_v)))
}

// ---------------------------------------------------------------------------
// Ablation grid
// ---------------------------------------------------------------------------

/// One grid cell's outcome: per-seed final scores, their mean/std, or the
/// first error that stopped a seed.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub k: usize,
    pub mu: f64,
    pub mask_mode: MaskMode,
    pub softmax_scope: ScoreScope,
    pub rescale: Rescale,
    pub detach_scores: bool,
    pub seeds: Vec<u64>,
    pub maps: Vec<f64>,
    pub map_mean: f64,
    pub map_std: f64,
    pub error: Option<String>,
}

fn mask_mode_name(m: MaskMode) -> &'static str {
    match m {
        MaskMode::Separate => "separate",
        MaskMode::SharedMean => "shared_mean",
    }
}

fn scope_name(s: ScoreScope) -> &'static str {
    match s {
        ScoreScope::Batch => "batch",
        ScoreScope::Image => "image",
    }
}

fn rescale_name(r: Rescale) -> &'static str {
    match r {
        Rescale::None => "none",
        Rescale::MeanOne => "mean_one",
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt())
}

/// Run the full pipeline (selector learning + distillation) for every cell of
/// the config's ablation grid, per seed, against one fixed teacher. A failing
/// cell is recorded and the grid continues. Writes `ablation.csv` and returns
/// the rows.
pub fn ablate(
    cfg: &DistillConfig,
    teacher: &TinyDetector,
    corpora: &Corpora,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out_dir)?;
    let ab = &cfg.ablate;
    let mut rows = Vec::new();
    let mut cell_idx = 0usize;
    for &k in &ab.k {
        for &mu in &ab.mu {
            for &mask_mode in &ab.mask_mode {
                for &scope in &ab.softmax_scope {
                    for &rescale in &ab.rescale {
                        for &detach in &ab.detach_scores {
                            let mut cell_cfg = cfg.clone();
                            cell_cfg.selector.k = k;
                            cell_cfg.selector.mu = mu;
                            cell_cfg.distill.mask_mode = mask_mode;
                            cell_cfg.distill.softmax_scope = scope;
                            cell_cfg.distill.rescale = rescale;
                            cell_cfg.distill.detach_scores = detach;
                            // The corpora stay pinned to the base data seed
                            // while the per-seed runs re-derive inits and
                            // batch orders.
                            cell_cfg.data_seed = Some(cfg.effective_data_seed());

                            let mut maps = Vec::new();
                            let mut error: Option<String> = None;
                            for &seed in &ab.seeds {
                                let mut run_cfg = cell_cfg.clone();
                                run_cfg.root_seed = seed;
                                let dir = out_dir.join(format!("cell-{cell_idx}/seed-{seed}"));
                                let outcome = train_selectors(
                                    &run_cfg,
                                    teacher,
                                    corpora,
                                    &dir.join("selectors"),
                                )
                                .and_then(|(ens, _)| {
                                    distill_run(
                                        &run_cfg,
                                        TrainVariant::Liaf,
                                        Some(teacher),
                                        Some(&ens),
                                        corpora,
                                        &dir.join("distill"),
                                    )
                                });
                                match outcome {
                                    Ok((_, rec)) => match rec.final_map() {
                                        Some(m) => maps.push(m),
                                        None => {
                                            error.get_or_insert(format!(
                                                "seed {seed}: run produced no evaluation"
                                            ));
                                        }
                                    },
                                    Err(e) => {
                                        log::warn!("ablation cell {cell_idx} seed {seed} failed: {e}");
                                        error.get_or_insert(format!("seed {seed}: {e}"));
                                    }
                                }
                            }
                            let (map_mean, map_std) = mean_std(&maps);
                            rows.push(AblationRow {
                                k,
                                mu,
                                mask_mode,
                                softmax_scope: scope,
                                rescale,
                                detach_scores: detach,
                                seeds: ab.seeds.clone(),
                                maps,
                                map_mean,
                                map_std,
                                error,
                            });
                            cell_idx += 1;
                        }
                    }
                }
            }
        }
    }
    write_ablation_csv(&rows, &out_dir.join("ablation.csv"))?;
    Ok(rows)
}

fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut csv = String::from(
        "k,mu,mask_mode,softmax_scope,rescale,detach_scores,seeds,maps,map_mean,map_std,error\n",
    );
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(|s| s.to_string()).collect();
        let maps: Vec<String> = r.maps.iter().map(|m| format!("{m:.6}")).collect();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{:.6},{:.6},{}\n",
            r.k,
            r.mu,
            mask_mode_name(r.mask_mode),
            scope_name(r.softmax_scope),
            rescale_name(r.rescale),
            r.detach_scores,
            seeds.join("+"),
            maps.join("+"),
            r.map_mean,
            r.map_std,
            r.error.as_deref().unwrap_or(""),
        ));
    }
    std::fs::write(path, csv)?;
    Ok(())
}
