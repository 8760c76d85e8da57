//! One binary, eight subcommands: corpus manifests, the three training
//! stages, baselines, the ablation grid, evaluation, and mask rendering.
//!
//! Exit codes: 0 success, 2 invalid configuration or arguments (including
//! usage errors), 1 runtime failure. Errors print as one `error: ...` line
//! on stderr.

use clap::{Parser, Subcommand};
use instakd_core::error::{Error, Result};
use instakd_core::pipeline::{
    ablate, build_corpora, detector_from_checkpoint, distill_run, ensemble_from_checkpoint,
    evaluate_detector, load_checkpoint, train_selectors, train_teacher, write_corpus_manifests,
    Corpora, DirLock, DistillConfig, TrainVariant,
};
use instakd_core::selector::SelectorEnsemble;
use instakd_core::tensor::Tensor;
use instakd_core::toydet::TinyDetector;
use instakd_core::viz::{render_masks, StudentViz, VizInputs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "instakd",
    version,
    about = "Instance-attention knowledge distillation on a synthetic detection task"
)]
struct Cli {
    /// TOML config; omitted = built-in defaults. INSTAKD_* environment
    /// variables override either (INSTAKD_SELECTOR__MU=5 targets selector.mu).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory; created if absent and locked for the run's duration.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Override the config's root seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Only warnings and errors on stderr.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write the train/eval scene manifests for the configured corpora.
    GenData,
    /// Train the teacher detector on the task loss.
    TrainTeacher,
    /// Learn the selector ensemble against a frozen teacher.
    TrainSelectors {
        /// Teacher checkpoint.
        #[arg(long, value_name = "CKPT")]
        teacher: PathBuf,
    },
    /// Distill a student under the learned instance-attention masks.
    Distill {
        /// Teacher checkpoint.
        #[arg(long, value_name = "CKPT")]
        teacher: PathBuf,
        /// Selector ensemble checkpoint.
        #[arg(long, value_name = "CKPT")]
        selectors: PathBuf,
    },
    /// Train a comparison student: no_kd, fitnet_allones, or teacher_only_mask.
    Baseline {
        /// Variant name.
        #[arg(long)]
        variant: String,
        /// Teacher checkpoint (required except for no_kd).
        #[arg(long, value_name = "CKPT")]
        teacher: Option<PathBuf>,
        /// Selector ensemble checkpoint (required for teacher_only_mask).
        #[arg(long, value_name = "CKPT")]
        selectors: Option<PathBuf>,
    },
    /// Run the config's ablation grid against one fixed teacher.
    Ablate {
        /// Teacher checkpoint.
        #[arg(long, value_name = "CKPT")]
        teacher: PathBuf,
    },
    /// Score a saved detector on the eval corpus and print the record.
    Eval {
        /// Detector checkpoint (teacher or student).
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
    },
    /// Render mask heatmaps and a score dump for the first eval scenes.
    VizMasks {
        /// Teacher checkpoint.
        #[arg(long, value_name = "CKPT")]
        teacher: PathBuf,
        /// Selector ensemble checkpoint.
        #[arg(long, value_name = "CKPT")]
        selectors: PathBuf,
        /// Student checkpoint; adds student-side masks and scores.
        #[arg(long, value_name = "CKPT")]
        student: Option<PathBuf>,
        /// How many eval scenes to render.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', "; ");
            eprintln!("error: {msg}");
            match e {
                Error::Config(_) | Error::Invalid(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::invalid("--out DIR is required for this subcommand"))
}

fn load_detector(path: &Path) -> Result<TinyDetector> {
    detector_from_checkpoint(&load_checkpoint(path)?)
}

fn load_ensemble(path: &Path) -> Result<SelectorEnsemble> {
    ensemble_from_checkpoint(&load_checkpoint(path)?)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = DistillConfig::load_with_env(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.root_seed = seed;
    }
    let corpora: Corpora = build_corpora(&cfg);

    match &cli.cmd {
        Cmd::GenData => {
            let out = out_dir(&cli)?;
            let _lock = DirLock::acquire(out)?;
            write_corpus_manifests(&corpora, out)?;
            println!(
                "wrote manifests for {} train / {} eval scenes to {}",
                corpora.train.len(),
                corpora.eval.len(),
                out.display()
            );
        }
        Cmd::TrainTeacher => {
            let out = out_dir(&cli)?;
            let _lock = DirLock::acquire(out)?;
            let (_, rec) = train_teacher(&cfg, &corpora, out)?;
            match rec.final_map() {
                Some(map) => println!("teacher final map {map:.6}"),
                None => println!("teacher saved at initialization (zero epochs)"),
            }
        }
        Cmd::TrainSelectors { teacher } => {
            let out = out_dir(&cli)?;
            let _lock = DirLock::acquire(out)?;
            let t = load_detector(teacher)?;
            let (ens, rec) = train_selectors(&cfg, &t, &corpora, out)?;
            println!(
                "trained {} selectors of dim {}; final diversity {:.6}",
                ens.k(),
                ens.dim(),
                rec.steps.last().map_or(f64::NAN, |s| s.diversity_loss)
            );
        }
        Cmd::Distill { teacher, selectors } => {
            let out = out_dir(&cli)?;
            let _lock = DirLock::acquire(out)?;
            let t = load_detector(teacher)?;
            let e = load_ensemble(selectors)?;
            let (_, rec) =
                distill_run(&cfg, TrainVariant::Liaf, Some(&t), Some(&e), &corpora, out)?;
            println!("student final map {:.6}", rec.final_map().unwrap_or(f64::NAN));
        }
        Cmd::Baseline { variant, teacher, selectors } => {
            let v = TrainVariant::parse(variant)?;
            let out = out_dir(&cli)?;
            let _lock = DirLock::acquire(out)?;
            let t = teacher.as_deref().map(load_detector).transpose()?;
            let e = selectors.as_deref().map(load_ensemble).transpose()?;
            let (_, rec) = distill_run(&cfg, v, t.as_ref(), e.as_ref(), &corpora, out)?;
            println!("{} final map {:.6}", v.name(), rec.final_map().unwrap_or(f64::NAN));
        }
        Cmd::Ablate { teacher } => {
            let out = out_dir(&cli)?;
            let _lock = DirLock::acquire(out)?;
            let t = load_detector(teacher)?;
            let rows = ablate(&cfg, &t, &corpora, out)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!("ablation grid: {} cells, {failed} failed; table at {}", rows.len(), out.join("ablation.csv").display());
        }
        Cmd::Eval { checkpoint } => {
            let model = load_detector(checkpoint)?;
            let m = evaluate_detector(&model, &corpora.eval, cfg.student.batch_size.max(1))?;
            println!(
                "{{\"map\":{:.6},\"ap50\":{:.6},\"ap75\":{:.6}}}",
                m.map, m.ap50, m.ap75
            );
        }
        Cmd::VizMasks { teacher, selectors, student, count } => {
            let out = out_dir(&cli)?;
            let _lock = DirLock::acquire(out)?;
            let t = load_detector(teacher)?;
            let e = load_ensemble(selectors)?;
            let loaded: Option<(TinyDetector, Tensor, Tensor)> = match student {
                Some(p) => {
                    let ck = load_checkpoint(p)?;
                    let model = detector_from_checkpoint(&ck)?;
                    let w = ck.tensor("proj_w")?.clone();
                    let b = ck.tensor("proj_b")?.clone();
                    Some((model, w, b))
                }
                None => None,
            };
            if *count == 0 || corpora.eval.is_empty() {
                return Err(Error::invalid("viz-masks needs at least one eval scene"));
            }
            let n = (*count).min(corpora.eval.len());
            let indices: Vec<usize> = (0..n).collect();
            let scenes = corpora.eval.scenes(&indices);
            let inputs = VizInputs {
                teacher: &t,
                ensemble: &e,
                student: loaded
                    .as_ref()
                    .map(|(m, w, b)| StudentViz { model: m, proj_w: w, proj_b: b }),
            };
            let written = render_masks(&cfg, &inputs, &scenes, out)?;
            println!("wrote {} files to {}", written.len(), out.display());
        }
    }
    Ok(())
}
