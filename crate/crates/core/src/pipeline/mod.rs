//! End-to-end runs: single edits, benchmark sweeps, profiling, and the
//! reproducible run manifests they emit.

pub mod bench;
pub mod config;
pub mod profile;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::denoiser::codec::AffineCodec;
use crate::denoiser::toy::ToyDenoiser;
use crate::denoiser::DenoiserBackend;
use crate::embedder::ToyEmbedder;
use crate::error::{Error, Result};
use crate::gateway::{optimize_edit, LossBreakdown, RolloutStats};
use crate::image::{read_ppm, write_ppm, Image};
use crate::inversion::{invert, reconstruct_with_substitution};
use crate::metrics::{alignment_score, self_similarity_distance, MetricReport};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::toydata::{parse_caption, Caption, TaskCategory};

pub use config::{parse_mode, parse_strategy, parse_task, task_defaults, RunConfig};

/// Full record of one edit run; written atomically at run end.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub source_image: PathBuf,
    pub target_caption: String,
    pub mode: String,
    pub task: Option<String>,
    pub loss_history: Vec<LossBreakdown>,
    pub stage_image_paths: Vec<PathBuf>,
    pub final_image_path: PathBuf,
    pub final_latent_path: PathBuf,
    /// FNV-1a digest of the final latent bytes; byte-identical runs match.
    pub final_latent_digest: String,
    pub metrics: MetricReport,
    pub wall_clock_ms: u64,
    pub rollout_stats: Vec<RolloutStats>,
}

impl RunManifest {
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::config(format!("manifest serialization: {e}")))?;
        let tmp = path.with_extension("tmp-manifest");
        std::fs::write(&tmp, json)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::config(format!("bad manifest: {e}")))
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// One edit request on top of a run config.
#[derive(Debug, Clone)]
pub struct EditRequest {
    pub image_path: PathBuf,
    pub target_caption: String,
    /// Applies the per-task defaults for learning rate, lambda and mode.
    pub task: Option<TaskCategory>,
}

/// Loaded models plus schedule, shared by the run entry points.
pub struct Workbench<T: Scalar> {
    pub backend: ToyDenoiser<T>,
    pub embedder: ToyEmbedder<T>,
    pub sched: NoiseSchedule<T>,
    pub codec: AffineCodec,
}

impl<T: Scalar> Workbench<T> {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let sched = NoiseSchedule::new(&cfg.schedule)?;
        let (backend, ckpt_sched) = ToyDenoiser::load(&cfg.backend.checkpoint)?;
        if ckpt_sched != sched.fingerprint() {
            return Err(Error::config(format!(
                "denoiser checkpoint was trained on schedule '{ckpt_sched}', run config uses '{}'",
                sched.fingerprint()
            )));
        }
        let embedder = ToyEmbedder::load(&cfg.embedder.checkpoint)?;
        let dcfg = backend.config();
        if embedder.config().image_size != dcfg.spatial {
            return Err(Error::config(
                "embedder and denoiser disagree on the image size",
            ));
        }
        let codec = AffineCodec::new(dcfg.latent_channels, dcfg.spatial)?;
        Ok(Workbench {
            backend,
            embedder,
            sched,
            codec,
        })
    }
}

/// Run one edit end to end: invert, reconstruct with substitution, optimize
/// under gateway-restricted guidance, and persist every artifact.
pub fn edit_run<T: Scalar>(
    cfg: &RunConfig,
    req: &EditRequest,
    bench: &Workbench<T>,
) -> Result<RunManifest> {
    let started = Instant::now();
    let mut opt_cfg = cfg.optimize.clone();
    let mut mode = cfg.share_mode()?;
    if let Some(task) = req.task {
        let (lr, lambda, task_mode) = task_defaults(task);
        opt_cfg.learning_rate = lr;
        opt_cfg.lambda = lambda;
        mode = task_mode;
    }
    let target = parse_caption(&req.target_caption)?;
    let image = read_ppm::<T>(&req.image_path)?;
    let category = req.task.unwrap_or(match mode {
        crate::share::ShareMode::QShare => TaskCategory::AttributeManipulation,
        crate::share::ShareMode::KvShare => TaskCategory::PoseChange,
    });
    let outcome = edit_image(cfg, &image, &target, mode, category, &opt_cfg, bench, cfg.seed)?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut stage_paths = Vec::new();
    for (k, img) in outcome.outcome.stage_images.iter().enumerate() {
        let p = cfg.out_dir.join(format!("loop_{k:02}.ppm"));
        write_ppm(&p, img)?;
        stage_paths.push(p);
    }
    let final_image_path = cfg.out_dir.join("final.ppm");
    write_ppm(&final_image_path, &outcome.outcome.final_image)?;
    let final_latent_path = cfg.out_dir.join("final_latent.lar");
    let mut latent_archive = Archive::new(r#"{"kind":"final-latent"}"#);
    latent_archive.push(
        "final_latent",
        &outcome.outcome.final_latent.shape(),
        outcome.outcome.final_latent.data(),
    );
    latent_archive.write(&final_latent_path)?;
    let digest = format!("{:016x}", fnv1a(&std::fs::read(&final_latent_path)?));

    // Line-delimited loss record stream.
    let losses_path = cfg.out_dir.join("losses.jsonl");
    let mut lines = String::new();
    for rec in &outcome.outcome.history {
        lines.push_str(&serde_json::to_string(rec).unwrap());
        lines.push('\n');
    }
    std::fs::write(&losses_path, lines)?;

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        source_image: req.image_path.clone(),
        target_caption: target.text(),
        mode: mode.label().to_string(),
        task: req.task.map(|t| t.label().to_string()),
        loss_history: outcome.outcome.history.clone(),
        stage_image_paths: stage_paths,
        final_image_path,
        final_latent_path,
        final_latent_digest: digest,
        metrics: outcome.metrics,
        wall_clock_ms: started.elapsed().as_millis() as u64,
        rollout_stats: outcome.outcome.rollout_stats.clone(),
    };
    manifest.write_atomic(&cfg.out_dir.join("manifest.json"))?;
    Ok(manifest)
}

pub struct EditResult<T: Scalar> {
    pub outcome: crate::gateway::EditOutcome<T>,
    pub metrics: MetricReport,
}

/// In-memory edit: the benchmark and the tests drive this directly.
#[allow(clippy::too_many_arguments)]
pub fn edit_image<T: Scalar>(
    cfg: &RunConfig,
    source_image: &Image<T>,
    target: &Caption,
    mode: crate::share::ShareMode,
    category: TaskCategory,
    opt_cfg: &crate::gateway::OptimizationConfig,
    bench: &Workbench<T>,
    seed: u64,
) -> Result<EditResult<T>> {
    let sched = &bench.sched;
    let backend = &bench.backend;
    let z0 = bench.codec.encode(source_image)?;
    // Inversion uses the null prompt; guidance is kept on, where it is
    // arithmetically inert.
    let traj = invert(
        &z0,
        backend.null_condition(),
        T::from_f64_lossy(opt_cfg.cfg_scale),
        backend,
        sched,
    )?;
    let mut share_cfg = cfg.share_config(backend.sites().len(), sched.num_inference_steps())?;
    share_cfg.mode = mode;
    let (_recon, cache) = reconstruct_with_substitution(&traj, &share_cfg, backend, sched)?;

    let frozen_before = backend.frozen_fingerprint();
    let cache_before = cache.fingerprint();
    let target_cond = backend.encode_caption(target)?;
    let outcome = optimize_edit(
        &traj,
        &cache,
        &share_cfg,
        target,
        &target_cond,
        opt_cfg,
        backend,
        &bench.codec,
        &bench.embedder,
        sched,
        seed,
    )?;
    if backend.frozen_fingerprint() != frozen_before || cache.fingerprint() != cache_before {
        return Err(Error::config(
            "frozen weights or feature cache changed during optimization",
        ));
    }
    let metrics = MetricReport {
        alignment_score: alignment_score(&outcome.final_image, target, &bench.embedder)?,
        self_sim_distance: self_similarity_distance(
            &outcome.final_image,
            source_image,
            &bench.embedder,
        )?,
        task_category: category,
    };
    Ok(EditResult { outcome, metrics })
}

/// Train the toy denoiser over the full scene space and write a checkpoint.
pub fn train_denoiser_to<T: Scalar>(
    out: &Path,
    dcfg: &crate::denoiser::ToyDenoiserConfig,
    sched_spec: &crate::schedule::ScheduleSpec,
    train_cfg: &crate::denoiser::train::DenoiserTrainConfig,
) -> Result<crate::denoiser::train::TrainReport> {
    let sched = NoiseSchedule::<T>::new(sched_spec)?;
    let model = ToyDenoiser::<T>::init(dcfg, train_cfg.seed)?;
    let codec = AffineCodec::new(dcfg.latent_channels, dcfg.spatial)?;
    let scenes = crate::toydata::all_scenes();
    let report =
        crate::denoiser::train::train_toy_denoiser(&model, &scenes, &sched, &codec, train_cfg)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    model.save(out, sched.fingerprint())?;
    Ok(report)
}

/// Train the toy embedder over the full scene space and write a checkpoint.
pub fn train_embedder_to<T: Scalar>(
    out: &Path,
    ecfg: &crate::embedder::ToyEmbedderConfig,
    train_cfg: &crate::embedder::EmbedderTrainConfig,
) -> Result<crate::embedder::EmbedderTrainReport> {
    let model = ToyEmbedder::<T>::init(ecfg, train_cfg.seed)?;
    let scenes = crate::toydata::all_scenes();
    // Hold out a slice of the scene space for the retrieval gate.
    let holdout: Vec<_> = scenes.iter().copied().step_by(37).take(12).collect();
    let train: Vec<_> = scenes
        .iter()
        .copied()
        .filter(|s| !holdout.contains(s))
        .collect();
    let report = crate::embedder::train_toy_embedder(&model, &train, &holdout, train_cfg)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    model.save(out)?;
    Ok(report)
}
