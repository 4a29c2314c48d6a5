//! Run configuration: a flat TOML document with section headers, fully
//! determining a run together with the seed.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::OptimizationConfig;
use crate::schedule::ScheduleSpec;
use crate::share::{ShareConfig, ShareMode, StepWindow};
use crate::toydata::TaskCategory;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub schedule: ScheduleSpec,
    pub backend: BackendSection,
    pub embedder: EmbedderSection,
    pub share: ShareSection,
    pub optimize: OptimizationConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackendSection {
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbedderSection {
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ShareSection {
    /// "structure" (Q-share) or "nonrigid" (KV-share).
    pub mode: String,
    /// Shared layer indices; default: the deepest half of the backend sites.
    pub layers: Option<Vec<usize>>,
    /// Inclusive `[start, end]` sampling-step window; default: 5 through S.
    pub step_window: Option<[usize; 2]>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/out"),
            schedule: ScheduleSpec::default(),
            backend: BackendSection {
                checkpoint: PathBuf::from("denoiser.lar"),
            },
            embedder: EmbedderSection {
                checkpoint: PathBuf::from("embedder.lar"),
            },
            share: ShareSection {
                mode: "structure".into(),
                layers: None,
                step_window: None,
            },
            optimize: OptimizationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("bad run config: {e}")))
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn share_mode(&self) -> Result<ShareMode> {
        parse_mode(&self.share.mode)
    }

    /// Materialize the share configuration for a backend with `n_sites`
    /// attention sites and an `s`-step sampler.
    pub fn share_config(&self, n_sites: usize, s: usize) -> Result<ShareConfig> {
        let mode = self.share_mode()?;
        let mut cfg = ShareConfig::default_for(mode, n_sites, s);
        if let Some(layers) = &self.share.layers {
            cfg.shared_layers = layers.iter().copied().collect::<BTreeSet<usize>>();
        }
        if let Some([start, end]) = self.share.step_window {
            cfg.active_steps = Some(StepWindow { start, end });
        }
        Ok(cfg)
    }
}

pub fn parse_mode(text: &str) -> Result<ShareMode> {
    match text {
        "structure" => Ok(ShareMode::QShare),
        "nonrigid" => Ok(ShareMode::KvShare),
        other => Err(Error::invalid(format!(
            "unknown share mode '{other}' (expected 'structure' or 'nonrigid')"
        ))),
    }
}

/// Per-task editing defaults: learning rate, reconstruction strength and
/// share mode. Point values sit inside the task's working range.
pub fn task_defaults(category: TaskCategory) -> (f64, f64, ShareMode) {
    match category {
        TaskCategory::AttributeManipulation => (1e-4, 1.0, ShareMode::QShare),
        TaskCategory::ObjectReplacement => (5e-4, 0.5, ShareMode::QShare),
        TaskCategory::StyleTransfer => (1e-4, 0.5, ShareMode::QShare),
        TaskCategory::PoseChange => (1e-3, 1.0, ShareMode::KvShare),
        TaskCategory::ShapeChange => (7.5e-4, 0.75, ShareMode::KvShare),
    }
}

pub fn parse_task(text: &str) -> Result<TaskCategory> {
    match text {
        "replacement" => Ok(TaskCategory::ObjectReplacement),
        "attribute" => Ok(TaskCategory::AttributeManipulation),
        "style" => Ok(TaskCategory::StyleTransfer),
        "pose" => Ok(TaskCategory::PoseChange),
        "shape" => Ok(TaskCategory::ShapeChange),
        other => Err(Error::invalid(format!("unknown task '{other}'"))),
    }
}

pub fn parse_strategy(text: &str) -> Result<crate::gateway::GatewayStrategy> {
    use crate::gateway::GatewayStrategy::*;
    match text {
        "random" => Ok(Random),
        "former-half" => Ok(FormerHalf),
        "latter-half" => Ok(LatterHalf),
        "stratified-intervals" | "stratified" => Ok(StratifiedIntervals),
        other => Err(Error::invalid(format!("unknown gateway strategy '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_preserves_config() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        // Flat key-value document with section headers.
        assert!(text.contains("[schedule]"));
        assert!(text.contains("[optimize]"));
        assert!(text.contains("num_train_steps = 1000"));
    }

    #[test]
    fn share_config_honors_overrides() {
        let mut cfg = RunConfig::default();
        cfg.share.layers = Some(vec![2, 3]);
        cfg.share.step_window = Some([3, 10]);
        let sc = cfg.share_config(8, 10).unwrap();
        assert_eq!(sc.shared_layers, [2, 3].into_iter().collect());
        assert_eq!(sc.active_steps, Some(StepWindow { start: 3, end: 10 }));
    }

    #[test]
    fn task_defaults_follow_the_task_table() {
        let (lr, lambda, mode) = task_defaults(TaskCategory::AttributeManipulation);
        assert_eq!((lr, lambda), (1e-4, 1.0));
        assert_eq!(mode, ShareMode::QShare);
        let (lr, lambda, mode) = task_defaults(TaskCategory::PoseChange);
        assert_eq!((lr, lambda), (1e-3, 1.0));
        assert_eq!(mode, ShareMode::KvShare);
    }

    #[test]
    fn bad_mode_and_strategy_are_usage_errors() {
        assert!(parse_mode("sideways").is_err());
        assert!(parse_strategy("psychic").is_err());
        assert!(parse_task("juggling").is_err());
    }
}
