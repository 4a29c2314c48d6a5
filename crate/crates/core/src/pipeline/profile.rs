//! Gateway memory/runtime profiling: one optimization loop per gateway
//! count, with retained-graph instrumentation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gateway::OptimizationConfig;
use crate::scalar::Scalar;
use crate::toydata::{render, TaskCategory};

use super::{edit_image, RunConfig, Workbench};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileRow {
    pub gateways: usize,
    /// Denoiser graphs retained at loss time.
    pub retained_graphs: usize,
    /// Activation elements those graphs hold.
    pub retained_elements: usize,
    /// Peak live denoiser-scoped elements (allocation proxy).
    pub peak_scoped_elements: usize,
    pub wall_clock_ms: f64,
}

/// One guided optimization loop per gateway count against a synthetic
/// attribute-change case.
pub fn profile_run<T: Scalar>(
    cfg: &RunConfig,
    gateway_counts: &[usize],
    bench: &Workbench<T>,
) -> Result<Vec<ProfileRow>> {
    let scene = crate::toydata::all_scenes()[0];
    let mut target_scene = scene;
    target_scene.color = crate::toydata::SceneColor::Blue;
    let image = render::<T>(&scene, cfg.seed);
    let mut rows = Vec::with_capacity(gateway_counts.len());
    for &n in gateway_counts {
        let mut opt_cfg: OptimizationConfig = cfg.optimize.clone();
        opt_cfg.loops = 1;
        opt_cfg.gateways_per_loop = n;
        let started = Instant::now();
        let result = edit_image(
            cfg,
            &image,
            &target_scene.caption(),
            cfg.share_mode()?,
            TaskCategory::AttributeManipulation,
            &opt_cfg,
            bench,
            cfg.seed,
        )?;
        let wall = started.elapsed().as_secs_f64() * 1e3;
        let stats = &result.outcome.rollout_stats[0];
        rows.push(ProfileRow {
            gateways: n,
            retained_graphs: stats.retained_graphs,
            retained_elements: stats.retained_elements,
            peak_scoped_elements: stats.peak_scoped_elements,
            wall_clock_ms: wall,
        });
    }
    Ok(rows)
}

pub fn format_profile(rows: &[ProfileRow]) -> String {
    let mut out = format!(
        "{:>9} {:>16} {:>18} {:>20} {:>12}\n",
        "gateways", "retained-graphs", "retained-elements", "peak-scoped-elems", "wall-ms"
    );
    for r in rows {
        out.push_str(&format!(
            "{:>9} {:>16} {:>18} {:>20} {:>12.1}\n",
            r.gateways,
            r.retained_graphs,
            r.retained_elements,
            r.peak_scoped_elements,
            r.wall_clock_ms
        ));
    }
    out
}
