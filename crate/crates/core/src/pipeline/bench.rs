//! Benchmark sweeps: per-category metric tables and the gateway-strategy
//! ablation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::GatewayStrategy;
use crate::image::{read_ppm, write_ppm};
use crate::scalar::Scalar;
use crate::toydata::{generate_benchmark, render, EditTriplet, TaskCategory, TASK_CATEGORIES};

use super::{config::task_defaults, edit_image, RunConfig, Workbench};

/// One persisted benchmark case: scene fields, caption ids and image path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRecord {
    pub triplet: EditTriplet,
    pub source_caption: String,
    pub target_caption: String,
    pub image_path: PathBuf,
}

/// Render a benchmark to disk: one PPM per case plus a manifest.
pub fn write_benchmark(dir: &Path, n_per_task: usize, seed: u64) -> Result<PathBuf> {
    let triplets = generate_benchmark(n_per_task, seed)?;
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(triplets.len());
    for (i, triplet) in triplets.into_iter().enumerate() {
        let image_path = dir.join(format!("case_{i:03}.ppm"));
        let img = render::<f64>(&triplet.source, triplet.render_seed);
        write_ppm(&image_path, &img)?;
        records.push(BenchRecord {
            source_caption: triplet.source_caption().text(),
            target_caption: triplet.target_caption().text(),
            image_path,
            triplet,
        });
    }
    let manifest_path = dir.join("benchmark.json");
    let json = serde_json::to_string_pretty(&records)
        .map_err(|e| Error::config(format!("benchmark serialization: {e}")))?;
    std::fs::write(&manifest_path, json)?;
    Ok(manifest_path)
}

pub fn read_benchmark(path: &Path) -> Result<Vec<BenchRecord>> {
    serde_json::from_str(&std::fs::read_to_string(path)?)
        .map_err(|e| Error::config(format!("bad benchmark manifest: {e}")))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseRow {
    pub index: usize,
    pub category: TaskCategory,
    pub target_caption: String,
    pub alignment_score: f64,
    pub self_sim_distance: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupStats {
    pub cases: usize,
    pub mean_alignment: f64,
    pub mean_self_sim: f64,
}

/// Table mirroring the per-category columns plus the two task groups.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub strategy: GatewayStrategy,
    pub rows: Vec<CaseRow>,
    pub skipped: Vec<(usize, String)>,
    pub per_category: Vec<(TaskCategory, GroupStats)>,
    pub structure_preserved: GroupStats,
    pub non_rigid: GroupStats,
}

fn group_stats(rows: &[&CaseRow]) -> GroupStats {
    if rows.is_empty() {
        return GroupStats {
            cases: 0,
            mean_alignment: f64::NAN,
            mean_self_sim: f64::NAN,
        };
    }
    let n = rows.len() as f64;
    GroupStats {
        cases: rows.len(),
        mean_alignment: rows.iter().map(|r| r.alignment_score).sum::<f64>() / n,
        mean_self_sim: rows.iter().map(|r| r.self_sim_distance).sum::<f64>() / n,
    }
}

fn summarize(strategy: GatewayStrategy, rows: Vec<CaseRow>, skipped: Vec<(usize, String)>) -> BenchReport {
    let per_category = TASK_CATEGORIES
        .iter()
        .map(|cat| {
            let members: Vec<&CaseRow> = rows.iter().filter(|r| r.category == *cat).collect();
            (*cat, group_stats(&members))
        })
        .collect();
    let structure: Vec<&CaseRow> = rows
        .iter()
        .filter(|r| r.category.is_structure_preserved())
        .collect();
    let nonrigid: Vec<&CaseRow> = rows
        .iter()
        .filter(|r| !r.category.is_structure_preserved())
        .collect();
    BenchReport {
        strategy,
        per_category,
        structure_preserved: group_stats(&structure),
        non_rigid: group_stats(&nonrigid),
        rows,
        skipped,
    }
}

/// Run every benchmark case under one gateway strategy. Task defaults
/// provide the per-category learning rate, lambda and share mode; missing
/// source images are skipped with a warning entry.
pub fn benchmark_run<T: Scalar>(
    cfg: &RunConfig,
    records: &[BenchRecord],
    strategy: GatewayStrategy,
    bench: &Workbench<T>,
) -> Result<BenchReport> {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (index, record) in records.iter().enumerate() {
        let image = match read_ppm::<T>(&record.image_path) {
            Ok(img) => img,
            Err(e) => {
                skipped.push((index, format!("{}: {e}", record.image_path.display())));
                continue;
            }
        };
        let (lr, lambda, mode) = task_defaults(record.triplet.category);
        let mut opt_cfg = cfg.optimize.clone();
        opt_cfg.learning_rate = lr;
        opt_cfg.lambda = lambda;
        opt_cfg.strategy = strategy;
        let target = record.triplet.target_caption();
        let result = edit_image(
            cfg,
            &image,
            &target,
            mode,
            record.triplet.category,
            &opt_cfg,
            bench,
            cfg.seed.wrapping_add(index as u64),
        )?;
        rows.push(CaseRow {
            index,
            category: record.triplet.category,
            target_caption: record.target_caption.clone(),
            alignment_score: result.metrics.alignment_score,
            self_sim_distance: result.metrics.self_sim_distance,
        });
    }
    Ok(summarize(strategy, rows, skipped))
}

/// Run the benchmark under each gateway strategy and collect the
/// comparison table.
pub fn strategy_ablation<T: Scalar>(
    cfg: &RunConfig,
    records: &[BenchRecord],
    strategies: &[GatewayStrategy],
    bench: &Workbench<T>,
) -> Result<Vec<BenchReport>> {
    strategies
        .iter()
        .map(|s| benchmark_run(cfg, records, *s, bench))
        .collect()
}

/// Plain-text rendering of a benchmark table, column order matching the
/// task list.
pub fn format_table(report: &BenchReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "strategy: {}\n{:<24} {:>6} {:>12} {:>12}\n",
        report.strategy.label(),
        "category",
        "cases",
        "align",
        "self-sim"
    ));
    for (cat, stats) in &report.per_category {
        out.push_str(&format!(
            "{:<24} {:>6} {:>12.3} {:>12.4}\n",
            cat.label(),
            stats.cases,
            stats.mean_alignment,
            stats.mean_self_sim
        ));
    }
    out.push_str(&format!(
        "{:<24} {:>6} {:>12.3} {:>12.4}\n",
        "structure-preserved",
        report.structure_preserved.cases,
        report.structure_preserved.mean_alignment,
        report.structure_preserved.mean_self_sim
    ));
    out.push_str(&format!(
        "{:<24} {:>6} {:>12.3} {:>12.4}\n",
        "non-rigid",
        report.non_rigid.cases,
        report.non_rigid.mean_alignment,
        report.non_rigid.mean_self_sim
    ));
    for (idx, reason) in &report.skipped {
        out.push_str(&format!("warning: case {idx} skipped: {reason}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_benchmark(dir.path(), 2, 3).unwrap();
        let records = read_benchmark(&manifest).unwrap();
        assert_eq!(records.len(), 10);
        for r in &records {
            assert!(r.image_path.exists());
            r.triplet.validate().unwrap();
        }
    }

    #[test]
    fn empty_benchmark_gives_empty_table() {
        let report = summarize(GatewayStrategy::Random, Vec::new(), Vec::new());
        assert!(report.rows.is_empty());
        assert_eq!(report.structure_preserved.cases, 0);
        let text = format_table(&report);
        assert!(text.contains("object-replacement"));
    }

    #[test]
    fn grouping_means_match_hand_computation() {
        let rows = vec![
            CaseRow {
                index: 0,
                category: TaskCategory::AttributeManipulation,
                target_caption: String::new(),
                alignment_score: 10.0,
                self_sim_distance: 1.0,
            },
            CaseRow {
                index: 1,
                category: TaskCategory::StyleTransfer,
                target_caption: String::new(),
                alignment_score: 30.0,
                self_sim_distance: 3.0,
            },
            CaseRow {
                index: 2,
                category: TaskCategory::PoseChange,
                target_caption: String::new(),
                alignment_score: 50.0,
                self_sim_distance: 5.0,
            },
        ];
        let report = summarize(GatewayStrategy::Random, rows, Vec::new());
        assert_eq!(report.structure_preserved.mean_alignment, 20.0);
        assert_eq!(report.structure_preserved.mean_self_sim, 2.0);
        assert_eq!(report.non_rigid.mean_alignment, 50.0);
        // Column order mirrors the task list.
        let labels: Vec<&str> = report.per_category.iter().map(|(c, _)| c.label()).collect();
        assert_eq!(
            labels,
            vec![
                "object-replacement",
                "attribute-manipulation",
                "style-transfer",
                "pose-change",
                "shape-change"
            ]
        );
    }
}
