//! Output files of a run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use ssync_core::dump::RawTensor;
use ssync_core::pipeline::LayerCorrespondence;
use ssync_core::{MetricReport, RunConfig, RunResult};

use crate::error::CliError;

/// One line of metrics.csv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub masks: bool,
    pub sharing: bool,
    pub rfh: bool,
    pub bli: bool,
    pub dropouts: bool,
    pub gamma: f64,
    pub lambda: f64,
    pub tau: f64,
    pub seed: u64,
    pub subject_consistency: Option<f64>,
    pub layout_diversity: Option<f64>,
    pub background_drift: Option<f64>,
    pub mask_iou_vs_planted: Option<f64>,
}

impl MetricsRow {
    pub fn new(run_id: &str, config: &RunConfig, metrics: &MetricReport) -> Self {
        let t = config.toggles;
        Self {
            run_id: run_id.to_string(),
            masks: t.masks,
            sharing: t.sharing,
            rfh: t.rfh,
            bli: t.bli,
            dropouts: t.dropouts,
            gamma: config.gamma,
            lambda: config.lambda,
            tau: config.tau,
            seed: config.seed,
            subject_consistency: metrics.subject_consistency,
            layout_diversity: metrics.layout_diversity,
            background_drift: metrics.background_drift,
            mask_iou_vs_planted: metrics.mask_iou_vs_planted,
        }
    }

    pub const METRICS: [&'static str; 4] = [
        "subject_consistency",
        "layout_diversity",
        "background_drift",
        "mask_iou_vs_planted",
    ];

    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "subject_consistency" => self.subject_consistency,
            "layout_diversity" => self.layout_diversity,
            "background_drift" => self.background_drift,
            "mask_iou_vs_planted" => self.mask_iou_vs_planted,
            _ => None,
        }
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, CliError> {
    if !path.is_file() {
        return Err(CliError::Missing(path.display().to_string()));
    }
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<MetricsRow>, _>>()?)
}

#[derive(Serialize)]
struct CorrespondenceRow {
    source_image: usize,
    source_patch: usize,
    target_image: usize,
    target_patch: usize,
    score: f64,
    harmonized: bool,
}

/// The selected matches of the last harmonized layer of the run.
pub fn write_correspondence(path: &Path, tables: &[LayerCorrespondence]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["source_image", "source_patch", "target_image", "target_patch", "score", "harmonized"])?;
    if let Some(last) = tables.last() {
        for e in last.table.entries.iter().filter(|e| e.selected) {
            w.serialize(CorrespondenceRow {
                source_image: e.source_image,
                source_patch: e.source_patch,
                target_image: e.target_image,
                target_patch: e.target_patch,
                score: e.score,
                harmonized: e.harmonized,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `masks/t{T}_img{i}.pgm` for every timestep of the consistency pass.
pub fn write_masks(dir: &Path, result: &RunResult) -> Result<(), CliError> {
    let masks_dir = dir.join("masks");
    fs::create_dir_all(&masks_dir)?;
    let grid = result.config.grid();
    for (t, per_image) in result.masks.iter().enumerate() {
        for (i, mask) in per_image.iter().enumerate() {
            fs::write(masks_dir.join(format!("t{t}_img{i}.pgm")), mask.to_pgm(grid)?)?;
        }
    }
    Ok(())
}

/// Every artifact of a single run.
pub fn write_run(dir: &Path, run_id: &str, result: &RunResult) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    write_metrics(
        &dir.join("metrics.csv"),
        &[MetricsRow::new(run_id, &result.config, &result.metrics)],
    )?;
    write_masks(dir, result)?;
    write_correspondence(&dir.join("correspondence.csv"), &result.correspondences)?;
    RawTensor::from_matrices(&result.final_embeddings)?.save(dir.join("final_embeddings.ssyn"))?;
    Ok(())
}
