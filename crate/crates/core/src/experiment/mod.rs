//! End-to-end orchestration: forge, classifiers, counterfactual bundles,
//! evaluation and report, one resumable directory per stage.

mod config;
mod pipeline;
mod report;

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub use config::{DatasetSource, ExperimentConfig, ReportConfig};
pub use pipeline::{
    pairs_file, run_pipeline, ClassifierSummary, EvaluationSummary, PairRecord, Pipeline, RunManifest, Stage,
    StageMarker, StageRecord, AGGREGATE_BY_SUBGROUP_FILE, AGGREGATE_FILE, BUNDLE_FILE, CONFIG_FILE, DONE_FILE,
    EVALUATION_FILE, MODEL_FILE, RUN_MANIFEST_FILE, SUMMARY_FILE,
};
pub use report::{
    emit_report, sample_panel_cases, ReportOutputs, SclsGap, HEATMAP_DEFINITION, PANELS_DIR, PANEL_COLUMNS,
    PANEL_GRID_FILE, PROVENANCE_FILE, REGION_MASS_DEFINITION, SCLS_GAP_FILE, SUBGROUP_CHART_FILE, SUBGROUP_CSV_FILE,
    TABLE_FILE,
};

pub const VERSION: &str = concat!("cfdebias ", env!("CARGO_PKG_VERSION"));

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests;
