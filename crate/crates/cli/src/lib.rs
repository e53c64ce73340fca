//! Experiment runner for the squaring engine: JSON configs in, JSON reports
//! and SVG figures out.

pub mod config;
pub mod pipeline;
pub mod render;
pub mod report;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use squaring_core::equi::AssignmentDoc;

pub use config::ExperimentConfig;
pub use pipeline::{run, RunOutput};
pub use report::ExperimentReport;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: {source}")]
    Stage { stage: &'static str, source: squaring_core::Error },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Piece assignment plus the config that regenerates its window.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssignmentArtifact {
    pub config: ExperimentConfig,
    pub assignment: AssignmentDoc,
}

/// Output directory: explicit flag, then config, then `SQUARING_OUT_DIR`, then `out`.
pub fn output_dir(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
        .or_else(|| std::env::var_os("SQUARING_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    squaring_core::io::write_json(path, v).map_err(|e| CliError::Stage { stage: "write", source: e })
}

/// Writes `report.json`, `assignment.json` and (for `k = 2`) `pieces.svg`.
pub fn write_artifacts(out: &RunOutput, dir: &Path) -> CliResult<Vec<PathBuf>> {
    let cfg = &out.report.config;
    let mut written = Vec::new();
    let art = AssignmentArtifact { config: cfg.clone(), assignment: out.matching.assignment.to_doc() };
    let p = dir.join("assignment.json");
    write_json(&p, &art)?;
    written.push(p);
    if cfg.output.svg && cfg.k == 2 {
        let p = dir.join("pieces.svg");
        render::render_svg(&out.matching.assignment, &out.window, &p)?;
        written.push(p);
    }
    // the report goes last so its presence marks a finished run
    let p = dir.join("report.json");
    write_json(&p, &out.report)?;
    written.push(p);
    Ok(written)
}
