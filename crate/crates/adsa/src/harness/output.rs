//! Deterministic emission of the pinned output files: versioned CSV
//! schemas and a pretty-printed `summary.json`.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{ExperimentSpec, HarnessError};
use crate::model::GenerationRun;

pub(crate) const STEPS_SCHEMA: &str = "# adsa-steps v1";
pub(crate) const MEMORY_SCHEMA: &str = "# adsa-memory-curve v1";
pub(crate) const HISTOGRAM_SCHEMA: &str = "# adsa-histogram v1";

pub(crate) fn ensure_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// One CSV row per (policy, generated step). Floats use Rust's shortest
/// round-trip formatting, so the bytes are reproducible.
pub(crate) fn steps_csv(runs: &[(&str, &GenerationRun)]) -> String {
    let mut out = format!(
        "{STEPS_SCHEMA}\npolicy,step,position,token,context_min,context_mean,\
         context_max,occupancy,accounted_bytes,evicted_position\n"
    );
    for (name, run) in runs {
        for t in &run.trace {
            let evicted = t.evicted_position.map_or(String::new(), |p| p.to_string());
            out.push_str(&format!(
                "{name},{},{},{},{},{},{},{},{},{evicted}\n",
                t.step,
                t.position,
                t.sampled_token,
                t.context_min,
                t.context_mean,
                t.context_max,
                t.cache_occupancy,
                t.accounted_bytes,
            ));
        }
    }
    out
}

/// The `summary.json` payload: command, full spec echo, and the report.
pub(crate) fn summary_json<R: Serialize>(command: &str, spec: &ExperimentSpec, report: &R) -> String {
    let value = serde_json::json!({ "command": command, "spec": spec, "report": report });
    let mut text = serde_json::to_string_pretty(&value).expect("summary serialization");
    text.push('\n');
    text
}
