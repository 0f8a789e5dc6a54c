//! Accounting-model memory curves: per-sequence cache bytes scale with
//! batch size while model bytes stay fixed, giving a crossover batch
//! beyond which the cache dominates.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::output::{ensure_dir, summary_json, write_file, MEMORY_SCHEMA};
use super::{ExperimentSpec, HarnessError};
use crate::cache::CachePolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryPoint {
    pub batch: usize,
    pub cache_bytes: u64,
    pub total_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryCurve {
    pub name: String,
    pub policy: CachePolicy,
    /// Peak cache bytes for one sequence: occupancy is capped by both the
    /// run length and the policy capacity.
    pub per_sequence_bytes: u64,
    /// Smallest batch whose cache bytes strictly exceed the model bytes.
    pub crossover_batch: Option<u64>,
    pub points: Vec<MemoryPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub run_length: usize,
    /// Fixed model weight bytes: parameter count times the same scalar
    /// width used for cache entries.
    pub model_bytes: u64,
    pub rows: Vec<MemoryCurve>,
}

/// Pure accounting over the spec's policies and batch sweep; nothing is
/// executed.
pub fn memory_report(spec: &ExperimentSpec) -> Result<MemoryReport, HarnessError> {
    spec.validate()?;
    let accounting = spec.model.memory_model();
    let model_bytes = spec.model.param_count() as u64 * spec.model.kv_bytes_per_scalar as u64;
    let rows = spec
        .policies
        .iter()
        .map(|np| {
            let peak_occupancy = spec.run_length.min(np.policy.capacity);
            let per_seq = accounting.footprint(peak_occupancy);
            let crossover_batch = (per_seq > 0).then(|| model_bytes / per_seq + 1);
            let points = spec
                .batch_sizes
                .iter()
                .map(|&batch| {
                    let cache_bytes = per_seq * batch as u64;
                    MemoryPoint {
                        batch,
                        cache_bytes,
                        total_bytes: cache_bytes + model_bytes,
                    }
                })
                .collect();
            MemoryCurve {
                name: np.name.clone(),
                policy: np.policy.clone(),
                per_sequence_bytes: per_seq,
                crossover_batch,
                points,
            }
        })
        .collect();
    Ok(MemoryReport {
        run_length: spec.run_length,
        model_bytes,
        rows,
    })
}

/// Writes the curve as `steps.csv` (memory schema) plus `summary.json`.
pub fn run_memory(spec: &ExperimentSpec, out_dir: &Path) -> Result<MemoryReport, HarnessError> {
    let report = memory_report(spec)?;
    ensure_dir(out_dir)?;
    let mut csv = format!("{MEMORY_SCHEMA}\npolicy,batch,cache_bytes,model_bytes,total_bytes\n");
    for row in &report.rows {
        for p in &row.points {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                row.name, p.batch, p.cache_bytes, report.model_bytes, p.total_bytes
            ));
        }
    }
    write_file(&out_dir.join("steps.csv"), &csv)?;
    write_file(
        &out_dir.join("summary.json"),
        &summary_json("memory", spec, &report),
    )?;
    Ok(report)
}
