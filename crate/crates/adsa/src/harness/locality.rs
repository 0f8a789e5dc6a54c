//! Attention-locality aggregation: where attention mass lands, bucketed
//! by token distance and by column offset on a raster grid.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::output::{ensure_dir, steps_csv, summary_json, write_file, HISTOGRAM_SCHEMA};
use super::{ExperimentSpec, HarnessError};
use crate::model::{generate, GenerationRun, Model, RunOptions, WeightRecord};

/// Attention-mass histograms averaged over all captured records. Each
/// record's weights sum to one, so each histogram sums to one as well.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalityReport {
    pub row_width: usize,
    pub record_count: usize,
    pub step_count: usize,
    /// `distance_mass[d]` is the mean weight landing `d` tokens back from
    /// the query (0 = the query's own position).
    pub distance_mass: Vec<f64>,
    /// `column_offset_mass[o]` is the mean weight landing at
    /// `distance % row_width == o`; offset 0 is the same raster column.
    pub column_offset_mass: Vec<f64>,
}

/// Aggregates captured per-head weight records into the two histograms.
pub fn aggregate_weight_records(records: &[WeightRecord], row_width: usize) -> LocalityReport {
    assert!(row_width > 0, "row_width must be positive");
    assert!(!records.is_empty(), "no weight records to aggregate");
    let max_distance = records
        .iter()
        .map(|r| r.q_position - r.used_positions[0])
        .max()
        .unwrap();
    let mut distance_mass = vec![0.0; max_distance + 1];
    let mut column_offset_mass = vec![0.0; row_width];
    let mut steps = BTreeSet::new();
    for r in records {
        steps.insert(r.step);
        for (&pos, &w) in r.used_positions.iter().zip(&r.weights) {
            let d = r.q_position - pos;
            distance_mass[d] += w;
            column_offset_mass[d % row_width] += w;
        }
    }
    let norm = records.len() as f64;
    for m in &mut distance_mass {
        *m /= norm;
    }
    for m in &mut column_offset_mass {
        *m /= norm;
    }
    LocalityReport {
        row_width,
        record_count: records.len(),
        step_count: steps.len(),
        distance_mass,
        column_offset_mass,
    }
}

/// Builds the locality report from a finished run; errors if the run was
/// generated without weight capture.
pub fn locality_report(run: &GenerationRun, row_width: usize) -> Result<LocalityReport, HarnessError> {
    let records = run
        .weight_records
        .as_ref()
        .filter(|r| !r.is_empty())
        .ok_or(HarnessError::MissingCapture)?;
    Ok(aggregate_weight_records(records, row_width))
}

fn histogram_csv(report: &LocalityReport) -> String {
    let mut out = format!("{HISTOGRAM_SCHEMA}\nkind,bucket,mass\n");
    for (d, m) in report.distance_mass.iter().enumerate() {
        out.push_str(&format!("distance,{d},{m}\n"));
    }
    for (o, m) in report.column_offset_mass.iter().enumerate() {
        out.push_str(&format!("column_offset,{o},{m}\n"));
    }
    out
}

/// Runs the first grid policy with weight capture and writes
/// `histogram.csv`, `steps.csv`, and `summary.json` into `out_dir`.
pub fn run_locality(spec: &ExperimentSpec, out_dir: &Path) -> Result<LocalityReport, HarnessError> {
    spec.validate()?;
    if !spec.capture_weights {
        return Err(HarnessError::MissingCapture);
    }
    ensure_dir(out_dir)?;
    let model = Model::new(spec.model.clone())?;
    let np = &spec.policies[0];
    let options = RunOptions {
        sampling: spec.sampling,
        capture_logits: false,
        capture_weights: true,
    };
    let run = generate(
        &model,
        &spec.prompt,
        spec.generated_len(),
        &np.policy,
        spec.sample_seed,
        &options,
    )?;
    let report = locality_report(&run, spec.row_width)?;
    write_file(&out_dir.join("histogram.csv"), &histogram_csv(&report))?;
    write_file(&out_dir.join("steps.csv"), &steps_csv(&[(np.name.as_str(), &run)]))?;
    write_file(
        &out_dir.join("summary.json"),
        &summary_json("locality", spec, &report),
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::CachePolicy;
    use crate::harness::NamedPolicy;
    use crate::model::ModelConfig;

    fn capture_run() -> GenerationRun {
        let model = Model::new(ModelConfig {
            vocab_size: 32,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            seq_capacity: 64,
            ..Default::default()
        })
        .unwrap();
        let options = RunOptions {
            capture_weights: true,
            ..Default::default()
        };
        generate(&model, &[0], 30, &CachePolicy::dense(64), 7, &options).unwrap()
    }

    #[test]
    fn uniform_weights_give_flat_histograms() {
        // A hand-built record with uniform weights over positions 0..6
        // must spread mass evenly over distances 0..6 and, with width 3,
        // evenly over the three column offsets.
        let record = WeightRecord {
            step: 0,
            layer: 0,
            head: 0,
            q_position: 5,
            used_positions: vec![0, 1, 2, 3, 4, 5],
            weights: vec![1.0 / 6.0; 6],
        };
        let report = aggregate_weight_records(std::slice::from_ref(&record), 3);
        assert_eq!(report.distance_mass.len(), 6);
        for &m in &report.distance_mass {
            assert!((m - 1.0 / 6.0).abs() < 1e-15);
        }
        for &m in &report.column_offset_mass {
            assert!((m - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn each_captured_record_sums_to_one_per_step() {
        let run = capture_run();
        let records = run.weight_records.as_ref().unwrap();
        assert!(!records.is_empty());
        for r in records {
            let total: f64 = r.weights.iter().sum();
            assert!((total - 1.0).abs() < 1e-9, "step {} layer {} head {}", r.step, r.layer, r.head);
        }
    }

    #[test]
    fn histograms_match_direct_recomputation_and_sum_to_one() {
        let run = capture_run();
        let report = locality_report(&run, 4).unwrap();
        let records = run.weight_records.as_ref().unwrap();

        let mut by_distance = vec![0.0; report.distance_mass.len()];
        let mut by_offset = vec![0.0; 4];
        for r in records {
            for (&pos, &w) in r.used_positions.iter().zip(&r.weights) {
                by_distance[r.q_position - pos] += w / records.len() as f64;
                by_offset[(r.q_position - pos) % 4] += w / records.len() as f64;
            }
        }
        for (a, b) in report.distance_mass.iter().zip(&by_distance) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in report.column_offset_mass.iter().zip(&by_offset) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((report.distance_mass.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((report.column_offset_mass.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn missing_capture_is_an_explicit_error() {
        let model = Model::new(ModelConfig {
            vocab_size: 32,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            seq_capacity: 32,
            ..Default::default()
        })
        .unwrap();
        let run = generate(
            &model,
            &[0],
            5,
            &CachePolicy::dense(32),
            0,
            &RunOptions::default(),
        )
        .unwrap();
        assert!(matches!(
            locality_report(&run, 24),
            Err(HarnessError::MissingCapture)
        ));
    }

    #[test]
    fn run_locality_requires_capture_flag_and_writes_histogram() {
        let mut spec = ExperimentSpec {
            model: ModelConfig {
                vocab_size: 32,
                d_model: 16,
                n_heads: 2,
                n_layers: 1,
                seq_capacity: 64,
                ..Default::default()
            },
            policies: vec![NamedPolicy {
                name: "dense".into(),
                policy: CachePolicy::dense(64),
            }],
            run_length: 30,
            row_width: 4,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            run_locality(&spec, dir.path()),
            Err(HarnessError::MissingCapture)
        ));

        spec.capture_weights = true;
        let report = run_locality(&spec, dir.path()).unwrap();
        assert_eq!(report.step_count, spec.generated_len());
        let text = std::fs::read_to_string(dir.path().join("histogram.csv")).unwrap();
        assert!(text.starts_with("# adsa-histogram v1\nkind,bucket,mass\n"));
        assert_eq!(
            text.lines().count(),
            2 + report.distance_mass.len() + report.column_offset_mass.len()
        );
        assert!(dir.path().join("steps.csv").exists());
        assert!(dir.path().join("summary.json").exists());
    }
}
