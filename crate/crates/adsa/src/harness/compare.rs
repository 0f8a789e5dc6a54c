//! Variant comparison: run every policy in the grid with shared seeds and
//! report context/memory peaks plus divergence from the dense baseline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::output::{ensure_dir, steps_csv, summary_json, write_file};
use super::{
    first_divergence, hamming_fraction, logit_deviation, ExperimentSpec, FixedPrefixSpec,
    HarnessError, NamedPolicy,
};
use crate::cache::CachePolicy;
use crate::model::{fix_prefix_generate, generate, GenerationRun, Model, RunOptions};

/// Per-policy outcome of a comparison run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub name: String,
    pub policy: CachePolicy,
    pub peak_context: usize,
    pub mean_context: f64,
    pub peak_occupancy: usize,
    pub peak_accounted_bytes: u64,
    /// Percent reduction vs the baseline (0 for the baseline row).
    pub context_reduction_pct: f64,
    pub bytes_reduction_pct: f64,
    /// First generated step whose token differs from the baseline.
    pub first_divergence_step: Option<usize>,
    /// Fraction of generated tokens differing from the baseline.
    pub hamming_fraction: f64,
    /// Number of leading steps whose logits were compared (inputs still
    /// identical in both runs).
    pub coinciding_steps: usize,
    /// Max |Δlogit| vs the baseline over those steps. Zero whenever the
    /// sparse run has not yet filtered or evicted anything, because the
    /// arithmetic is then bit-identical.
    pub logit_max_abs_dev: f64,
}

/// Outcome of the pinned-head experiment: mean pairwise token overlap
/// among runs that copy a shared head vs runs sampled freely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPrefixReport {
    pub fraction: f64,
    pub head_len: usize,
    pub seeds: Vec<u64>,
    pub pairwise_overlap_pinned: f64,
    pub pairwise_overlap_free: f64,
    /// Overlap restricted to positions past the pinned head.
    pub tail_overlap_pinned: f64,
    pub tail_overlap_free: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub run_length: usize,
    pub generated: usize,
    pub baseline: String,
    pub rows: Vec<PolicyReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_prefix: Option<FixedPrefixReport>,
}

/// Generates one run per grid entry with the shared sample seed, capturing
/// logits for the divergence metrics.
pub(crate) fn run_grid(
    model: &Model,
    spec: &ExperimentSpec,
    grid: &[NamedPolicy],
) -> Result<Vec<GenerationRun>, HarnessError> {
    let options = RunOptions {
        sampling: spec.sampling,
        capture_logits: true,
        capture_weights: false,
    };
    grid.iter()
        .map(|np| {
            generate(
                model,
                &spec.prompt,
                spec.generated_len(),
                &np.policy,
                spec.sample_seed,
                &options,
            )
            .map_err(Into::into)
        })
        .collect()
}

pub(crate) fn policy_report(
    name: &str,
    run: &GenerationRun,
    baseline: &GenerationRun,
) -> PolicyReport {
    let peak = |f: fn(&crate::model::DecodeTrace) -> usize, r: &GenerationRun| {
        r.trace.iter().map(f).max().expect("nonempty trace")
    };
    let peak_context = peak(|t| t.context_max, run);
    let peak_occupancy = peak(|t| t.cache_occupancy, run);
    let peak_bytes = run.trace.iter().map(|t| t.accounted_bytes).max().unwrap();
    let base_peak_context = peak(|t| t.context_max, baseline);
    let base_peak_bytes = baseline.trace.iter().map(|t| t.accounted_bytes).max().unwrap();
    let mean_context =
        run.trace.iter().map(|t| t.context_mean).sum::<f64>() / run.trace.len() as f64;
    let (coinciding_steps, logit_max_abs_dev) = logit_deviation(run, baseline);
    PolicyReport {
        name: name.into(),
        policy: run.policy.clone(),
        peak_context,
        mean_context,
        peak_occupancy,
        peak_accounted_bytes: peak_bytes,
        context_reduction_pct: 100.0 * (1.0 - peak_context as f64 / base_peak_context as f64),
        bytes_reduction_pct: 100.0 * (1.0 - peak_bytes as f64 / base_peak_bytes as f64),
        first_divergence_step: first_divergence(&run.tokens, &baseline.tokens),
        hamming_fraction: hamming_fraction(&run.tokens, &baseline.tokens),
        coinciding_steps,
        logit_max_abs_dev,
    }
}

/// Runs the full policy grid (prepending a dense baseline if the grid has
/// none) and writes `steps.csv` and `summary.json` into `out_dir`.
pub fn run_compare(spec: &ExperimentSpec, out_dir: &Path) -> Result<ComparisonReport, HarnessError> {
    spec.validate()?;
    ensure_dir(out_dir)?;
    let model = Model::new(spec.model.clone())?;
    let (grid, baseline_idx) = spec.grid_with_baseline();
    let runs = run_grid(&model, spec, &grid)?;
    let baseline = &runs[baseline_idx];
    let rows = grid
        .iter()
        .zip(&runs)
        .map(|(np, run)| policy_report(&np.name, run, baseline))
        .collect();
    let fixed_prefix = match &spec.fixed_prefix {
        Some(fp) => Some(fixed_prefix_report(&model, spec, &grid[baseline_idx], fp)?),
        None => None,
    };
    let report = ComparisonReport {
        run_length: spec.run_length,
        generated: spec.generated_len(),
        baseline: grid[baseline_idx].name.clone(),
        rows,
        fixed_prefix,
    };
    let named: Vec<(&str, &GenerationRun)> = grid
        .iter()
        .map(|np| np.name.as_str())
        .zip(runs.iter())
        .collect();
    write_file(&out_dir.join("steps.csv"), &steps_csv(&named))?;
    write_file(
        &out_dir.join("summary.json"),
        &summary_json("compare", spec, &report),
    )?;
    Ok(report)
}

/// Mean over unordered run pairs of the fraction of equal tokens from
/// position `from` on. An empty comparison window counts as full overlap.
fn mean_pairwise_overlap(seqs: &[&[usize]], from: usize) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..seqs.len() {
        for j in i + 1..seqs.len() {
            let len = seqs[i].len() - from;
            if len == 0 {
                total += 1.0;
            } else {
                let eq = seqs[i][from..]
                    .iter()
                    .zip(&seqs[j][from..])
                    .filter(|(a, b)| a == b)
                    .count();
                total += eq as f64 / len as f64;
            }
            pairs += 1;
        }
    }
    total / pairs as f64
}

fn fixed_prefix_report(
    model: &Model,
    spec: &ExperimentSpec,
    baseline: &NamedPolicy,
    fp: &FixedPrefixSpec,
) -> Result<FixedPrefixReport, HarnessError> {
    let options = RunOptions {
        sampling: spec.sampling,
        ..Default::default()
    };
    let gen_len = spec.generated_len();
    let pinned = fix_prefix_generate(
        model,
        &spec.prompt,
        gen_len,
        &baseline.policy,
        fp.fraction,
        &fp.seeds,
        &options,
    )?;
    let free: Vec<GenerationRun> = fp
        .seeds
        .iter()
        .map(|&s| generate(model, &spec.prompt, gen_len, &baseline.policy, s, &options))
        .collect::<Result<_, _>>()?;
    let head_len = ((fp.fraction * gen_len as f64).ceil() as usize).min(gen_len);
    let pinned_seqs: Vec<&[usize]> = pinned.iter().map(|r| r.tokens.as_slice()).collect();
    let free_seqs: Vec<&[usize]> = free.iter().map(|r| r.tokens.as_slice()).collect();
    Ok(FixedPrefixReport {
        fraction: fp.fraction,
        head_len,
        seeds: fp.seeds.clone(),
        pairwise_overlap_pinned: mean_pairwise_overlap(&pinned_seqs, 0),
        pairwise_overlap_free: mean_pairwise_overlap(&free_seqs, 0),
        tail_overlap_pinned: mean_pairwise_overlap(&pinned_seqs, head_len),
        tail_overlap_free: mean_pairwise_overlap(&free_seqs, head_len),
    })
}
