//! Region ablation: the full three-region policy versus single-region
//! removals, plus a multi-seed statistic for which removal diverges most.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::compare::{policy_report, run_grid, PolicyReport};
use super::output::{ensure_dir, steps_csv, summary_json, write_file};
use super::{hamming_fraction, ExperimentSpec, HarnessError, NamedPolicy};
use crate::cache::{CachePolicy, Variant};
use crate::model::{generate, GenerationRun, Model, RunOptions};

/// Hamming fractions vs dense for the three removal arms under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDivergence {
    pub seed: u64,
    pub prefix_off: f64,
    pub select_off: f64,
    pub local_off: f64,
    /// Arm with the strictly largest divergence, or `"tie"`.
    pub largest: String,
}

/// Which removal hurts most, across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedDivergence>,
    /// Fraction of seeds where removing the local region diverged
    /// strictly more than either other removal.
    pub local_off_largest_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub base: NamedPolicy,
    /// dense, full, prefix_off, select_off, local_off — in that order.
    pub rows: Vec<PolicyReport>,
    pub direction: DirectionReport,
}

/// Builds the four ablation arms from a base policy: the policy as given
/// plus one arm per region zeroed out. Capacity is left unchanged.
fn ablation_arms(base: &CachePolicy) -> Result<Vec<NamedPolicy>, HarnessError> {
    let mk = |name: &str, policy: CachePolicy| -> Result<NamedPolicy, HarnessError> {
        policy.validate()?;
        Ok(NamedPolicy {
            name: name.into(),
            policy,
        })
    };
    Ok(vec![
        mk("full", base.clone())?,
        mk(
            "prefix_off",
            CachePolicy {
                n_prefix: 0,
                ..base.clone()
            },
        )?,
        mk(
            "select_off",
            CachePolicy {
                k_select: 0,
                ..base.clone()
            },
        )?,
        mk(
            "local_off",
            CachePolicy {
                m_local: 0,
                ..base.clone()
            },
        )?,
    ])
}

/// Ablates the first adsa policy in the grid against a full-length dense
/// baseline and writes `steps.csv` and `summary.json` into `out_dir`.
pub fn run_ablation(spec: &ExperimentSpec, out_dir: &Path) -> Result<AblationReport, HarnessError> {
    spec.validate()?;
    if spec.seeds.is_empty() {
        return Err(HarnessError::BadSpec(
            "ablation needs a nonempty seeds list".into(),
        ));
    }
    let base = spec
        .policies
        .iter()
        .find(|np| np.policy.variant == Variant::Adsa)
        .ok_or_else(|| HarnessError::BadSpec("ablation requires an adsa policy in the grid".into()))?
        .clone();
    ensure_dir(out_dir)?;
    let model = Model::new(spec.model.clone())?;
    let mut grid = vec![NamedPolicy {
        name: "dense".into(),
        policy: CachePolicy::dense(spec.run_length),
    }];
    grid.extend(ablation_arms(&base.policy)?);

    let runs = run_grid(&model, spec, &grid)?;
    let rows: Vec<PolicyReport> = grid
        .iter()
        .zip(&runs)
        .map(|(np, run)| policy_report(&np.name, run, &runs[0]))
        .collect();

    let direction = direction_report(&model, spec, &grid)?;
    let report = AblationReport {
        base,
        rows,
        direction,
    };

    let named: Vec<(&str, &GenerationRun)> = grid
        .iter()
        .map(|np| np.name.as_str())
        .zip(runs.iter())
        .collect();
    write_file(&out_dir.join("steps.csv"), &steps_csv(&named))?;
    write_file(
        &out_dir.join("summary.json"),
        &summary_json("ablate", spec, &report),
    )?;
    Ok(report)
}

/// For each seed, regenerates dense and the three removal arms and scores
/// each arm by its token hamming fraction vs dense.
fn direction_report(
    model: &Model,
    spec: &ExperimentSpec,
    grid: &[NamedPolicy],
) -> Result<DirectionReport, HarnessError> {
    let options = RunOptions {
        sampling: spec.sampling,
        ..Default::default()
    };
    let gen_len = spec.generated_len();
    let mut per_seed = Vec::with_capacity(spec.seeds.len());
    let mut local_wins = 0usize;
    for &seed in &spec.seeds {
        let dense = generate(model, &spec.prompt, gen_len, &grid[0].policy, seed, &options)?;
        let mut fractions = [0.0f64; 3];
        for (slot, arm) in grid[2..5].iter().enumerate() {
            let run = generate(model, &spec.prompt, gen_len, &arm.policy, seed, &options)?;
            fractions[slot] = hamming_fraction(&run.tokens, &dense.tokens);
        }
        let [p, s, l] = fractions;
        let largest = if l > p && l > s {
            "local_off"
        } else if p > s && p > l {
            "prefix_off"
        } else if s > p && s > l {
            "select_off"
        } else {
            "tie"
        };
        if largest == "local_off" {
            local_wins += 1;
        }
        per_seed.push(SeedDivergence {
            seed,
            prefix_off: p,
            select_off: s,
            local_off: l,
            largest: largest.into(),
        });
    }
    Ok(DirectionReport {
        seeds: spec.seeds.clone(),
        per_seed,
        local_off_largest_fraction: local_wins as f64 / spec.seeds.len() as f64,
    })
}
