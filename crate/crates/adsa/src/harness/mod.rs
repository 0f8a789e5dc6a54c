//! Experiment harness behind the `adsa` binary: variant comparison,
//! region ablation, attention-locality histograms, and memory curves.
//!
//! Each runner consumes an [`ExperimentSpec`] (JSON-loadable, every field
//! defaulted), executes fully seeded runs, and writes `summary.json` plus
//! versioned CSV files into an output directory. All emitted bytes are a
//! pure function of the spec, so repeated runs are byte-identical.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CachePolicy, PolicyError, Variant};
use crate::model::{GenerationRun, ModelConfig, ModelError, Sampling};

mod ablate;
mod compare;
mod locality;
mod memory;
mod output;

pub use ablate::{run_ablation, AblationReport, DirectionReport, SeedDivergence};
pub use compare::{run_compare, ComparisonReport, FixedPrefixReport, PolicyReport};
pub use locality::{aggregate_weight_records, locality_report, run_locality, LocalityReport};
pub use memory::{memory_report, run_memory, MemoryCurve, MemoryPoint, MemoryReport};

/// A cache policy plus the label used for it in CSV rows and reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedPolicy {
    pub name: String,
    pub policy: CachePolicy,
}

/// Settings for the pinned-head divergence report run by `compare`: how
/// much of the generation to copy from a reference run, and which seeds
/// to branch with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPrefixSpec {
    pub fraction: f64,
    pub seeds: Vec<u64>,
}

/// One experiment: model shape, policy grid, run length, and report knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub model: ModelConfig,
    pub policies: Vec<NamedPolicy>,
    /// Total sequence length T, prompt included.
    pub run_length: usize,
    pub prompt: Vec<usize>,
    /// Sample seed for single-run reports.
    pub sample_seed: u64,
    /// Seed list for multi-seed statistics (ablation direction).
    pub seeds: Vec<u64>,
    pub sampling: Sampling,
    /// Capture per-head attention weights; `locality` requires this.
    pub capture_weights: bool,
    /// Raster row width for the same-column locality analysis.
    pub row_width: usize,
    /// Batch sweep for the memory report.
    pub batch_sizes: Vec<usize>,
    /// Optional pinned-head divergence report, run by `compare`.
    pub fixed_prefix: Option<FixedPrefixSpec>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            model: ModelConfig::default(),
            policies: vec![
                NamedPolicy {
                    name: "dense".into(),
                    policy: CachePolicy::dense(576),
                },
                NamedPolicy {
                    name: "adsa-256".into(),
                    policy: CachePolicy::adsa(32, 64, 160, 256),
                },
            ],
            run_length: 576,
            prompt: vec![0],
            sample_seed: 0,
            seeds: vec![1, 2, 3, 4, 5],
            sampling: Sampling::Categorical { temperature: 1.0 },
            capture_weights: false,
            row_width: 24,
            batch_sizes: vec![1, 2, 4, 8, 16, 32, 64],
            fixed_prefix: None,
        }
    }
}

impl ExperimentSpec {
    /// Tokens generated beyond the prompt.
    pub fn generated_len(&self) -> usize {
        self.run_length - self.prompt.len()
    }

    /// Loads a JSON spec; missing fields take their defaults.
    pub fn load(path: &Path) -> Result<ExperimentSpec, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| HarnessError::BadSpec(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::BadSpec(m));
        self.model.validate()?;
        if self.policies.is_empty() {
            return bad("policy grid is empty".into());
        }
        for np in &self.policies {
            if np.name.is_empty() {
                return bad("policy name is empty".into());
            }
            np.policy.validate()?;
        }
        for (i, a) in self.policies.iter().enumerate() {
            if self.policies[i + 1..].iter().any(|b| b.name == a.name) {
                return bad(format!("duplicate policy name {:?}", a.name));
            }
        }
        if self.prompt.is_empty() {
            return bad("prompt is empty".into());
        }
        if let Some(&t) = self.prompt.iter().find(|&&t| t >= self.model.vocab_size) {
            return bad(format!(
                "prompt token {t} exceeds vocab_size {}",
                self.model.vocab_size
            ));
        }
        if self.run_length <= self.prompt.len() {
            return bad(format!(
                "run_length {} must exceed prompt length {}",
                self.run_length,
                self.prompt.len()
            ));
        }
        if self.run_length > self.model.seq_capacity {
            return bad(format!(
                "run_length {} exceeds seq_capacity {}",
                self.run_length, self.model.seq_capacity
            ));
        }
        if let Sampling::Categorical { temperature } = self.sampling {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return bad(format!("temperature {temperature} must be positive and finite"));
            }
        }
        if self.row_width == 0 {
            return bad("row_width must be positive".into());
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return bad("batch_sizes must be nonempty and positive".into());
        }
        if let Some(fp) = &self.fixed_prefix {
            if !(fp.fraction > 0.0 && fp.fraction < 1.0) {
                return bad(format!(
                    "fixed_prefix fraction {} must lie strictly between 0 and 1",
                    fp.fraction
                ));
            }
            if fp.seeds.len() < 2 {
                return bad("fixed_prefix needs at least 2 seeds".into());
            }
        }
        Ok(())
    }

    /// Grid guaranteed to contain a dense baseline; returns it with the
    /// baseline's index. A dense policy already in the grid is used as-is;
    /// otherwise a full-length dense baseline is prepended.
    pub(crate) fn grid_with_baseline(&self) -> (Vec<NamedPolicy>, usize) {
        if let Some(i) = self
            .policies
            .iter()
            .position(|np| np.policy.variant == Variant::Dense)
        {
            (self.policies.clone(), i)
        } else {
            let mut grid = vec![NamedPolicy {
                name: "dense".into(),
                policy: CachePolicy::dense(self.run_length),
            }];
            grid.extend(self.policies.iter().cloned());
            (grid, 0)
        }
    }
}

/// Harness failures, each carrying enough context to render a useful
/// machine-readable error.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment spec: {0}")]
    BadSpec(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("run has no captured attention weights; enable capture_weights (--capture-weights)")]
    MissingCapture,
}

pub(crate) fn first_divergence(a: &[usize], b: &[usize]) -> Option<usize> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).position(|(x, y)| x != y)
}

pub(crate) fn hamming_fraction(a: &[usize], b: &[usize]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().max(1);
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / n as f64
}

/// Leading trace steps whose attention read the entire unfiltered,
/// unevicted history (context == occupancy == every position so far).
pub(crate) fn coincide_prefix(run: &GenerationRun) -> usize {
    run.trace
        .iter()
        .take_while(|t| {
            t.context_min == t.context_max
                && t.context_max == t.cache_occupancy
                && t.cache_occupancy == t.position + 1
        })
        .count()
}

/// Max |Δlogit| between two runs over steps whose inputs were still
/// identical in both; returns (steps compared, max deviation). The step
/// *after* the last coinciding feed is still comparable because its
/// logits predate the first filtered read.
pub(crate) fn logit_deviation(a: &GenerationRun, b: &GenerationRun) -> (usize, f64) {
    let la = a.logits.as_ref().expect("logits captured");
    let lb = b.logits.as_ref().expect("logits captured");
    let joint = coincide_prefix(a).min(coincide_prefix(b));
    let upto = (joint + 1).min(la.len()).min(lb.len());
    let mut dev = 0.0f64;
    for s in 0..upto {
        for (x, y) in la[s].iter().zip(&lb[s]) {
            dev = dev.max((x - y).abs());
        }
    }
    (upto, dev)
}
