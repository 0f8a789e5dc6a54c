//! The four attention regimes (dense, window, window-prefix, adsa) as
//! uniform, instrumented single-step reads over a [`KvCache`].
//!
//! [`attend`] resolves the cache's effective context for its variant and
//! runs scaled dot-product attention for one query, reporting which
//! positions were read and (optionally) the softmax weights so experiment
//! harnesses can inspect attention mass. Multi-head models call this once
//! per head; head concatenation lives in the model layer.

use crate::cache::{KvCache, KvEntry};
use crate::math::{dot, softmax};

/// One instrumented attention read.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStep {
    pub output: Vec<f64>,
    /// Number of entries actually attended.
    pub context_len: usize,
    /// Softmax weights, one per used position; `None` unless captured.
    pub weights: Option<Vec<f64>>,
    /// Absolute positions read, strictly increasing.
    pub used_positions: Vec<usize>,
}

/// Attends `q` (already rotated at `q_position`) over the cache's
/// effective context.
///
/// Causality contract: no cached position may exceed `q_position`. The
/// entry *at* `q_position` is allowed and expected — the current token's
/// key/value are inserted before its query reads the cache, as in an
/// ordinary causal forward pass.
pub fn attend(q: &[f64], q_position: usize, cache: &KvCache, capture: bool) -> AttentionStep {
    attend_over(q, q_position, &cache.effective_context(), capture)
}

/// Attends over an explicitly resolved context — the shared-selection
/// path, where one cache's TopK decision is applied to its peers.
pub fn attend_over(
    q: &[f64],
    q_position: usize,
    context: &[&KvEntry],
    capture: bool,
) -> AttentionStep {
    assert!(!context.is_empty(), "attention over an empty effective context");
    let last = context.last().unwrap().position;
    assert!(
        last <= q_position,
        "causality violation: cached position {last} read by query at {q_position}"
    );

    let scale = 1.0 / (q.len() as f64).sqrt();
    let scores: Vec<f64> = context.iter().map(|e| dot(q, &e.key) * scale).collect();
    let weights = softmax(&scores);

    let d = context[0].value.len();
    let mut output = vec![0.0; d];
    for (w, e) in weights.iter().zip(context) {
        for (o, v) in output.iter_mut().zip(&e.value) {
            *o += w * v;
        }
    }

    AttentionStep {
        output,
        context_len: context.len(),
        used_positions: context.iter().map(|e| e.position).collect(),
        weights: capture.then_some(weights),
    }
}
