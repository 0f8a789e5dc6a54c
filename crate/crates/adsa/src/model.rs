//! A deterministic toy decoder-only transformer that drives the cache
//! through real autoregressive decoding under any [`CachePolicy`].
//!
//! The model is intentionally small and untrained: it exists to exercise
//! the cache mechanics (filtering, eviction, accounting) with realistic
//! decode loops, not to produce meaningful text or images. Everything is
//! reproducible from two seeds — the weight seed in [`ModelConfig`] and a
//! per-run sample seed — down to byte-identical serialized runs.
//!
//! # Weight scheme
//!
//! Weights are drawn from a single [`Lcg`] stream seeded with
//! `config.seed`, so any implementation in any language can reproduce
//! them. Draw order, with every matrix row-major (`w[out * d_in + in]`,
//! applied as `y[out] = Σ_in w[out * d_in + in] · x[in]`):
//!
//! 1. `embedding`: `vocab_size × d_model`, standard Gaussians (scale 1);
//! 2. per layer, in layer order: `wq`, `wk`, `wv`, `wo` (each
//!    `d_model × d_model`, Gaussian · 1/√d_model), then `w1`
//!    (`d_ff × d_model`, Gaussian · 1/√d_model) and `w2`
//!    (`d_model × d_ff`, Gaussian · 1/√d_ff), with `d_ff = 4·d_model`;
//! 3. `unembed`: `vocab_size × d_model`, Gaussian · 1/√d_model.
//!
//! Gaussians come from Box-Muller on consecutive LCG uniforms: `u1, u2`
//! drawn in that order, result `√(−2 ln u1) · cos(2π u2)`, redrawing both
//! if `u1 = 0`. Each forward block is pre-norm RMSNorm (unit gain,
//! epsilon 1e-6) with ReLU in the MLP.
//!
//! # Decode loop
//!
//! Each fed token is embedded, and per layer each head rotates its query
//! and key at the token's absolute position, inserts the key/value into
//! that head's cache (evicting if full), then attends over the cache's
//! effective context — so a token always sees itself, plus whatever its
//! policy retains of the past. Sampling draws exactly one uniform per
//! generated token in categorical mode (even for forced tokens, keeping
//! seed streams aligned) and none in greedy mode.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{attend, attend_over, AttentionStep};
use crate::cache::{Archive, CacheError, CachePolicy, KvCache, KvEntry, MemoryModel, Variant};
use crate::math::{dot, rope_rotate, softmax};

/// Deterministic 64-bit linear congruential generator (Knuth's MMIX
/// constants). Stream layout is part of the reproducibility contract.
#[derive(Debug, Clone)]
pub struct Lcg {
    state: u64,
}

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Lcg { state: seed }
    }

    fn next_state(&mut self) -> u64 {
        self.state = self
            .state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        self.state
    }

    /// Uniform in [0, 1): the top 53 bits of the next state.
    pub fn uniform(&mut self) -> f64 {
        (self.next_state() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard Gaussian via Box-Muller (cosine branch); consumes two
    /// uniforms, redrawing both on the measure-zero u1 = 0.
    pub fn gaussian(&mut self) -> f64 {
        loop {
            let u1 = self.uniform();
            let u2 = self.uniform();
            if u1 > 0.0 {
                return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            }
        }
    }
}

/// Model shape, weight seed, and accounting parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Maximum absolute position the model will ever process.
    pub seq_capacity: usize,
    pub theta_base: f64,
    /// Weight-initialization seed.
    pub seed: u64,
    /// Bytes per cached scalar in the accounting model (2 ≈ fp16-style
    /// storage). Arithmetic only; values are held as f64 in memory.
    pub kv_bytes_per_scalar: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            seq_capacity: 1024,
            theta_base: 10_000.0,
            seed: 0,
            kv_bytes_per_scalar: 2,
        }
    }
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// The accounting view of this config's cache storage.
    pub fn memory_model(&self) -> MemoryModel {
        MemoryModel {
            d_head: self.d_head(),
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            bytes_per_scalar: self.kv_bytes_per_scalar,
        }
    }

    /// Total weight scalars, for model-side byte accounting.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 2 * self.d_ff() * d;
        2 * self.vocab_size * d + self.n_layers * per_layer
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.vocab_size < 2 {
            return fail(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.d_head().is_multiple_of(2) {
            return fail(format!(
                "head dimension {} must be even for rotary encoding",
                self.d_head()
            ));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be positive".into());
        }
        if self.seq_capacity == 0 {
            return fail("seq_capacity must be positive".into());
        }
        if !(self.theta_base > 0.0 && self.theta_base.is_finite()) {
            return fail(format!("theta_base {} must be positive", self.theta_base));
        }
        if self.kv_bytes_per_scalar == 0 {
            return fail("kv_bytes_per_scalar must be positive".into());
        }
        Ok(())
    }
}

/// One layer's projection matrices, all row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
}

/// All model weights in draw order.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embedding: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    pub unembed: Vec<f64>,
}

/// Errors from model construction, decoding, and weight files.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token {token} out of vocabulary range {vocab_size}")]
    VocabOverflow { token: usize, vocab_size: usize },
    #[error("run needs {needed} positions but seq_capacity is {capacity}")]
    CapacityExceeded { needed: usize, capacity: usize },
    #[error("fixed_fraction must lie strictly between 0 and 1, got {0}")]
    FractionOutOfRange(f64),
    #[error("prompt must be nonempty")]
    EmptyPrompt,
    #[error("seed list must be nonempty")]
    NoSeeds,
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("weight file: {0}")]
    BadWeightFile(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// An immutable, initialized model; shareable across concurrent runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    weights: Weights,
}

impl Model {
    /// Initializes weights from `config.seed` per the documented scheme.
    pub fn new(config: ModelConfig) -> Result<Model, ModelError> {
        config.validate()?;
        let mut rng = Lcg::new(config.seed);
        let d = config.d_model;
        let d_ff = config.d_ff();
        let mut draw = |count: usize, scale: f64| -> Vec<f64> {
            (0..count).map(|_| rng.gaussian() * scale).collect()
        };

        let embedding = draw(config.vocab_size * d, 1.0);
        let proj_scale = 1.0 / (d as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                wq: draw(d * d, proj_scale),
                wk: draw(d * d, proj_scale),
                wv: draw(d * d, proj_scale),
                wo: draw(d * d, proj_scale),
                w1: draw(d_ff * d, proj_scale),
                w2: draw(d * d_ff, 1.0 / (d_ff as f64).sqrt()),
            })
            .collect();
        let unembed = draw(config.vocab_size * d, proj_scale);

        Ok(Model {
            config,
            weights: Weights {
                embedding,
                layers,
                unembed,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }
}

fn matvec(w: &[f64], x: &[f64], d_out: usize, d_in: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), d_out * d_in);
    debug_assert_eq!(x.len(), d_in);
    (0..d_out)
        .map(|o| dot(&w[o * d_in..(o + 1) * d_in], x))
        .collect()
}

/// Unit-gain RMS normalization with epsilon 1e-6.
fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let scale = 1.0 / (ms + 1e-6).sqrt();
    x.iter().map(|v| v * scale).collect()
}

/// One captured attention read, for locality analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    /// Index among generated tokens (prompt feeds are not recorded).
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub q_position: usize,
    pub used_positions: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Instrumentation from feeding one token.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    /// Eviction performed by the first layer's first head, if any.
    pub evicted_position: Option<usize>,
    pub context_min: usize,
    pub context_mean: f64,
    pub context_max: usize,
    pub occupancy: usize,
    /// One record per (layer, head) when capture was requested.
    pub weight_records: Vec<WeightRecord>,
}

/// Mutable decode state: one cache per (layer, head) plus the position
/// counter.
pub struct Session<'m> {
    model: &'m Model,
    policy: CachePolicy,
    caches: Vec<Vec<KvCache>>,
    position: usize,
}

impl<'m> Session<'m> {
    /// Panics on an invalid policy; validate user input first.
    pub fn new(model: &'m Model, policy: CachePolicy) -> Session<'m> {
        let caches = (0..model.config.n_layers)
            .map(|_| {
                (0..model.config.n_heads)
                    .map(|_| KvCache::new(policy.clone()))
                    .collect()
            })
            .collect();
        Session {
            model,
            policy,
            caches,
            position: 0,
        }
    }

    /// Next absolute position to be fed.
    pub fn position(&self) -> usize {
        self.position
    }

    /// Per-cache occupancy (identical across layers and heads).
    pub fn occupancy(&self) -> usize {
        self.caches[0][0].occupancy()
    }

    pub fn cache(&self, layer: usize, head: usize) -> &KvCache {
        &self.caches[layer][head]
    }

    /// Feeds one token at the next position: embeds, runs every layer with
    /// cache insert + attention per head, and returns the final logits
    /// with per-step instrumentation.
    pub fn decode_step(&mut self, token: usize, capture: bool) -> Result<StepOutput, ModelError> {
        let config = &self.model.config;
        if token >= config.vocab_size {
            return Err(ModelError::VocabOverflow {
                token,
                vocab_size: config.vocab_size,
            });
        }
        if self.position >= config.seq_capacity {
            return Err(ModelError::CapacityExceeded {
                needed: self.position + 1,
                capacity: config.seq_capacity,
            });
        }
        let t = self.position;
        let d = config.d_model;
        let d_head = config.d_head();
        let shared = self.policy.shared_selection;

        let mut x = self.model.weights.embedding[token * d..(token + 1) * d].to_vec();
        let mut evicted_first: Option<usize> = None;
        let mut context_lens: Vec<usize> = Vec::with_capacity(config.n_layers * config.n_heads);
        let mut weight_records = Vec::new();

        // Shared-selection state, decided once per step by layer 0 head 0.
        let mut shared_eviction: Option<Option<usize>> = None;
        let mut shared_selected: Option<Vec<usize>> = None;

        for (layer, lw) in self.model.weights.layers.iter().enumerate() {
            let h = rms_norm(&x);
            let q_full = matvec(&lw.wq, &h, d, d);
            let k_full = matvec(&lw.wk, &h, d, d);
            let v_full = matvec(&lw.wv, &h, d, d);

            let mut attn_out = vec![0.0; d];
            for head in 0..config.n_heads {
                let slice = head * d_head..(head + 1) * d_head;
                let q = rope_rotate(&q_full[slice.clone()], t, config.theta_base);
                let k = rope_rotate(&k_full[slice.clone()], t, config.theta_base);
                let entry = KvEntry {
                    position: t,
                    step: t,
                    key: k,
                    value: v_full[slice].to_vec(),
                };

                let cache = &mut self.caches[layer][head];
                let evicted = if shared {
                    let decision = match shared_eviction {
                        Some(d) => d,
                        None => {
                            let d = cache.evict_candidate()?;
                            shared_eviction = Some(d);
                            d
                        }
                    };
                    cache.insert_evicting(entry, decision);
                    decision
                } else {
                    cache.insert_with_eviction(entry)?
                };
                if layer == 0 && head == 0 {
                    evicted_first = evicted;
                }

                let cache = &self.caches[layer][head];
                let step: AttentionStep = if shared && self.policy.variant == Variant::Adsa {
                    let selected = match &shared_selected {
                        Some(s) => s.clone(),
                        None => {
                            let s = cache.selected_previous_positions();
                            shared_selected = Some(s.clone());
                            s
                        }
                    };
                    attend_over(&q, t, &cache.effective_context_from(&selected), capture)
                } else {
                    attend(&q, t, cache, capture)
                };

                context_lens.push(step.context_len);
                if capture {
                    weight_records.push(WeightRecord {
                        step: 0, // rewritten by the generate loop
                        layer,
                        head,
                        q_position: t,
                        used_positions: step.used_positions.clone(),
                        weights: step.weights.clone().unwrap(),
                    });
                }
                attn_out[head * d_head..(head + 1) * d_head].copy_from_slice(&step.output);
            }

            let projected = matvec(&lw.wo, &attn_out, d, d);
            for (xi, pi) in x.iter_mut().zip(&projected) {
                *xi += pi;
            }

            let h2 = rms_norm(&x);
            let mut hidden = matvec(&lw.w1, &h2, config.d_ff(), d);
            for v in hidden.iter_mut() {
                *v = v.max(0.0);
            }
            let mlp = matvec(&lw.w2, &hidden, d, config.d_ff());
            for (xi, mi) in x.iter_mut().zip(&mlp) {
                *xi += mi;
            }
        }

        let h_final = rms_norm(&x);
        let logits = matvec(&self.model.weights.unembed, &h_final, config.vocab_size, d);

        self.position += 1;
        let occupancy = self.occupancy();
        let total: usize = context_lens.iter().sum();
        Ok(StepOutput {
            logits,
            evicted_position: evicted_first,
            context_min: context_lens.iter().copied().min().unwrap(),
            context_mean: total as f64 / context_lens.len() as f64,
            context_max: context_lens.iter().copied().max().unwrap(),
            occupancy,
            weight_records,
        })
    }
}

/// Token-selection rule applied to each step's logits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Sampling {
    /// Argmax, ties to the smallest token id. Draws no randomness.
    #[default]
    Greedy,
    /// Softmax(logits / temperature) sampled with one uniform per token.
    Categorical { temperature: f64 },
}

fn sample_token(logits: &[f64], sampling: Sampling, rng: &mut Lcg) -> usize {
    match sampling {
        Sampling::Greedy => {
            let mut best = 0;
            for (i, l) in logits.iter().enumerate() {
                if *l > logits[best] {
                    best = i;
                }
            }
            best
        }
        Sampling::Categorical { temperature } => {
            assert!(
                temperature > 0.0 && temperature.is_finite(),
                "temperature must be positive and finite"
            );
            let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            let probs = softmax(&scaled);
            let u = rng.uniform();
            let mut cum = 0.0;
            for (i, p) in probs.iter().enumerate() {
                cum += p;
                if u < cum {
                    return i;
                }
            }
            probs.len() - 1
        }
    }
}

/// Per-generated-token record of what the cache looked like.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    /// Index among generated tokens.
    pub step: usize,
    /// Absolute position of the generated token.
    pub position: usize,
    pub sampled_token: usize,
    /// Context lengths across (layer, head) attends at this step.
    pub context_min: usize,
    pub context_mean: f64,
    pub context_max: usize,
    pub cache_occupancy: usize,
    /// Accounted cache bytes at this step (exact integer model).
    pub accounted_bytes: u64,
    /// Position evicted by the first layer's first head, if it was full.
    pub evicted_position: Option<usize>,
}

/// Everything a single generation produced, serializable for golden runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRun {
    pub policy: CachePolicy,
    pub model_seed: u64,
    pub sample_seed: u64,
    pub sampling: Sampling,
    pub prompt: Vec<usize>,
    /// Generated tokens, exactly the requested length.
    pub tokens: Vec<usize>,
    /// One record per generated token.
    pub trace: Vec<DecodeTrace>,
    /// Host-side record of every token in the run (prompt + generated).
    pub archive: Archive,
    /// Per-step logits the matching token was sampled from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<Vec<f64>>>,
    /// Captured attention weights for locality analysis.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_records: Option<Vec<WeightRecord>>,
}

/// Knobs for [`generate`] beyond the core (prompt, length, policy, seed).
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub sampling: Sampling,
    /// Keep each step's pre-sampling logits in the run.
    pub capture_logits: bool,
    /// Keep per-(layer, head) attention weights in the run.
    pub capture_weights: bool,
}

/// Generates `length` tokens after `prompt` under `policy`.
///
/// Every fed token (prompt and generated, including the final one) passes
/// through the cache, so the trace covers the whole run; every token is
/// also archived. The run is fully determined by (model seed, sample
/// seed, policy, options).
pub fn generate(
    model: &Model,
    prompt: &[usize],
    length: usize,
    policy: &CachePolicy,
    sample_seed: u64,
    options: &RunOptions,
) -> Result<GenerationRun, ModelError> {
    generate_forced(model, prompt, length, policy, sample_seed, options, &[])
}

/// [`generate`] with the first `forced.len()` generated tokens overridden.
/// Forced categorical steps still consume their uniform draw, so seed
/// streams stay aligned with unforced runs.
fn generate_forced(
    model: &Model,
    prompt: &[usize],
    length: usize,
    policy: &CachePolicy,
    sample_seed: u64,
    options: &RunOptions,
    forced: &[usize],
) -> Result<GenerationRun, ModelError> {
    if prompt.is_empty() {
        return Err(ModelError::EmptyPrompt);
    }
    let config = model.config();
    let needed = prompt.len() + length;
    if needed > config.seq_capacity {
        return Err(ModelError::CapacityExceeded {
            needed,
            capacity: config.seq_capacity,
        });
    }
    assert!(forced.len() <= length, "more forced tokens than run length");

    let accounting = config.memory_model();
    let mut session = Session::new(model, policy.clone());
    let mut rng = Lcg::new(sample_seed);
    let mut archive = Archive::new();
    let mut tokens = Vec::with_capacity(length);
    let mut trace = Vec::with_capacity(length);
    let mut logits_log = options.capture_logits.then(Vec::new);
    let mut weight_log = options.capture_weights.then(Vec::new);

    let mut last_logits = Vec::new();
    for (i, &tok) in prompt.iter().enumerate() {
        archive.append(i, tok);
        last_logits = session.decode_step(tok, false)?.logits;
    }

    for step in 0..length {
        let tok = if step < forced.len() {
            if let Sampling::Categorical { .. } = options.sampling {
                let _ = rng.uniform();
            }
            forced[step]
        } else {
            sample_token(&last_logits, options.sampling, &mut rng)
        };
        if let Some(log) = logits_log.as_mut() {
            log.push(last_logits.clone());
        }

        let position = prompt.len() + step;
        archive.append(position, tok);
        let mut out = session.decode_step(tok, options.capture_weights)?;
        if let Some(log) = weight_log.as_mut() {
            for record in out.weight_records.iter_mut() {
                record.step = step;
            }
            log.append(&mut out.weight_records);
        }
        trace.push(DecodeTrace {
            step,
            position,
            sampled_token: tok,
            context_min: out.context_min,
            context_mean: out.context_mean,
            context_max: out.context_max,
            cache_occupancy: out.occupancy,
            accounted_bytes: accounting.footprint(out.occupancy),
            evicted_position: out.evicted_position,
        });
        tokens.push(tok);
        last_logits = out.logits;
    }

    Ok(GenerationRun {
        policy: policy.clone(),
        model_seed: config.seed,
        sample_seed,
        sampling: options.sampling,
        prompt: prompt.to_vec(),
        tokens,
        trace,
        archive,
        logits: logits_log,
        weight_records: weight_log,
    })
}

/// Runs `generate` once per seed with the first
/// `ceil(fixed_fraction · length)` tokens pinned to a reference run
/// (sampled with `seeds[0]`), so later divergence is attributable to the
/// unpinned tail. The reference seed's pinned run reproduces the
/// reference exactly.
pub fn fix_prefix_generate(
    model: &Model,
    prompt: &[usize],
    length: usize,
    policy: &CachePolicy,
    fixed_fraction: f64,
    seeds: &[u64],
    options: &RunOptions,
) -> Result<Vec<GenerationRun>, ModelError> {
    if !(fixed_fraction > 0.0 && fixed_fraction < 1.0) {
        return Err(ModelError::FractionOutOfRange(fixed_fraction));
    }
    if seeds.is_empty() {
        return Err(ModelError::NoSeeds);
    }
    let head_len = ((fixed_fraction * length as f64).ceil() as usize).min(length);
    let reference = generate(model, prompt, length, policy, seeds[0], options)?;
    let head = reference.tokens[..head_len].to_vec();
    seeds
        .iter()
        .map(|&seed| generate_forced(model, prompt, length, policy, seed, options, &head))
        .collect()
}

// ---------------------------------------------------------------------
// Weight files: little-endian binary with a JSON header.
//
// Layout: u32 LE header length, then that many bytes of UTF-8 JSON
// (format name, version, full ModelConfig, section list with shapes in
// draw order), then every section's f64 values little-endian, row-major,
// concatenated in header order.
// ---------------------------------------------------------------------

const WEIGHT_FORMAT: &str = "adsa-weights";
const WEIGHT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct WeightHeader {
    format: String,
    version: u32,
    config: ModelConfig,
    sections: Vec<WeightSection>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightSection {
    name: String,
    rows: usize,
    cols: usize,
}

impl Model {
    fn sections(config: &ModelConfig) -> Vec<WeightSection> {
        let d = config.d_model;
        let mut sections = vec![WeightSection {
            name: "embedding".into(),
            rows: config.vocab_size,
            cols: d,
        }];
        for layer in 0..config.n_layers {
            for (name, rows, cols) in [
                ("wq", d, d),
                ("wk", d, d),
                ("wv", d, d),
                ("wo", d, d),
                ("w1", config.d_ff(), d),
                ("w2", d, config.d_ff()),
            ] {
                sections.push(WeightSection {
                    name: format!("layers[{layer}].{name}"),
                    rows,
                    cols,
                });
            }
        }
        sections.push(WeightSection {
            name: "unembed".into(),
            rows: config.vocab_size,
            cols: d,
        });
        sections
    }

    fn section_values(&self) -> Vec<&[f64]> {
        let mut values: Vec<&[f64]> = vec![&self.weights.embedding];
        for lw in &self.weights.layers {
            values.extend([
                lw.wq.as_slice(),
                lw.wk.as_slice(),
                lw.wv.as_slice(),
                lw.wo.as_slice(),
                lw.w1.as_slice(),
                lw.w2.as_slice(),
            ]);
        }
        values.push(&self.weights.unembed);
        values
    }

    /// Writes the documented weight-file format.
    pub fn save_weights(&self, path: &Path) -> Result<(), ModelError> {
        let header = WeightHeader {
            format: WEIGHT_FORMAT.into(),
            version: WEIGHT_VERSION,
            config: self.config.clone(),
            sections: Model::sections(&self.config),
        };
        let header_bytes = serde_json::to_vec(&header).expect("header serialization");
        let mut file = io::BufWriter::new(fs::File::create(path)?);
        file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        for section in self.section_values() {
            for v in section {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        file.flush()?;
        Ok(())
    }

    /// Loads a weight file; shapes must match its embedded config.
    pub fn load_weights(path: &Path) -> Result<Model, ModelError> {
        let bad = |msg: String| ModelError::BadWeightFile(msg);
        let mut file = io::BufReader::new(fs::File::open(path)?);
        let mut len_bytes = [0u8; 4];
        file.read_exact(&mut len_bytes)?;
        let mut header_bytes = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
        file.read_exact(&mut header_bytes)?;
        let header: WeightHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| bad(format!("unparsable header: {e}")))?;
        if header.format != WEIGHT_FORMAT {
            return Err(bad(format!("unknown format {:?}", header.format)));
        }
        if header.version != WEIGHT_VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        header.config.validate()?;
        let expected = Model::sections(&header.config);
        if header.sections.len() != expected.len()
            || header
                .sections
                .iter()
                .zip(&expected)
                .any(|(a, b)| a.name != b.name || a.rows != b.rows || a.cols != b.cols)
        {
            return Err(bad("section list does not match config shapes".into()));
        }

        let mut read_matrix = |rows: usize, cols: usize| -> Result<Vec<f64>, ModelError> {
            let mut buf = vec![0u8; rows * cols * 8];
            file.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let config = header.config;
        let d = config.d_model;
        let embedding = read_matrix(config.vocab_size, d)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                wq: read_matrix(d, d)?,
                wk: read_matrix(d, d)?,
                wv: read_matrix(d, d)?,
                wo: read_matrix(d, d)?,
                w1: read_matrix(config.d_ff(), d)?,
                w2: read_matrix(d, config.d_ff())?,
            });
        }
        let unembed = read_matrix(config.vocab_size, d)?;
        Ok(Model {
            config,
            weights: Weights {
                embedding,
                layers,
                unembed,
            },
        })
    }
}
