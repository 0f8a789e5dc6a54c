//! Adaptive dynamic sparse attention (ADSA): a three-region KV-cache with
//! value-similarity TopK filtering and redundancy-based eviction, plus a
//! deterministic toy autoregressive transformer for executing and comparing
//! dense, window, window-with-prefix, and ADSA attention regimes.
//!
//! Layering, bottom up:
//!
//! * [`math`] — dot/softmax/cosine/RoPE kernels and single-query attention.
//! * [`cache`] — the cache itself: region partition, similarity statistics,
//!   TopK selection, eviction-on-insert, archive offload, and an exact
//!   byte-accounting model.
//! * [`attention`] — the four attention regimes as instrumented single-step
//!   reads over a cache.
//! * [`model`] — a seeded toy decoder-only transformer that drives the cache
//!   through realistic autoregressive decoding.
//! * [`harness`] — experiment runners (compare, ablate, locality, memory)
//!   behind the `adsa` command-line binary.
//!
//! Everything is double precision and deterministic: the same seed and
//! configuration reproduce byte-identical outputs.

pub mod attention;
pub mod cache;
pub mod harness;
pub mod math;
pub mod model;
