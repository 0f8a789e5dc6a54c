//! Three-region KV-cache with value-similarity TopK filtering,
//! redundancy-based eviction, and host-side archive offload.
//!
//! Cache contents are split by position into a pinned `prefix`, a
//! filterable `previous` region, and a sliding `local` window. Reads go
//! through [`KvCache::effective_context`], which applies the active
//! variant: dense keeps everything, window keeps the local window,
//! window-prefix adds the pinned prefix, and adsa additionally keeps the K
//! previous-region tokens whose value vectors have the *lowest* average
//! cosine similarity to their peers (the most diverse ones). Writes go
//! through [`KvCache::insert_with_eviction`]: a full cache first evicts the
//! most redundant previous-region token — the *highest* average similarity
//! — so occupancy never exceeds capacity. Every generated token is also
//! recorded in an append-only [`Archive`] that lives outside the
//! device-memory budget, so eviction loses no information permanently.
//!
//! Prefix and local entries are protected from eviction: early tokens pin
//! global structure and recent tokens carry the strongest dependencies, so
//! only the middle region is eligible. When the previous region is empty at
//! capacity (pure sliding-window shapes) the oldest local entry is dropped
//! instead, which reproduces classic window behavior.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use crate::math::cosine_similarity;

/// Attention regime over the cache contents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full causal context: every cached entry.
    Dense,
    /// Sliding window: the most recent `m_local` entries.
    Window,
    /// Sliding window plus the pinned prefix.
    WindowPrefix,
    /// Prefix + TopK-filtered previous region + local window.
    Adsa,
}

impl Variant {
    /// All variants, in presentation order.
    pub const ALL: [Variant; 4] = [
        Variant::Dense,
        Variant::Window,
        Variant::WindowPrefix,
        Variant::Adsa,
    ];

    /// The stable tag used in configs, CSV columns, and CLI arguments.
    pub fn tag(self) -> &'static str {
        match self {
            Variant::Dense => "dense",
            Variant::Window => "window",
            Variant::WindowPrefix => "window_prefix",
            Variant::Adsa => "adsa",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dense" => Ok(Variant::Dense),
            "window" => Ok(Variant::Window),
            "window_prefix" => Ok(Variant::WindowPrefix),
            "adsa" => Ok(Variant::Adsa),
            other => Err(format!(
                "unknown variant {other:?} (expected dense, window, window_prefix, or adsa)"
            )),
        }
    }
}

/// Configuration errors caught before a cache is constructed.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("capacity must be positive")]
    ZeroCapacity,
    #[error("n_prefix + m_local = {fixed} exceeds capacity {capacity}")]
    FixedRegionsExceedCapacity { fixed: usize, capacity: usize },
    #[error("n_prefix + k_select + m_local = {budget} exceeds capacity {capacity}")]
    BudgetExceedsCapacity { budget: usize, capacity: usize },
    #[error("variant {variant} keeps no context (all participating region sizes are zero)")]
    EmptyContext { variant: Variant },
    #[error("variant {variant} ignores {field}; set it to zero")]
    UnusedField {
        variant: Variant,
        field: &'static str,
    },
}

/// Cache configuration: region sizes, selection budget, total capacity,
/// and the attention variant that reads from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachePolicy {
    pub variant: Variant,
    /// Pinned prefix length n: the first n positions ever inserted.
    pub n_prefix: usize,
    /// Local window length m: the most recent m positions.
    pub m_local: usize,
    /// Selection budget K over the previous region (adsa only).
    pub k_select: usize,
    /// Hard occupancy bound C per cache instance.
    pub capacity: usize,
    /// Compute TopK selection and eviction once per step (on the first
    /// layer's first head) and apply the same positions to every cache,
    /// instead of deciding per cache independently.
    #[serde(default)]
    pub shared_selection: bool,
}

impl CachePolicy {
    /// Full-context policy; region fields unused.
    pub fn dense(capacity: usize) -> Self {
        CachePolicy {
            variant: Variant::Dense,
            n_prefix: 0,
            m_local: 0,
            k_select: 0,
            capacity,
            shared_selection: false,
        }
    }

    /// Sliding-window policy over the last `m_local` positions.
    pub fn window(m_local: usize, capacity: usize) -> Self {
        CachePolicy {
            variant: Variant::Window,
            n_prefix: 0,
            m_local,
            k_select: 0,
            capacity,
            shared_selection: false,
        }
    }

    /// Pinned prefix plus sliding window.
    pub fn window_prefix(n_prefix: usize, m_local: usize, capacity: usize) -> Self {
        CachePolicy {
            variant: Variant::WindowPrefix,
            n_prefix,
            m_local,
            k_select: 0,
            capacity,
            shared_selection: false,
        }
    }

    /// Adaptive policy: prefix n, TopK budget K, local window m.
    pub fn adsa(n_prefix: usize, k_select: usize, m_local: usize, capacity: usize) -> Self {
        CachePolicy {
            variant: Variant::Adsa,
            n_prefix,
            m_local,
            k_select,
            capacity,
            shared_selection: false,
        }
    }

    /// Same policy with shared selection switched on or off.
    pub fn with_shared_selection(mut self, shared: bool) -> Self {
        self.shared_selection = shared;
        self
    }

    /// Upper bound on effective-context length for this policy, given
    /// unbounded occupancy.
    pub fn context_budget(&self) -> usize {
        match self.variant {
            Variant::Dense => self.capacity,
            Variant::Window => self.m_local,
            Variant::WindowPrefix => self.n_prefix + self.m_local,
            Variant::Adsa => self.n_prefix + self.k_select + self.m_local,
        }
    }

    /// Checks structural consistency; call before constructing a cache.
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.capacity == 0 {
            return Err(PolicyError::ZeroCapacity);
        }
        let fixed = self.n_prefix + self.m_local;
        if fixed > self.capacity {
            return Err(PolicyError::FixedRegionsExceedCapacity {
                fixed,
                capacity: self.capacity,
            });
        }
        let unused: &[(&'static str, usize)] = match self.variant {
            Variant::Dense => &[
                ("n_prefix", self.n_prefix),
                ("k_select", self.k_select),
                ("m_local", self.m_local),
            ],
            Variant::Window => &[("n_prefix", self.n_prefix), ("k_select", self.k_select)],
            Variant::WindowPrefix => &[("k_select", self.k_select)],
            Variant::Adsa => &[],
        };
        for &(field, value) in unused {
            if value != 0 {
                return Err(PolicyError::UnusedField {
                    variant: self.variant,
                    field,
                });
            }
        }
        match self.variant {
            Variant::Dense => {}
            Variant::Window => {
                if self.m_local == 0 {
                    return Err(PolicyError::EmptyContext {
                        variant: self.variant,
                    });
                }
            }
            Variant::WindowPrefix => {
                if self.n_prefix + self.m_local == 0 {
                    return Err(PolicyError::EmptyContext {
                        variant: self.variant,
                    });
                }
            }
            Variant::Adsa => {
                let budget = self.n_prefix + self.k_select + self.m_local;
                if budget > self.capacity {
                    return Err(PolicyError::BudgetExceedsCapacity {
                        budget,
                        capacity: self.capacity,
                    });
                }
                if budget == 0 {
                    return Err(PolicyError::EmptyContext {
                        variant: self.variant,
                    });
                }
            }
        }
        Ok(())
    }
}

/// One cached token: post-rotation key, value, absolute position, and the
/// generation step at which it was inserted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvEntry {
    pub position: usize,
    pub step: usize,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

/// The (prefix, previous, local) split of cache contents by position.
#[derive(Debug, Clone, Copy)]
pub struct RegionView<'a> {
    pub prefix: &'a [KvEntry],
    pub previous: &'a [KvEntry],
    pub local: &'a [KvEntry],
}

/// Pairwise value-cosine matrix over a previous region, with per-token
/// averages.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityStats {
    /// `matrix[i][j]` = cosine(v_i, v_j) for i ≠ j; diagonal exactly 0.
    pub matrix: Vec<Vec<f64>>,
    /// `avg[i]` = (1/(L−1)) Σ_{j≠i} matrix\[i\]\[j\]; all zeros when L < 2.
    pub avg: Vec<f64>,
}

impl SimilarityStats {
    pub fn len(&self) -> usize {
        self.avg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.avg.is_empty()
    }
}

/// Pairwise value similarities and averages for one previous region.
///
/// With fewer than two entries there are no distinct pairs and all
/// averages are 0.
pub fn similarity_stats(previous: &[KvEntry]) -> SimilarityStats {
    let l = previous.len();
    let mut matrix = vec![vec![0.0; l]; l];
    for i in 0..l {
        for j in (i + 1)..l {
            let s = cosine_similarity(&previous[i].value, &previous[j].value);
            matrix[i][j] = s;
            matrix[j][i] = s;
        }
    }
    let avg = if l < 2 {
        vec![0.0; l]
    } else {
        matrix
            .iter()
            .map(|row| row.iter().sum::<f64>() / (l - 1) as f64)
            .collect()
    };
    SimilarityStats { matrix, avg }
}

/// Indices of the `k` entries with the lowest average similarity (most
/// diverse), ascending. Ties prefer the smaller index, i.e. the earlier
/// position. Because the selection objective is a sum of per-token
/// averages, the k smallest averages are exactly the minimizing subset.
pub fn topk_select(stats: &SimilarityStats, k: usize) -> Vec<usize> {
    let l = stats.len();
    assert!(k <= l, "selection budget {k} exceeds region size {l}");
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| {
        stats.avg[a]
            .partial_cmp(&stats.avg[b])
            .expect("non-finite similarity average")
            .then(a.cmp(&b))
    });
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    chosen
}

/// One offloaded token: absolute position and sampled token id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveRecord {
    pub position: usize,
    pub token: usize,
}

/// Append-only host-side record of every generated token, kept outside
/// the device-cache memory budget.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Archive {
    pub records: Vec<ArchiveRecord>,
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    /// Appends one record and returns the new length. Positions must be
    /// strictly increasing.
    pub fn append(&mut self, position: usize, token: usize) -> usize {
        if let Some(last) = self.records.last() {
            assert!(
                position > last.position,
                "archive positions must increase: {position} after {}",
                last.position
            );
        }
        self.records.push(ArchiveRecord { position, token });
        self.records.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Exact byte-accounting model for cache memory: each cached token holds
/// one key and one value vector of `d_head` scalars in every layer and
/// head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub d_head: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Bytes per stored scalar (2 models fp16-style storage).
    pub bytes_per_scalar: usize,
}

impl MemoryModel {
    /// Accounted bytes for one per-cache occupancy, across all layers and
    /// heads. Exact integer arithmetic; linear in occupancy.
    pub fn footprint(&self, occupancy: usize) -> u64 {
        occupancy as u64
            * 2
            * self.d_head as u64
            * self.bytes_per_scalar as u64
            * self.n_layers as u64
            * self.n_heads as u64
    }
}

/// Runtime cache failures reachable through legal configurations.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CacheError {
    /// The cache is full and every entry is protected from eviction.
    #[error("cache full at capacity {capacity} with nothing evictable (prefix fills the cache)")]
    NothingEvictable { capacity: usize },
}

/// A single attention head's KV store plus the policy governing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvCache {
    policy: CachePolicy,
    entries: Vec<KvEntry>,
}

impl KvCache {
    /// Creates an empty cache. Panics on an invalid policy; validate
    /// user-supplied policies with [`CachePolicy::validate`] first.
    pub fn new(policy: CachePolicy) -> Self {
        if let Err(e) = policy.validate() {
            panic!("invalid cache policy: {e}");
        }
        KvCache {
            policy,
            entries: Vec::new(),
        }
    }

    pub fn policy(&self) -> &CachePolicy {
        &self.policy
    }

    /// All cached entries in ascending position order.
    pub fn entries(&self) -> &[KvEntry] {
        &self.entries
    }

    pub fn occupancy(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Splits the contents into (prefix, previous, local). The prefix
    /// claims entries first; the local window takes what remains; the
    /// previous region is empty until occupancy exceeds n + m.
    pub fn partition(&self) -> RegionView<'_> {
        let occ = self.entries.len();
        let n = self.policy.n_prefix.min(occ);
        let m = self.policy.m_local.min(occ - n);
        let (prefix, rest) = self.entries.split_at(n);
        let (previous, local) = rest.split_at(rest.len() - m);
        RegionView {
            prefix,
            previous,
            local,
        }
    }

    /// The entries the active variant actually attends over, in ascending
    /// position order, duplicate-free.
    pub fn effective_context(&self) -> Vec<&KvEntry> {
        assert!(!self.entries.is_empty(), "effective context of an empty cache");
        let regions = self.partition();
        match self.policy.variant {
            Variant::Dense => self.entries.iter().collect(),
            Variant::Window => regions.local.iter().collect(),
            Variant::WindowPrefix => regions.prefix.iter().chain(regions.local).collect(),
            Variant::Adsa => {
                let stats = similarity_stats(regions.previous);
                let k = self.policy.k_select.min(regions.previous.len());
                let chosen = topk_select(&stats, k);
                regions
                    .prefix
                    .iter()
                    .chain(chosen.iter().map(|&i| &regions.previous[i]))
                    .chain(regions.local)
                    .collect()
            }
        }
    }

    /// Positions of the TopK-selected previous-region entries, used to
    /// share one selection across caches.
    pub fn selected_previous_positions(&self) -> Vec<usize> {
        let regions = self.partition();
        let stats = similarity_stats(regions.previous);
        let k = self.policy.k_select.min(regions.previous.len());
        topk_select(&stats, k)
            .into_iter()
            .map(|i| regions.previous[i].position)
            .collect()
    }

    /// Effective context under an externally-decided previous-region
    /// selection (shared-selection mode, adsa only). Every position in
    /// `selected` must name a previous-region entry of this cache.
    pub fn effective_context_from(&self, selected: &[usize]) -> Vec<&KvEntry> {
        assert!(!self.entries.is_empty(), "effective context of an empty cache");
        assert_eq!(self.policy.variant, Variant::Adsa);
        let regions = self.partition();
        let picked: Vec<&KvEntry> = regions
            .previous
            .iter()
            .filter(|e| selected.contains(&e.position))
            .collect();
        assert_eq!(
            picked.len(),
            selected.len(),
            "selection names positions outside the previous region"
        );
        regions
            .prefix
            .iter()
            .chain(picked)
            .chain(regions.local)
            .collect()
    }

    /// The position an insert would evict right now: `None` below
    /// capacity; otherwise the previous-region entry with the highest
    /// average value similarity (ties to the smaller position), falling
    /// back to the oldest local entry when the previous region is empty.
    pub fn evict_candidate(&self) -> Result<Option<usize>, CacheError> {
        if self.entries.len() < self.policy.capacity {
            return Ok(None);
        }
        let regions = self.partition();
        if !regions.previous.is_empty() {
            let stats = similarity_stats(regions.previous);
            let mut best = 0;
            for i in 1..regions.previous.len() {
                if stats.avg[i] > stats.avg[best] {
                    best = i;
                }
            }
            return Ok(Some(regions.previous[best].position));
        }
        if let Some(oldest) = regions.local.first() {
            return Ok(Some(oldest.position));
        }
        Err(CacheError::NothingEvictable {
            capacity: self.policy.capacity,
        })
    }

    /// Inserts with an externally-decided eviction (shared-selection
    /// mode). `evict` must name a cached position when the cache is full.
    pub fn insert_evicting(&mut self, entry: KvEntry, evict: Option<usize>) {
        if let Some(last) = self.entries.last() {
            assert!(
                entry.position > last.position,
                "out-of-order insert: position {} after {}",
                entry.position,
                last.position
            );
        }
        if let Some(pos) = evict {
            let idx = self
                .entries
                .iter()
                .position(|e| e.position == pos)
                .expect("evicted position not present in cache");
            self.entries.remove(idx);
        }
        assert!(
            self.entries.len() < self.policy.capacity,
            "insert into a full cache without an eviction"
        );
        self.entries.push(entry);
    }

    /// Appends an entry, first evicting the most redundant previous-region
    /// token if the cache is at capacity. Returns the evicted position.
    pub fn insert_with_eviction(&mut self, entry: KvEntry) -> Result<Option<usize>, CacheError> {
        let evict = self.evict_candidate()?;
        self.insert_evicting(entry, evict);
        Ok(evict)
    }

    /// Accounted bytes of this cache's occupancy under `accounting`.
    pub fn memory_footprint(&self, accounting: &MemoryModel) -> u64 {
        accounting.footprint(self.entries.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(position: usize, value: Vec<f64>) -> KvEntry {
        KvEntry {
            position,
            step: position,
            key: vec![0.25; value.len()],
            value,
        }
    }

    /// Deterministic, varied 2-d value for bulk fills.
    fn synth_value(i: usize) -> Vec<f64> {
        let t = i as f64;
        vec![(0.7 * t).sin() + 0.1, (1.3 * t).cos() - 0.2]
    }

    fn filled_cache(policy: CachePolicy, occupancy: usize) -> KvCache {
        let mut cache = KvCache::new(policy);
        for i in 0..occupancy {
            cache
                .insert_with_eviction(entry(i, synth_value(i)))
                .unwrap();
        }
        cache
    }

    fn region_lens(cache: &KvCache) -> (usize, usize, usize) {
        let r = cache.partition();
        (r.prefix.len(), r.previous.len(), r.local.len())
    }

    #[test]
    fn partition_counts_basic() {
        let cache = filled_cache(CachePolicy::adsa(2, 1, 3, 100), 10);
        assert_eq!(region_lens(&cache), (2, 5, 3));
    }

    #[test]
    fn partition_degenerate_prefix_takes_priority() {
        let cache = filled_cache(CachePolicy::adsa(2, 1, 3, 100), 4);
        assert_eq!(region_lens(&cache), (2, 0, 2));
    }

    #[test]
    fn partition_counts_at_scale() {
        let cache = filled_cache(CachePolicy::adsa(32, 64, 160, 1000), 576);
        assert_eq!(region_lens(&cache), (32, 384, 160));
    }

    #[test]
    fn similarity_duplicate_pair() {
        let prev = [entry(0, vec![1.0, 1.0]), entry(1, vec![1.0, 1.0])];
        let stats = similarity_stats(&prev);
        for (i, row) in [[0.0, 1.0], [1.0, 0.0]].iter().enumerate() {
            for (j, want) in row.iter().enumerate() {
                assert!((stats.matrix[i][j] - want).abs() < 1e-12);
            }
        }
        assert!((stats.avg[0] - 1.0).abs() < 1e-12);
        assert!((stats.avg[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_orthogonal_pair() {
        let prev = [entry(0, vec![1.0, 0.0]), entry(1, vec![0.0, 1.0])];
        let stats = similarity_stats(&prev);
        assert_eq!(stats.avg, vec![0.0, 0.0]);
    }

    #[test]
    fn similarity_matches_independent_recomputation() {
        let values = [
            vec![0.3, -1.2, 0.8],
            vec![2.0, 0.1, -0.5],
            vec![-0.7, 0.9, 1.4],
            vec![0.05, 0.6, -2.1],
            vec![1.1, 1.1, 1.1],
        ];
        let prev: Vec<KvEntry> = values
            .iter()
            .enumerate()
            .map(|(i, v)| entry(i, v.clone()))
            .collect();
        let stats = similarity_stats(&prev);

        // From-scratch recomputation with its own loops.
        let l = values.len();
        for i in 0..l {
            let mut total = 0.0;
            for j in 0..l {
                let expected = if i == j {
                    0.0
                } else {
                    let mut dot = 0.0;
                    let mut ni = 0.0;
                    let mut nj = 0.0;
                    for (a, b) in values[i].iter().zip(&values[j]) {
                        dot += a * b;
                        ni += a * a;
                        nj += b * b;
                    }
                    dot / (ni.sqrt() * nj.sqrt())
                };
                assert!((stats.matrix[i][j] - expected).abs() < 1e-12);
                total += expected;
            }
            assert!((stats.avg[i] - total / (l - 1) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_extremes() {
        let prev: Vec<KvEntry> = (0..6).map(|i| entry(i, synth_value(i))).collect();
        let stats = similarity_stats(&prev);
        assert_eq!(topk_select(&stats, 6), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(topk_select(&stats, 0), Vec::<usize>::new());
    }

    #[test]
    fn topk_matches_exhaustive_enumeration() {
        let prev: Vec<KvEntry> = (0..10).map(|i| entry(i, synth_value(i * 7 + 3))).collect();
        let stats = similarity_stats(&prev);
        let picked = topk_select(&stats, 4);

        // Enumerate all C(10,4) subsets; minimize the summed averages with
        // lexicographically-smallest tie-break.
        let mut best: Option<(f64, Vec<usize>)> = None;
        for mask in 0u32..(1 << 10) {
            if mask.count_ones() != 4 {
                continue;
            }
            let subset: Vec<usize> = (0..10).filter(|i| mask >> i & 1 == 1).collect();
            let total: f64 = subset.iter().map(|&i| stats.avg[i]).sum();
            let better = match &best {
                None => true,
                Some((t, s)) => total < *t || (total == *t && subset < *s),
            };
            if better {
                best = Some((total, subset));
            }
        }
        assert_eq!(picked, best.unwrap().1);
    }

    #[test]
    fn topk_ties_prefer_smaller_index() {
        // Two exact duplicates tie on average similarity.
        let prev = [
            entry(0, vec![1.0, 0.0]),
            entry(1, vec![1.0, 0.0]),
            entry(2, vec![-1.0, 0.4]),
        ];
        let stats = similarity_stats(&prev);
        assert_eq!(stats.avg[0].to_bits(), stats.avg[1].to_bits());
        // avg[2] is lower (negative similarities), so K=2 takes index 2
        // plus the smaller of the tied pair.
        assert_eq!(topk_select(&stats, 2), vec![0, 2]);
    }

    #[test]
    fn insert_below_capacity_appends() {
        let mut cache = KvCache::new(CachePolicy::adsa(2, 2, 2, 8));
        for i in 0..7 {
            assert_eq!(cache.insert_with_eviction(entry(i, synth_value(i))).unwrap(), None);
        }
        assert_eq!(cache.occupancy(), 7);
    }

    #[test]
    fn eviction_removes_most_redundant_duplicate() {
        // Previous region {1, 2, 3}: positions 1 and 2 duplicate each
        // other, position 3 is orthogonal to both. avg = (0.5, 0.5, 0.0);
        // the tie between 1 and 2 resolves to the smaller position.
        let mut cache = KvCache::new(CachePolicy::adsa(1, 1, 2, 6));
        let values = [
            vec![0.5, 0.5],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.3, -0.4],
            vec![-0.2, 0.9],
        ];
        for (i, v) in values.iter().enumerate() {
            cache.insert_with_eviction(entry(i, v.clone())).unwrap();
        }
        let evicted = cache.insert_with_eviction(entry(6, vec![0.8, 0.1])).unwrap();
        assert_eq!(evicted, Some(1));
        assert_eq!(cache.occupancy(), 6);
        assert!(cache.entries().iter().all(|e| e.position != 1));
    }

    #[test]
    fn eviction_matches_argmax_oracle() {
        let policy = CachePolicy::adsa(2, 2, 3, 12);
        let mut cache = filled_cache(policy, 12);
        for next in 12..40 {
            // Recompute the expected victim from scratch before inserting.
            let prev: Vec<KvEntry> = cache.partition().previous.to_vec();
            let l = prev.len();
            let mut expected = prev[0].position;
            let mut best = f64::NEG_INFINITY;
            for i in 0..l {
                let mut total = 0.0;
                for (j, other) in prev.iter().enumerate() {
                    if i != j {
                        total += cosine_similarity(&prev[i].value, &other.value);
                    }
                }
                let avg = total / (l - 1) as f64;
                if avg > best {
                    best = avg;
                    expected = prev[i].position;
                }
            }
            let evicted = cache
                .insert_with_eviction(entry(next, synth_value(next * 3 + 1)))
                .unwrap();
            assert_eq!(evicted, Some(expected));
        }
    }

    #[test]
    fn eviction_pigeonhole() {
        let capacity = 8;
        let mut cache = KvCache::new(CachePolicy::adsa(2, 2, 3, capacity));
        let mut evictions = 0;
        for i in 0..2 * capacity {
            if cache
                .insert_with_eviction(entry(i, synth_value(i)))
                .unwrap()
                .is_some()
            {
                evictions += 1;
            }
        }
        assert_eq!(evictions, capacity);
        assert_eq!(cache.occupancy(), capacity);
    }

    #[test]
    fn eviction_window_fallback_slides() {
        let mut cache = KvCache::new(CachePolicy::window(3, 3));
        for i in 0..3 {
            cache.insert_with_eviction(entry(i, synth_value(i))).unwrap();
        }
        let evicted = cache.insert_with_eviction(entry(3, synth_value(3))).unwrap();
        assert_eq!(evicted, Some(0));
        let positions: Vec<usize> = cache.entries().iter().map(|e| e.position).collect();
        assert_eq!(positions, vec![1, 2, 3]);
    }

    #[test]
    fn eviction_fails_when_prefix_fills_cache() {
        let mut cache = KvCache::new(CachePolicy::adsa(2, 0, 0, 2));
        cache.insert_with_eviction(entry(0, synth_value(0))).unwrap();
        cache.insert_with_eviction(entry(1, synth_value(1))).unwrap();
        assert_eq!(
            cache.insert_with_eviction(entry(2, synth_value(2))),
            Err(CacheError::NothingEvictable { capacity: 2 })
        );
    }

    #[test]
    #[should_panic(expected = "out-of-order insert")]
    fn insert_rejects_stale_position() {
        let mut cache = KvCache::new(CachePolicy::dense(4));
        cache.insert_with_eviction(entry(5, synth_value(5))).unwrap();
        let _ = cache.insert_with_eviction(entry(5, synth_value(6)));
    }

    #[test]
    fn context_all_variants_small_occupancy() {
        // Below n + m every variant that keeps prefix + local sees
        // everything.
        for policy in [
            CachePolicy::dense(100),
            CachePolicy::window_prefix(2, 3, 100),
            CachePolicy::adsa(2, 1, 3, 100),
        ] {
            let cache = filled_cache(policy, 5);
            let positions: Vec<usize> =
                cache.effective_context().iter().map(|e| e.position).collect();
            assert_eq!(positions, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn context_window_keeps_last_m() {
        let cache = filled_cache(CachePolicy::window(3, 100), 10);
        let positions: Vec<usize> =
            cache.effective_context().iter().map(|e| e.position).collect();
        assert_eq!(positions, vec![7, 8, 9]);
    }

    #[test]
    fn context_adsa_full_budget_equals_dense() {
        let cache = filled_cache(CachePolicy::adsa(2, 5, 3, 100), 10);
        let positions: Vec<usize> =
            cache.effective_context().iter().map(|e| e.position).collect();
        assert_eq!(positions, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn context_length_at_scale() {
        let cache = filled_cache(CachePolicy::adsa(32, 64, 160, 1000), 576);
        assert_eq!(cache.effective_context().len(), 256);
    }

    #[test]
    fn shared_selection_path_matches_local_path() {
        let cache = filled_cache(CachePolicy::adsa(2, 3, 4, 100), 20);
        let own: Vec<usize> = cache.effective_context().iter().map(|e| e.position).collect();
        let shared = cache.selected_previous_positions();
        let from: Vec<usize> = cache
            .effective_context_from(&shared)
            .iter()
            .map(|e| e.position)
            .collect();
        assert_eq!(own, from);
    }

    #[test]
    fn archive_appends_and_guards_order() {
        let mut archive = Archive::new();
        assert_eq!(archive.append(0, 17), 1);
        for i in 1..576 {
            archive.append(i, i * 2);
        }
        assert_eq!(archive.len(), 576);
    }

    #[test]
    #[should_panic(expected = "archive positions must increase")]
    fn archive_rejects_non_monotone() {
        let mut archive = Archive::new();
        archive.append(3, 1);
        archive.append(3, 2);
    }

    #[test]
    fn footprint_formula_and_linearity() {
        let accounting = MemoryModel {
            d_head: 16,
            n_layers: 4,
            n_heads: 2,
            bytes_per_scalar: 2,
        };
        assert_eq!(accounting.footprint(0), 0);
        // 1 token × 2 tensors × 16 dims × 2 bytes × 4 layers × 2 heads.
        assert_eq!(accounting.footprint(1), 512);
        assert_eq!(accounting.footprint(512), 2 * accounting.footprint(256));
    }

    #[test]
    fn snapshot_round_trips_through_json() {
        let cache = filled_cache(CachePolicy::adsa(1, 2, 2, 8), 6);
        let json = serde_json::to_string(&cache).unwrap();
        let back: KvCache = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cache);
    }

    #[test]
    fn policy_validation_rejects_bad_shapes() {
        assert_eq!(
            CachePolicy::dense(0).validate(),
            Err(PolicyError::ZeroCapacity)
        );
        assert_eq!(
            CachePolicy::window_prefix(4, 5, 8).validate(),
            Err(PolicyError::FixedRegionsExceedCapacity {
                fixed: 9,
                capacity: 8
            })
        );
        assert_eq!(
            CachePolicy::adsa(2, 8, 2, 8).validate(),
            Err(PolicyError::BudgetExceedsCapacity {
                budget: 12,
                capacity: 8
            })
        );
        assert_eq!(
            CachePolicy::window(0, 8).validate(),
            Err(PolicyError::EmptyContext {
                variant: Variant::Window
            })
        );
        assert_eq!(
            CachePolicy::adsa(0, 0, 0, 8).validate(),
            Err(PolicyError::EmptyContext {
                variant: Variant::Adsa
            })
        );
        let mut stray = CachePolicy::window(4, 8);
        stray.n_prefix = 1;
        assert_eq!(
            stray.validate(),
            Err(PolicyError::UnusedField {
                variant: Variant::Window,
                field: "n_prefix"
            })
        );
        assert!(CachePolicy::adsa(1, 2, 3, 6).validate().is_ok());
    }

    #[test]
    fn variant_tags_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.tag().parse::<Variant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.tag()));
        }
    }

    fn arb_policy() -> impl Strategy<Value = (usize, usize, usize)> {
        // (n_prefix, k_select, m_local) kept small; capacity added on top.
        (0usize..4, 0usize..4, 0usize..4)
    }

    proptest! {
        #[test]
        fn partition_is_a_disjoint_cover(
            (n, k, m) in arb_policy(),
            occupancy in 1usize..40,
        ) {
            prop_assume!(n + k + m > 0);
            let policy = CachePolicy::adsa(n, k, m, 64);
            let cache = filled_cache(policy, occupancy);
            let r = cache.partition();
            let rejoined: Vec<&KvEntry> =
                r.prefix.iter().chain(r.previous).chain(r.local).collect();
            prop_assert_eq!(rejoined.len(), occupancy);
            for (a, b) in rejoined.iter().zip(cache.entries()) {
                prop_assert_eq!(*a, b);
            }
            prop_assert!(r.prefix.len() <= n);
            prop_assert!(r.local.len() <= m);
        }

        #[test]
        fn similarity_matrix_is_symmetric_zero_diagonal(
            values in proptest::collection::vec(
                proptest::collection::vec(-4.0f64..4.0, 3),
                0..8,
            ),
        ) {
            let prev: Vec<KvEntry> = values
                .into_iter()
                .enumerate()
                .map(|(i, v)| entry(i, v))
                .collect();
            let stats = similarity_stats(&prev);
            let l = prev.len();
            for i in 0..l {
                prop_assert_eq!(stats.matrix[i][i], 0.0);
                for j in 0..l {
                    prop_assert_eq!(
                        stats.matrix[i][j].to_bits(),
                        stats.matrix[j][i].to_bits()
                    );
                    prop_assert!(stats.matrix[i][j].abs() <= 1.0 + 1e-12);
                }
            }
        }

        #[test]
        fn topk_agrees_with_subset_enumeration(
            values in proptest::collection::vec(
                proptest::collection::vec(-4.0f64..4.0, 2),
                1..8,
            ),
            k_raw in 0usize..8,
        ) {
            let l = values.len();
            let k = k_raw % (l + 1);
            let prev: Vec<KvEntry> = values
                .into_iter()
                .enumerate()
                .map(|(i, v)| entry(i, v))
                .collect();
            let stats = similarity_stats(&prev);
            let picked = topk_select(&stats, k);

            let mut best: Option<(f64, Vec<usize>)> = None;
            for mask in 0u32..(1 << l) {
                if mask.count_ones() as usize != k {
                    continue;
                }
                let subset: Vec<usize> = (0..l).filter(|i| mask >> i & 1 == 1).collect();
                let total: f64 = subset.iter().map(|&i| stats.avg[i]).sum();
                let better = match &best {
                    None => true,
                    Some((t, s)) => total < *t || (total == *t && subset < *s),
                };
                if better {
                    best = Some((total, subset));
                }
            }
            prop_assert_eq!(picked, best.unwrap().1);
        }

        #[test]
        fn inserts_never_exceed_capacity_or_touch_protected_regions(
            (n, k, m) in arb_policy(),
            capacity_slack in 0usize..6,
            steps in 1usize..50,
        ) {
            prop_assume!(n + k + m > 0);
            let capacity = (n + k + m + capacity_slack).max(1);
            let policy = CachePolicy::adsa(n, k, m, capacity);
            let mut cache = KvCache::new(policy);
            for i in 0..steps {
                let before = cache.partition();
                let prefix_positions: Vec<usize> =
                    before.prefix.iter().map(|e| e.position).collect();
                let previous_positions: Vec<usize> =
                    before.previous.iter().map(|e| e.position).collect();
                match cache.insert_with_eviction(entry(i, synth_value(i * 11 + 5))) {
                    Ok(Some(evicted)) => {
                        prop_assert!(!prefix_positions.contains(&evicted));
                        if !previous_positions.is_empty() {
                            prop_assert!(previous_positions.contains(&evicted));
                        }
                    }
                    Ok(None) => {}
                    Err(CacheError::NothingEvictable { .. }) => {
                        // Only possible when the prefix owns the whole
                        // capacity.
                        prop_assert!(n >= capacity);
                        break;
                    }
                }
                prop_assert!(cache.occupancy() <= capacity);
            }
        }

        #[test]
        fn effective_context_is_sorted_and_bounded(
            (n, k, m) in arb_policy(),
            occupancy in 1usize..40,
        ) {
            prop_assume!(n + k + m > 0);
            let policy = CachePolicy::adsa(n, k, m, 64);
            let cache = filled_cache(policy, occupancy);
            let context = cache.effective_context();
            for pair in context.windows(2) {
                prop_assert!(pair[0].position < pair[1].position);
            }
            if occupancy > n + m {
                prop_assert_eq!(context.len(), occupancy.min(n + k + m));
            } else {
                prop_assert_eq!(context.len(), occupancy);
            }
        }
    }
}
