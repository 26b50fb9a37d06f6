//! Two-stage cache maintenance: compression right after prefill, then
//! per-step importance accumulation and capacity-driven eviction (or
//! merging) while decoding.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{AllocError, Policy, PrefixConfiguration};
use crate::importance::{compute_importance, descending_order, ImportanceError, ImportanceProfile};
use crate::toymodel::{self, ToyError, ToyModel};
use crate::trace::AttentionTrace;

pub const DEFAULT_PROTECT_DISTANCE: usize = 10;

const ROW_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("attention row for layer {layer} head {head} has length {got}, expected {expected}")]
    RowLength {
        layer: usize,
        head: usize,
        got: usize,
        expected: usize,
    },
    #[error("attention row for layer {layer} head {head} is not normalized (sum {sum})")]
    Unnormalized { layer: usize, head: usize, sum: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Importance(#[from] ImportanceError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Toy(#[from] ToyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergePolicy {
    #[default]
    None,
    Position,
    Feature,
}

impl std::str::FromStr for MergePolicy {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(MergePolicy::None),
            "position" => Ok(MergePolicy::Position),
            "feature" => Ok(MergePolicy::Feature),
            other => Err(SimError::Config(format!("unknown merge policy `{other}`"))),
        }
    }
}

impl MergePolicy {
    pub fn name(self) -> &'static str {
        match self {
            MergePolicy::None => "none",
            MergePolicy::Position => "position",
            MergePolicy::Feature => "feature",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimOptions {
    pub protect_distance: usize,
    pub merge: MergePolicy,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            protect_distance: DEFAULT_PROTECT_DISTANCE,
            merge: MergePolicy::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub position: usize,
    pub importance_acc: f64,
    /// One vector per head.
    pub keys: Option<Vec<Vec<f64>>>,
    pub values: Option<Vec<Vec<f64>>>,
    /// Positions averaged into this entry.
    pub merged_from: Vec<usize>,
}

impl CacheEntry {
    pub fn new(position: usize, importance_acc: f64) -> Self {
        Self {
            position,
            importance_acc,
            keys: None,
            values: None,
            merged_from: Vec::new(),
        }
    }

    fn weight(&self) -> f64 {
        (1 + self.merged_from.len()) as f64
    }
}

/// Per-layer key and value vectors (one per head) for a newly decoded token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenKv {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvictionEvent {
    pub layer: usize,
    pub pos: usize,
    pub merged_into: Option<usize>,
}

/// One line of the simulation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub layer_sizes: Vec<usize>,
    pub evicted: Vec<EvictionEvent>,
    pub retained_info: Vec<f64>,
}

fn cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Index of the candidate the evictee should merge into: highest matching
/// score, smaller position on ties.
///
/// Feature matching compares the concatenation of all heads' keys, so one
/// target is chosen per layer and every head is averaged into it.
pub fn merge_target(
    policy: MergePolicy,
    evictee: &CacheEntry,
    candidates: &[CacheEntry],
) -> Result<Option<usize>, SimError> {
    if candidates.is_empty() || policy == MergePolicy::None {
        return Ok(None);
    }
    let score = |c: &CacheEntry| -> Result<f64, SimError> {
        match policy {
            MergePolicy::Position => Ok(-(evictee.position.abs_diff(c.position) as f64)),
            MergePolicy::Feature => match (&evictee.keys, &c.keys) {
                (Some(a), Some(b)) => Ok(cosine(a, b)),
                _ => Err(SimError::Config(
                    "feature merging needs key vectors on every cache entry".into(),
                )),
            },
            MergePolicy::None => unreachable!(),
        }
    };
    let mut best = 0;
    let mut best_score = score(&candidates[0])?;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let s = score(c)?;
        if s > best_score || (s == best_score && c.position < candidates[best].position) {
            best = i;
            best_score = s;
        }
    }
    Ok(Some(best))
}

/// Folds `evictee` into `target`: key and value vectors become the equal-weight
/// mean over every original vector either side represents.
pub fn absorb(target: &mut CacheEntry, evictee: CacheEntry) {
    let (wt, we) = (target.weight(), evictee.weight());
    let blend = |dst: &mut Option<Vec<Vec<f64>>>, src: Option<Vec<Vec<f64>>>| {
        if let (Some(dst), Some(src)) = (dst.as_mut(), src) {
            for (d, s) in dst.iter_mut().zip(src) {
                for (x, y) in d.iter_mut().zip(s) {
                    *x = (*x * wt + y * we) / (wt + we);
                }
            }
        }
    };
    blend(&mut target.keys, evictee.keys);
    blend(&mut target.values, evictee.values);
    target.merged_from.push(evictee.position);
    target.merged_from.extend(evictee.merged_from);
}

/// Merges `evictee` into its best match among `retained`; returns the index
/// of the entry that absorbed it.
pub fn merge(
    policy: MergePolicy,
    evictee: CacheEntry,
    retained: &mut [CacheEntry],
) -> Result<usize, SimError> {
    if policy == MergePolicy::None {
        return Err(SimError::Config(
            "merge called with merging disabled".into(),
        ));
    }
    let idx = merge_target(policy, &evictee, retained)?
        .ok_or_else(|| SimError::Config("no retained entry to merge into".into()))?;
    absorb(&mut retained[idx], evictee);
    Ok(idx)
}

#[derive(Debug, Clone)]
pub struct CacheState {
    pub layer_caches: Vec<Vec<CacheEntry>>,
    pub config: PrefixConfiguration,
    pub current_len: usize,
    pub protect_distance: usize,
    pub merge: MergePolicy,
    /// Decode steps taken so far.
    pub step: usize,
    /// Total attention mass each position has received while live, per layer.
    received: Vec<Vec<f64>>,
    /// Positions dropped without being merged anywhere, per layer.
    hard_evicted: Vec<usize>,
    prefill_events: Vec<EvictionEvent>,
}

impl CacheState {
    pub fn layers(&self) -> usize {
        self.layer_caches.len()
    }

    pub fn capacity(&self, layer: usize) -> usize {
        let ratio = self.config.ratios[layer];
        let grown = (ratio * self.current_len as f64 + 1e-9).floor() as usize + 1;
        grown.max(self.config.budget.min_tokens_per_layer)
    }

    /// Width of the recency window exempt from eviction in `layer`. Shrinks
    /// to the capacity when the capacity is smaller than the configured
    /// distance.
    pub fn protect_window(&self, layer: usize) -> usize {
        self.protect_distance.min(self.capacity(layer))
    }

    pub fn newest_position(&self) -> usize {
        self.current_len - 1
    }

    pub fn is_protected(&self, layer: usize, position: usize) -> bool {
        self.newest_position() - position < self.protect_window(layer)
    }

    pub fn prefill_events(&self) -> &[EvictionEvent] {
        &self.prefill_events
    }

    pub fn live_positions(&self, layer: usize) -> Vec<usize> {
        self.layer_caches[layer]
            .iter()
            .map(|e| e.position)
            .collect()
    }

    pub fn hard_evicted(&self, layer: usize) -> usize {
        self.hard_evicted[layer]
    }

    /// Live entries plus everything merged into them plus hard evictions;
    /// equals `current_len` for every layer.
    pub fn accounted(&self, layer: usize) -> usize {
        let merged: usize = self.layer_caches[layer]
            .iter()
            .map(|e| e.merged_from.len())
            .sum();
        self.layer_caches[layer].len() + merged + self.hard_evicted[layer]
    }

    /// Share of all attention mass received so far that sits on live
    /// positions, per layer.
    pub fn running_retained_info(&self) -> Vec<f64> {
        self.layer_caches
            .iter()
            .zip(&self.received)
            .map(|(cache, received)| {
                let total: f64 = received.iter().sum();
                let live: f64 = cache.iter().map(|e| received[e.position]).sum();
                if total > 0.0 {
                    live / total
                } else {
                    1.0
                }
            })
            .collect()
    }

    /// Advances one decode token.
    ///
    /// `rows[l][h]` holds the new token's attention over layer `l`'s live
    /// entries (in cache order) followed by itself.
    pub fn decode_step(
        &mut self,
        rows: &[Vec<Vec<f64>>],
        new_kv: Option<&[TokenKv]>,
    ) -> Result<StepRecord, SimError> {
        if rows.len() != self.layers() {
            return Err(SimError::LengthMismatch(format!(
                "attention rows cover {} layers, cache has {}",
                rows.len(),
                self.layers()
            )));
        }
        if let Some(kv) = new_kv {
            if kv.len() != self.layers() {
                return Err(SimError::LengthMismatch(format!(
                    "new kv covers {} layers, cache has {}",
                    kv.len(),
                    self.layers()
                )));
            }
        }
        for (l, heads) in rows.iter().enumerate() {
            let expected = self.layer_caches[l].len() + 1;
            if heads.is_empty() {
                return Err(SimError::LengthMismatch(format!("layer {l} has no heads")));
            }
            for (h, row) in heads.iter().enumerate() {
                if row.len() != expected {
                    return Err(SimError::RowLength {
                        layer: l,
                        head: h,
                        got: row.len(),
                        expected,
                    });
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_TOL || row.iter().any(|v| *v < 0.0) {
                    return Err(SimError::Unnormalized {
                        layer: l,
                        head: h,
                        sum,
                    });
                }
            }
        }

        self.current_len += 1;
        self.step += 1;
        let position = self.newest_position();
        let mut evicted = Vec::new();
        for (l, heads) in rows.iter().enumerate() {
            let h = heads.len() as f64;
            let mass = |j: usize| heads.iter().map(|row| row[j]).sum::<f64>() / h;
            for j in 0..self.layer_caches[l].len() {
                let m = mass(j);
                let entry = &mut self.layer_caches[l][j];
                entry.importance_acc += m;
                self.received[l][entry.position] += m;
            }
            let own = mass(self.layer_caches[l].len());
            self.received[l].push(own);
            let mut entry = CacheEntry::new(position, own);
            if let Some(kv) = new_kv {
                entry.keys = Some(kv[l].keys.clone());
                entry.values = Some(kv[l].values.clone());
            }
            self.layer_caches[l].push(entry);
            while self.layer_caches[l].len() > self.capacity(l) {
                evicted.push(self.evict_one(l)?);
            }
        }
        Ok(StepRecord {
            step: self.step,
            layer_sizes: self.layer_caches.iter().map(Vec::len).collect(),
            evicted,
            retained_info: self.running_retained_info(),
        })
    }

    fn evict_one(&mut self, layer: usize) -> Result<EvictionEvent, SimError> {
        let cache = &self.layer_caches[layer];
        let eligible: Vec<usize> = (0..cache.len())
            .filter(|&i| !self.is_protected(layer, cache[i].position))
            .collect();
        let victim = match self.config.policy {
            Policy::Local => {
                let sinks = self.config.sink_count.unwrap_or(0);
                eligible
                    .iter()
                    .copied()
                    .find(|&i| cache[i].position >= sinks)
                    .or_else(|| eligible.first().copied())
            }
            _ => eligible.iter().copied().min_by(|&a, &b| {
                cache[a]
                    .importance_acc
                    .total_cmp(&cache[b].importance_acc)
                    .then(cache[a].position.cmp(&cache[b].position))
            }),
        }
        .expect("protected window never covers the whole over-capacity cache");

        let entry = self.layer_caches[layer].remove(victim);
        let pos = entry.position;
        if self.merge != MergePolicy::None {
            let candidates: Vec<usize> = (0..self.layer_caches[layer].len())
                .filter(|&i| !self.is_protected(layer, self.layer_caches[layer][i].position))
                .collect();
            let pool: Vec<CacheEntry> = candidates
                .iter()
                .map(|&i| self.layer_caches[layer][i].clone())
                .collect();
            if let Some(k) = merge_target(self.merge, &entry, &pool)? {
                let target = &mut self.layer_caches[layer][candidates[k]];
                let into = target.position;
                absorb(target, entry);
                return Ok(EvictionEvent {
                    layer,
                    pos,
                    merged_into: Some(into),
                });
            }
        }
        self.hard_evicted[layer] += 1 + entry.merged_from.len();
        Ok(EvictionEvent {
            layer,
            pos,
            merged_into: None,
        })
    }
}

fn per_head(kv: &[Vec<Vec<Vec<f64>>>], layer: usize, position: usize) -> Vec<Vec<f64>> {
    kv[layer]
        .iter()
        .map(|head| head[position].clone())
        .collect()
}

/// Compresses the prefill cache of `trace` according to `config`.
pub fn prefill_compress(
    trace: &AttentionTrace,
    config: &PrefixConfiguration,
    options: &SimOptions,
) -> Result<CacheState, SimError> {
    let profile = compute_importance(trace)?;
    let n = trace.meta.seq_len;
    if config.seq_len != n {
        return Err(SimError::LengthMismatch(format!(
            "configuration realized for {} tokens, trace has {n}",
            config.seq_len
        )));
    }
    if config.layers() != trace.meta.layers {
        return Err(SimError::LengthMismatch(format!(
            "configuration has {} layers, trace has {}",
            config.layers(),
            trace.meta.layers
        )));
    }
    if let Some(l) = config.token_counts.iter().position(|&c| c > n) {
        return Err(SimError::Config(format!(
            "layer {l} keeps {} tokens but the trace has {n}",
            config.token_counts[l]
        )));
    }
    if options.protect_distance == 0 {
        return Err(SimError::Config("protect_distance must be positive".into()));
    }
    if options.merge == MergePolicy::Feature && trace.kv.is_none() {
        return Err(SimError::Config(
            "feature merging needs key/value vectors in the trace".into(),
        ));
    }

    let mut layer_caches = Vec::with_capacity(config.layers());
    let mut hard_evicted = Vec::with_capacity(config.layers());
    let mut prefill_events = Vec::new();
    for (l, &count) in config.token_counts.iter().enumerate() {
        let keep = select_prefill(&profile, l, count, config);
        let make = |pos: usize| {
            let mut e = CacheEntry::new(pos, profile.raw[l][pos]);
            if let Some(kv) = &trace.kv {
                e.keys = Some(per_head(&kv.keys, l, pos));
                e.values = Some(per_head(&kv.values, l, pos));
            }
            e
        };
        let mut retained: Vec<CacheEntry> = keep.iter().map(|&p| make(p)).collect();
        let pruned: Vec<usize> = (0..n).filter(|p| !keep.contains(p)).collect();

        // match every pruned entry against the unmerged retained set, then average
        let targets = if options.merge == MergePolicy::None {
            vec![None; pruned.len()]
        } else {
            pruned
                .iter()
                .map(|&p| merge_target(options.merge, &make(p), &retained))
                .collect::<Result<Vec<_>, _>>()?
        };
        let mut dropped = 0;
        for (&p, target) in pruned.iter().zip(targets) {
            match target {
                Some(t) => {
                    let into = retained[t].position;
                    absorb(&mut retained[t], make(p));
                    prefill_events.push(EvictionEvent {
                        layer: l,
                        pos: p,
                        merged_into: Some(into),
                    });
                }
                None => {
                    dropped += 1;
                    prefill_events.push(EvictionEvent {
                        layer: l,
                        pos: p,
                        merged_into: None,
                    });
                }
            }
        }
        layer_caches.push(retained);
        hard_evicted.push(dropped);
    }

    Ok(CacheState {
        layer_caches,
        config: config.clone(),
        current_len: n,
        protect_distance: options.protect_distance,
        merge: options.merge,
        step: 0,
        received: profile.raw.clone(),
        hard_evicted,
        prefill_events,
    })
}

/// Outcome of [`replay_trace`].
#[derive(Debug, Clone)]
pub struct Replay {
    pub state: CacheState,
    /// Retained information per layer right after prefill compression.
    pub prefill_retained: Vec<f64>,
    pub log: Vec<StepRecord>,
}

/// Compresses the first `prefill_len` tokens of `trace`, then decodes the
/// rest by replaying each recorded attention row restricted to the live
/// cache and renormalized.
pub fn replay_trace(
    trace: &AttentionTrace,
    prefill_len: usize,
    config: &PrefixConfiguration,
    options: &SimOptions,
) -> Result<Replay, SimError> {
    let n = trace.meta.seq_len;
    let prompt = trace
        .prefix(prefill_len)
        .map_err(|e| SimError::Config(e.to_string()))?;
    let config = if config.seq_len == prefill_len {
        config.clone()
    } else {
        config.realize(prefill_len)?
    };
    let mut state = prefill_compress(&prompt, &config, options)?;
    let prefill_retained = state.running_retained_info();
    if prefill_len == n {
        return Ok(Replay {
            state,
            prefill_retained,
            log: Vec::new(),
        });
    }
    let attention = trace
        .attention
        .as_ref()
        .ok_or_else(|| SimError::Config("decoding needs full attention matrices".into()))?;

    let mut log = Vec::with_capacity(n - prefill_len);
    for m in prefill_len..n {
        let rows: Vec<Vec<Vec<f64>>> = attention
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let live = state.live_positions(l);
                layer
                    .iter()
                    .map(|matrix| {
                        let mut row: Vec<f64> = live.iter().map(|&p| matrix[m][p]).collect();
                        row.push(matrix[m][m]);
                        let total: f64 = row.iter().sum();
                        if total > 0.0 {
                            row.iter_mut().for_each(|v| *v /= total);
                        } else {
                            let k = row.len() as f64;
                            row.iter_mut().for_each(|v| *v = 1.0 / k);
                        }
                        row
                    })
                    .collect()
            })
            .collect();
        let new_kv: Option<Vec<TokenKv>> = trace.kv.as_ref().map(|kv| {
            (0..trace.meta.layers)
                .map(|l| TokenKv {
                    keys: per_head(&kv.keys, l, m),
                    values: per_head(&kv.values, l, m),
                })
                .collect()
        });
        log.push(state.decode_step(&rows, new_kv.as_deref())?);
    }
    Ok(Replay {
        state,
        prefill_retained,
        log,
    })
}

/// Positions kept after prefill, ascending.
fn select_prefill(
    profile: &ImportanceProfile,
    layer: usize,
    count: usize,
    config: &PrefixConfiguration,
) -> BTreeSet<usize> {
    let n = profile.seq_len();
    match config.policy {
        Policy::Local => {
            let sinks = config.sink_count.unwrap_or(0).min(count);
            (0..sinks).chain(n - (count - sinks)..n).collect()
        }
        _ => descending_order(&profile.normalized[layer])
            .into_iter()
            .take(count)
            .collect(),
    }
}

/// Normalized importance of the live positions, per layer.
pub fn retained_info(state: &CacheState, profile: &ImportanceProfile) -> Vec<f64> {
    state
        .layer_caches
        .iter()
        .zip(&profile.normalized)
        .map(|(cache, shares)| cache.iter().filter_map(|e| shares.get(e.position)).sum())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceReport {
    /// `mae[l][t]`: mean absolute feature error of layer `l` at decoded token `t`.
    pub mae: Vec<Vec<f64>>,
    pub per_layer_mae: Vec<f64>,
    pub per_token_mae: Vec<f64>,
    pub budget: f64,
}

impl DisturbanceReport {
    pub fn mean(&self) -> f64 {
        self.per_layer_mae.iter().sum::<f64>() / self.per_layer_mae.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,token_index,mae\n");
        for (l, row) in self.mae.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                out.push_str(&format!("{l},{t},{v}\n"));
            }
        }
        out
    }
}

/// Feature drift caused by running `config` instead of a full cache.
///
/// Both runs are fed the full-cache run's greedy tokens so the feature
/// streams stay aligned.
pub fn disturbance(
    model: &ToyModel,
    prompt: &[usize],
    decode_len: usize,
    config: &PrefixConfiguration,
    options: &SimOptions,
) -> Result<DisturbanceReport, SimError> {
    if decode_len == 0 {
        return Err(SimError::Config("decode_len must be at least 1".into()));
    }
    let full = toymodel::decode(model, prompt, decode_len, None, options)?;
    let compressed = toymodel::decode_forced(model, prompt, &full.tokens, Some(config), options)?;
    let layers = model.config.layers;
    let mae: Vec<Vec<f64>> = (0..layers)
        .map(|l| {
            full.features
                .iter()
                .zip(&compressed.features)
                .map(|(a, b)| {
                    let (a, b) = (&a[l], &b[l]);
                    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
                })
                .collect()
        })
        .collect();
    let per_layer_mae = mae
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .collect();
    let per_token_mae = (0..decode_len)
        .map(|t| mae.iter().map(|row| row[t]).sum::<f64>() / layers as f64)
        .collect();
    Ok(DisturbanceReport {
        mae,
        per_layer_mae,
        per_token_mae,
        budget: config.budget.r,
    })
}
