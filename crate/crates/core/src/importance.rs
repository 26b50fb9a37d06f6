//! Per-token KV importance and the descending priority sequence.

use thiserror::Error;

use crate::trace::{AttentionTrace, TraceMeta};

#[derive(Debug, Error, PartialEq)]
pub enum ImportanceError {
    #[error("layer {0} has all-zero importance; normalization is undefined")]
    DegenerateLayer(usize),
    #[error("trace carries neither attention nor importance")]
    MissingData,
}

/// Raw importance `raw[l][n]` (attention mass received, averaged over heads)
/// and its per-layer normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceProfile {
    pub meta: TraceMeta,
    pub raw: Vec<Vec<f64>>,
    pub normalized: Vec<Vec<f64>>,
}

impl ImportanceProfile {
    pub fn from_raw(meta: TraceMeta, raw: Vec<Vec<f64>>) -> Result<Self, ImportanceError> {
        let normalized = raw
            .iter()
            .enumerate()
            .map(|(l, layer)| normalize(layer).ok_or(ImportanceError::DegenerateLayer(l)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            meta,
            raw,
            normalized,
        })
    }

    pub fn layers(&self) -> usize {
        self.raw.len()
    }

    pub fn seq_len(&self) -> usize {
        self.raw.first().map_or(0, Vec::len)
    }
}

fn normalize(values: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = values.iter().sum();
    (total > 0.0 && total.is_finite()).then(|| values.iter().map(|v| v / total).collect())
}

/// Column sums of each head's attention matrix, averaged over heads.
pub fn column_importance(trace: &AttentionTrace) -> Option<Vec<Vec<f64>>> {
    let att = trace.attention.as_ref()?;
    let n = trace.meta.seq_len;
    Some(
        att.iter()
            .map(|layer| {
                let mut acc = vec![0.0; n];
                for matrix in layer {
                    for row in matrix {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
                let heads = layer.len() as f64;
                acc.iter_mut().for_each(|a| *a /= heads);
                acc
            })
            .collect(),
    )
}

pub fn compute_importance(trace: &AttentionTrace) -> Result<ImportanceProfile, ImportanceError> {
    let raw = match column_importance(trace) {
        Some(raw) => raw,
        None => trace
            .importance
            .clone()
            .ok_or(ImportanceError::MissingData)?,
    };
    ImportanceProfile::from_raw(trace.meta.clone(), raw)
}

/// Positions of each layer in descending normalized importance, with the
/// running cumulative priority at every prefix size.
///
/// `cumulative[l][j]` is the share of layer `l`'s importance held by its top
/// `j + 1` positions, i.e. the prefix ratio `(j + 1) / N`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrioritySequence {
    pub order: Vec<Vec<usize>>,
    pub cumulative: Vec<Vec<f64>>,
}

impl PrioritySequence {
    /// Builds a sequence straight from cumulative curves, assuming they are
    /// already in priority order (used for pooled curves and hand examples).
    pub fn from_cumulative(cumulative: Vec<Vec<f64>>) -> Self {
        let order = cumulative.iter().map(|c| (0..c.len()).collect()).collect();
        Self { order, cumulative }
    }

    pub fn layers(&self) -> usize {
        self.cumulative.len()
    }

    /// Sequence length of layer `l`.
    pub fn len_of(&self, layer: usize) -> usize {
        self.cumulative[layer].len()
    }

    /// Common sequence length; layers built from one trace always agree.
    pub fn seq_len(&self) -> usize {
        self.cumulative.first().map_or(0, Vec::len)
    }

    /// Normalized importance of the rank-`j` position of layer `l`.
    pub fn share(&self, layer: usize, rank: usize) -> f64 {
        let c = &self.cumulative[layer];
        if rank == 0 {
            c[0]
        } else {
            c[rank] - c[rank - 1]
        }
    }
}

/// Indices sorted by descending score; ties keep ascending index order.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Resolution of cumulative priorities: a power of two, so snapped values
/// are exact and shares differing only by summation order compare equal.
pub const CUMULATIVE_RESOLUTION: f64 = 1.0 / (1u64 << 40) as f64;

fn snap(c: f64) -> f64 {
    ((c / CUMULATIVE_RESOLUTION).round() * CUMULATIVE_RESOLUTION).min(1.0)
}

pub fn priority_sequence(profile: &ImportanceProfile) -> PrioritySequence {
    let mut order = Vec::with_capacity(profile.layers());
    let mut cumulative = Vec::with_capacity(profile.layers());
    for layer in &profile.normalized {
        let s = descending_order(layer);
        let mut running = 0.0;
        let mut cum: Vec<f64> = s
            .iter()
            .map(|&n| {
                running += layer[n];
                running
            })
            .collect();
        if running > 0.0 {
            cum.iter_mut().for_each(|c| *c = snap(*c / running));
        }
        order.push(s);
        cumulative.push(cum);
    }
    PrioritySequence { order, cumulative }
}
