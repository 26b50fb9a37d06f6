//! Attention-trace data model, validation, file IO and seeded synthesis.
//!
//! A trace holds, for one sequence of `N` tokens, the causal attention
//! matrices of every layer and head (`attention[l][h][m][n]`, row `m` is the
//! query, column `n` the key). Traces may instead carry only the per-layer
//! importance vectors (the "shortcut" form), which is all the allocator
//! needs.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on attention row sums.
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Key/value dimension used by [`synth_trace`] when vectors are requested.
pub const DEFAULT_KV_DIM: usize = 16;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at `{field}`: {message}")]
    Parse { field: String, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub layers: usize,
    pub heads: usize,
    pub seq_len: usize,
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// Per-layer, per-head key and value vectors: `keys[l][h][n]` has length `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvVectors {
    pub keys: Vec<Vec<Vec<Vec<f64>>>>,
    pub values: Vec<Vec<Vec<Vec<f64>>>>,
}

impl KvVectors {
    pub fn dim(&self) -> usize {
        self.keys
            .first()
            .and_then(|l| l.first())
            .and_then(|h| h.first())
            .map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub meta: TraceMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<Vec<Vec<Vec<f64>>>>>,
    /// Raw per-layer importance; present only in the shortcut form.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub importance: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub kv: Option<KvVectors>,
    /// `features[l][n]`: per-layer output feature of token `n`.
    #[serde(default)]
    pub features: Option<Vec<Vec<Vec<f64>>>>,
}

impl AttentionTrace {
    pub fn is_shortcut(&self) -> bool {
        self.attention.is_none()
    }

    /// Checks shapes, causality and row-stochasticity.
    pub fn validate(&self) -> Result<(), TraceError> {
        let TraceMeta {
            layers,
            heads,
            seq_len,
            ..
        } = self.meta;
        if layers == 0 || heads == 0 || seq_len == 0 {
            return Err(TraceError::Validation(format!(
                "meta counts must be positive (layers={layers}, heads={heads}, seq_len={seq_len})"
            )));
        }

        match (&self.attention, &self.importance) {
            (Some(att), _) => validate_attention(att, layers, heads, seq_len)?,
            (None, Some(imp)) => {
                if imp.len() != layers {
                    return Err(TraceError::Validation(format!(
                        "importance has {} layers, meta says {layers}",
                        imp.len()
                    )));
                }
                for (l, row) in imp.iter().enumerate() {
                    if row.len() != seq_len {
                        return Err(TraceError::Validation(format!(
                            "importance layer {l} has length {}, expected {seq_len}",
                            row.len()
                        )));
                    }
                    if let Some(n) = row.iter().position(|v| !v.is_finite() || *v < 0.0) {
                        return Err(TraceError::Validation(format!(
                            "importance layer {l} position {n} is negative or non-finite"
                        )));
                    }
                }
            }
            (None, None) => {
                return Err(TraceError::Validation(
                    "trace carries neither attention nor importance".into(),
                ))
            }
        }

        if let Some(kv) = &self.kv {
            validate_kv(kv, layers, heads, seq_len)?;
        }
        if let Some(features) = &self.features {
            if features.len() != layers {
                return Err(TraceError::Validation(format!(
                    "features has {} layers, meta says {layers}",
                    features.len()
                )));
            }
            for (l, seq) in features.iter().enumerate() {
                if seq.len() != seq_len {
                    return Err(TraceError::Validation(format!(
                        "features layer {l} has {} tokens, expected {seq_len}",
                        seq.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// The first `len` tokens as a trace of their own. Causal rows stay
    /// normalized under truncation; shortcut traces cannot be truncated.
    pub fn prefix(&self, len: usize) -> Result<AttentionTrace, TraceError> {
        if len == 0 || len > self.meta.seq_len {
            return Err(TraceError::Argument(format!(
                "prefix length {len} outside 1..={}",
                self.meta.seq_len
            )));
        }
        if len == self.meta.seq_len {
            return Ok(self.clone());
        }
        let attention = self
            .attention
            .as_ref()
            .ok_or_else(|| {
                TraceError::Argument("importance-only traces cannot be truncated".into())
            })?
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|m| m[..len].iter().map(|row| row[..len].to_vec()).collect())
                    .collect()
            })
            .collect();
        let cut = |set: &Vec<Vec<Vec<Vec<f64>>>>| -> Vec<Vec<Vec<Vec<f64>>>> {
            set.iter()
                .map(|layer| layer.iter().map(|head| head[..len].to_vec()).collect())
                .collect()
        };
        Ok(AttentionTrace {
            meta: TraceMeta {
                seq_len: len,
                ..self.meta.clone()
            },
            attention: Some(attention),
            importance: None,
            kv: self.kv.as_ref().map(|kv| KvVectors {
                keys: cut(&kv.keys),
                values: cut(&kv.values),
            }),
            features: self
                .features
                .as_ref()
                .map(|f| f.iter().map(|layer| layer[..len].to_vec()).collect()),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, TraceError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let trace: AttentionTrace =
            serde_path_to_error::deserialize(de).map_err(|e| TraceError::Parse {
                field: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        trace.validate()?;
        Ok(trace)
    }
}

fn validate_attention(
    att: &[Vec<Vec<Vec<f64>>>],
    layers: usize,
    heads: usize,
    n: usize,
) -> Result<(), TraceError> {
    if att.len() != layers {
        return Err(TraceError::Validation(format!(
            "attention has {} layers, meta says {layers}",
            att.len()
        )));
    }
    for (l, layer) in att.iter().enumerate() {
        if layer.len() != heads {
            return Err(TraceError::Validation(format!(
                "layer {l} has {} heads, meta says {heads}",
                layer.len()
            )));
        }
        for (h, matrix) in layer.iter().enumerate() {
            if matrix.len() != n {
                return Err(TraceError::Validation(format!(
                    "layer {l} head {h} has {} rows, expected {n}",
                    matrix.len()
                )));
            }
            for (m, row) in matrix.iter().enumerate() {
                if row.len() != n {
                    return Err(TraceError::Validation(format!(
                        "layer {l} head {h} row {m} has length {}, expected {n}",
                        row.len()
                    )));
                }
                for (col, &v) in row.iter().enumerate() {
                    if !v.is_finite() || v < 0.0 {
                        return Err(TraceError::Validation(format!(
                            "layer {l} head {h} row {m} col {col}: score {v} is negative or non-finite"
                        )));
                    }
                    if col > m && v != 0.0 {
                        return Err(TraceError::Validation(format!(
                            "causality: layer {l} head {h} row {m} col {col} has score {v}"
                        )));
                    }
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(TraceError::Validation(format!(
                        "layer {l} head {h} row {m}: row sum {sum}"
                    )));
                }
            }
        }
    }
    Ok(())
}

fn validate_kv(kv: &KvVectors, layers: usize, heads: usize, n: usize) -> Result<(), TraceError> {
    let d = kv.dim();
    for (name, set) in [("keys", &kv.keys), ("values", &kv.values)] {
        if set.len() != layers {
            return Err(TraceError::Validation(format!(
                "kv {name} has {} layers, meta says {layers}",
                set.len()
            )));
        }
        for (l, layer) in set.iter().enumerate() {
            if layer.len() != heads {
                return Err(TraceError::Validation(format!(
                    "kv {name} layer {l} has {} heads, meta says {heads}",
                    layer.len()
                )));
            }
            for (h, seq) in layer.iter().enumerate() {
                if seq.len() != n {
                    return Err(TraceError::Validation(format!(
                        "kv {name} layer {l} head {h} has {} vectors, expected {n}",
                        seq.len()
                    )));
                }
                if let Some(t) = seq.iter().position(|v| v.len() != d) {
                    return Err(TraceError::Validation(format!(
                        "kv {name} layer {l} head {h} token {t} has dimension {}, expected {d}",
                        seq[t].len()
                    )));
                }
            }
        }
    }
    Ok(())
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<AttentionTrace, TraceError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    AttentionTrace::from_json(&text)
}

pub fn save_trace(trace: &AttentionTrace, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let path = path.as_ref();
    fs::write(path, trace.to_json()).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Generates a trace whose rows are symmetric-Dirichlet draws over the
/// causal prefix. Small `concentration` values put each row's mass on few
/// positions; large values spread it evenly.
pub fn synth_trace(
    layers: usize,
    heads: usize,
    seq_len: usize,
    concentration: &[f64],
    seed: u64,
    with_kv: bool,
) -> Result<AttentionTrace, TraceError> {
    if layers == 0 || heads == 0 || seq_len == 0 {
        return Err(TraceError::Argument(
            "layers, heads and seq_len must be positive".into(),
        ));
    }
    if concentration.len() != layers {
        return Err(TraceError::Argument(format!(
            "expected {layers} concentration values, got {}",
            concentration.len()
        )));
    }
    if let Some(c) = concentration.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
        return Err(TraceError::Argument(format!(
            "concentration must be positive, got {c}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attention = Vec::with_capacity(layers);
    for &alpha in concentration {
        let gamma = Gamma::new(alpha, 1.0).expect("alpha checked positive");
        let mut layer = Vec::with_capacity(heads);
        for _ in 0..heads {
            let mut matrix = Vec::with_capacity(seq_len);
            for m in 0..seq_len {
                let mut row = vec![0.0; seq_len];
                dirichlet_row(&mut rng, &gamma, &mut row[..=m]);
                matrix.push(row);
            }
            layer.push(matrix);
        }
        attention.push(layer);
    }

    let kv = with_kv.then(|| KvVectors {
        keys: unit_vectors(&mut rng, layers, heads, seq_len, DEFAULT_KV_DIM),
        values: unit_vectors(&mut rng, layers, heads, seq_len, DEFAULT_KV_DIM),
    });

    Ok(AttentionTrace {
        meta: TraceMeta {
            layers,
            heads,
            seq_len,
            label: "dirichlet".into(),
            seed: Some(seed),
        },
        attention: Some(attention),
        importance: None,
        kv,
        features: None,
    })
}

fn dirichlet_row(rng: &mut ChaCha8Rng, gamma: &Gamma<f64>, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = gamma.sample(rng);
    }
    let sum: f64 = out.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        out.iter_mut().for_each(|v| *v /= sum);
    } else {
        // every gamma draw underflowed; the limit of the distribution is one-hot
        out.iter_mut().for_each(|v| *v = 0.0);
        let hot = rng.gen_range(0..out.len());
        out[hot] = 1.0;
    }
}

fn unit_vectors(
    rng: &mut ChaCha8Rng,
    layers: usize,
    heads: usize,
    n: usize,
    d: usize,
) -> Vec<Vec<Vec<Vec<f64>>>> {
    (0..layers)
        .map(|_| {
            (0..heads)
                .map(|_| (0..n).map(|_| random_unit(rng, d)).collect())
                .collect()
        })
        .collect()
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
