//! A seeded attention-only transformer with random fixed weights.
//!
//! No MLP blocks and no normalization: each layer adds the projected output
//! of causal multi-head softmax attention to the residual stream. It exists
//! to produce attention patterns, KV vectors and features that are mutually
//! consistent; its token predictions carry no meaning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::allocator::{baseline_config, BudgetSpec, Policy, PrefixConfiguration};
use crate::cachesim::{prefill_compress, SimError, SimOptions, StepRecord, TokenKv};
use crate::trace::{AttentionTrace, KvVectors, TraceMeta};

/// Per-layer query gains are log-uniform in this range.
const MIN_QUERY_GAIN: f64 = 1.0;
const MAX_QUERY_GAIN: f64 = 32.0;
const OFFSET_NORM: f64 = 1.0;

type PerHead = Vec<Vec<f64>>;

#[derive(Debug, Error, PartialEq)]
pub enum ToyError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("token id {id} at position {position} is outside the vocabulary of {vocab}")]
    OutOfVocab {
        id: usize,
        position: usize,
        vocab: usize,
    },
    #[error("empty input sequence")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            heads: 4,
            dim: 64,
            vocab: 256,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                scale * z
            })
            .collect();
        Self { rows, cols, data }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerWeights {
    query: Matrix,
    key: Matrix,
    value: Matrix,
    output: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ToyConfig,
    /// Multiplier on each layer's query projection; spreads attention
    /// sharpness across layers.
    pub query_gain: Vec<f64>,
    /// Shared residual offset added to every input. Its query projection is
    /// common to all tokens, which gives each layer persistent heavy hitters.
    offset: Vec<f64>,
    embed: Matrix,
    unembed: Matrix,
    layers: Vec<LayerWeights>,
}

impl ToyModel {
    pub fn new(config: ToyConfig) -> Result<Self, ToyError> {
        let ToyConfig {
            layers,
            heads,
            dim,
            vocab,
            seed,
        } = config;
        if layers == 0 || heads == 0 || dim == 0 || vocab == 0 {
            return Err(ToyError::Architecture("all sizes must be positive".into()));
        }
        if dim % heads != 0 {
            return Err(ToyError::Architecture(format!(
                "dim {dim} is not divisible by {heads} heads"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let embed = Matrix::gaussian(&mut rng, vocab, dim, scale);
        let unembed = Matrix::gaussian(&mut rng, vocab, dim, scale);
        let weights = (0..layers)
            .map(|_| LayerWeights {
                query: Matrix::gaussian(&mut rng, dim, dim, scale),
                key: Matrix::gaussian(&mut rng, dim, dim, scale),
                value: Matrix::gaussian(&mut rng, dim, dim, scale),
                output: Matrix::gaussian(&mut rng, dim, dim, scale),
            })
            .collect();
        let query_gain = (0..layers)
            .map(|_| {
                (rng.gen_range(0.0f64..1.0) * (MAX_QUERY_GAIN / MIN_QUERY_GAIN).ln()).exp()
                    * MIN_QUERY_GAIN
            })
            .collect();
        let offset_scale = OFFSET_NORM / (dim as f64).sqrt();
        let offset = (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                offset_scale * z
            })
            .collect();
        Ok(Self {
            config,
            query_gain,
            offset,
            embed,
            unembed,
            layers: weights,
        })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), ToyError> {
        if tokens.is_empty() {
            return Err(ToyError::EmptyInput);
        }
        match tokens.iter().position(|&t| t >= self.config.vocab) {
            Some(position) => Err(ToyError::OutOfVocab {
                id: tokens[position],
                position,
                vocab: self.config.vocab,
            }),
            None => Ok(()),
        }
    }

    /// Token embedding, shared offset and a unit-norm sinusoidal position code.
    fn input(&self, token: usize, position: usize) -> Vec<f64> {
        let dim = self.config.dim;
        let pos_scale = (2.0 / dim as f64).sqrt();
        let mut x = self.embed.row(token).to_vec();
        for (i, (v, o)) in x.iter_mut().zip(&self.offset).enumerate() {
            *v += o;
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = position as f64 * freq;
            *v += pos_scale * if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
        x
    }

    /// Per-head query, key and value vectors of `x`.
    fn project(&self, layer: usize, x: &[f64]) -> (PerHead, PerHead, PerHead) {
        let w = &self.layers[layer];
        let gain = self.query_gain[layer];
        let q: Vec<f64> = w.query.apply(x).into_iter().map(|v| v * gain).collect();
        let split = |v: Vec<f64>| -> Vec<Vec<f64>> {
            v.chunks(self.config.head_dim())
                .map(<[f64]>::to_vec)
                .collect()
        };
        (split(q), split(w.key.apply(x)), split(w.value.apply(x)))
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.unembed.apply(x)
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax of `q . k / sqrt(d)` over the given keys.
fn attend<'a>(q: &[f64], keys: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let logits: Vec<f64> = keys.map(|k| dot(q, k) * scale).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Runs the full causal stack over `tokens`, recording every attention
/// matrix, the per-head keys and values, and each layer's residual output.
pub fn forward_trace(model: &ToyModel, tokens: &[usize]) -> Result<AttentionTrace, ToyError> {
    model.check_tokens(tokens)?;
    let ToyConfig {
        layers,
        heads,
        dim,
        seed,
        ..
    } = model.config;
    let n = tokens.len();
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(pos, &t)| model.input(t, pos))
        .collect();

    let mut attention = Vec::with_capacity(layers);
    let mut keys_out = Vec::with_capacity(layers);
    let mut values_out = Vec::with_capacity(layers);
    let mut features = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut qs = Vec::with_capacity(n);
        let mut ks = Vec::with_capacity(n);
        let mut vs = Vec::with_capacity(n);
        for xi in &x {
            let (q, k, v) = model.project(l, xi);
            qs.push(q);
            ks.push(k);
            vs.push(v);
        }
        let mut layer_att = vec![vec![vec![0.0; n]; n]; heads];
        let mut mixed = vec![vec![0.0; dim]; n];
        for h in 0..heads {
            for m in 0..n {
                let row = attend(&qs[m][h], ks[..=m].iter().map(|k| k[h].as_slice()));
                let hd = model.config.head_dim();
                for (j, a) in row.iter().enumerate() {
                    for (o, v) in mixed[m][h * hd..(h + 1) * hd].iter_mut().zip(&vs[j][h]) {
                        *o += a * v;
                    }
                }
                layer_att[h][m][..=m].copy_from_slice(&row);
            }
        }
        for (xi, mi) in x.iter_mut().zip(&mixed) {
            for (a, b) in xi.iter_mut().zip(model.layers[l].output.apply(mi)) {
                *a += b;
            }
        }
        attention.push(layer_att);
        keys_out.push(
            (0..heads)
                .map(|h| ks.iter().map(|k| k[h].clone()).collect())
                .collect(),
        );
        values_out.push(
            (0..heads)
                .map(|h| vs.iter().map(|v| v[h].clone()).collect())
                .collect(),
        );
        features.push(x.clone());
    }

    Ok(AttentionTrace {
        meta: TraceMeta {
            layers,
            heads,
            seq_len: n,
            label: "toy".into(),
            seed: Some(seed),
        },
        attention: Some(attention),
        importance: None,
        kv: Some(KvVectors {
            keys: keys_out,
            values: values_out,
        }),
        features: Some(features),
    })
}

/// Seeded uniform token ids.
pub fn random_prompt(vocab: usize, len: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    /// Generated ids; the first comes from the prefill logits.
    pub tokens: Vec<usize>,
    /// `features[t][l]`: layer `l` output while processing generated token `t`.
    pub features: Vec<Vec<Vec<f64>>>,
    pub log: Vec<StepRecord>,
    pub prompt_trace: AttentionTrace,
}

/// Greedy decoding of `steps` tokens. `config = None` keeps the full cache.
pub fn decode(
    model: &ToyModel,
    prompt: &[usize],
    steps: usize,
    config: Option<&PrefixConfiguration>,
    options: &SimOptions,
) -> Result<DecodeOutput, SimError> {
    run_decode(model, prompt, steps, None, config, options)
}

/// Like [`decode`], but feeds `forced` tokens instead of its own predictions.
pub fn decode_forced(
    model: &ToyModel,
    prompt: &[usize],
    forced: &[usize],
    config: Option<&PrefixConfiguration>,
    options: &SimOptions,
) -> Result<DecodeOutput, SimError> {
    model.check_tokens(forced)?;
    run_decode(model, prompt, forced.len(), Some(forced), config, options)
}

fn run_decode(
    model: &ToyModel,
    prompt: &[usize],
    steps: usize,
    forced: Option<&[usize]>,
    config: Option<&PrefixConfiguration>,
    options: &SimOptions,
) -> Result<DecodeOutput, SimError> {
    let trace = forward_trace(model, prompt)?;
    let n = prompt.len();
    let full;
    let config = match config {
        Some(c) if c.seq_len == n => c.clone(),
        Some(c) => c.realize(n)?,
        None => {
            full = baseline_config(Policy::Uniform, &BudgetSpec::new(1.0)?, &trace.meta, None)?;
            full
        }
    };
    let mut state = prefill_compress(&trace, &config, options)?;
    let last = &trace.features.as_ref().expect("toy traces carry features")
        [model.config.layers - 1][n - 1];

    let mut tokens = Vec::with_capacity(steps);
    let mut features = Vec::with_capacity(steps);
    let mut log = Vec::with_capacity(steps);
    let mut next = model.predict(last);
    let hd = model.config.head_dim();
    for t in 0..steps {
        let token = forced.map_or(next, |f| f[t]);
        tokens.push(token);
        let mut x = model.input(token, n + t);
        let mut rows = Vec::with_capacity(model.config.layers);
        let mut new_kv = Vec::with_capacity(model.config.layers);
        let mut step_features = Vec::with_capacity(model.config.layers);
        for (l, cache) in state.layer_caches.iter().enumerate() {
            let (q, k, v) = model.project(l, &x);
            let mut mixed = vec![0.0; model.config.dim];
            let mut head_rows = Vec::with_capacity(model.config.heads);
            for h in 0..model.config.heads {
                let cached_keys = cache
                    .iter()
                    .map(|e| e.keys.as_ref().expect("toy caches carry keys")[h].as_slice());
                let row = attend(&q[h], cached_keys.chain(std::iter::once(k[h].as_slice())));
                let out = &mut mixed[h * hd..(h + 1) * hd];
                for (a, e) in row.iter().zip(cache) {
                    let val = &e.values.as_ref().expect("toy caches carry values")[h];
                    out.iter_mut().zip(val).for_each(|(o, v)| *o += a * v);
                }
                let own = row[cache.len()];
                out.iter_mut().zip(&v[h]).for_each(|(o, v)| *o += own * v);
                head_rows.push(row);
            }
            for (a, b) in x.iter_mut().zip(model.layers[l].output.apply(&mixed)) {
                *a += b;
            }
            step_features.push(x.clone());
            rows.push(head_rows);
            new_kv.push(TokenKv { keys: k, values: v });
        }
        log.push(state.decode_step(&rows, Some(&new_kv))?);
        features.push(step_features);
        next = model.predict(&x);
    }

    Ok(DecodeOutput {
        tokens,
        features,
        log,
        prompt_trace: trace,
    })
}

/// Index of the first position where two token streams differ.
pub fn first_divergence(a: &[usize], b: &[usize]) -> Option<usize> {
    a.iter().zip(b).position(|(x, y)| x != y)
}
