//! Global prefix configuration: per-layer retention ratios under a budget.
//!
//! Every layer keeps the shortest prefix of its priority sequence whose
//! cumulative priority reaches a shared threshold `p`. The threshold is found
//! by bisection so that the summed ratios match the budget `r * L`, then the
//! ratios are scaled and rounded so the token total is exactly
//! `round(r * L * N)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::importance::PrioritySequence;
use crate::lorenz::LayerOutOfRange;
use crate::trace::TraceMeta;

pub const DEFAULT_DELTA_TOL: f64 = 0.025;
pub const DEFAULT_MAX_STEPS: usize = 32;
pub const DEFAULT_MIN_TOKENS: usize = 1;

/// Rounding allowance on the `|delta| <= delta_tol` test, so a difference
/// landing exactly on the tolerance is accepted.
const DELTA_SLACK: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum AllocError {
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("infeasible budget: {budget_tokens} tokens cannot cover {layers} layers with at least {min_tokens} tokens each")]
    Infeasible {
        budget_tokens: usize,
        layers: usize,
        min_tokens: usize,
    },
    #[error("offline estimation needs at least one sample")]
    EmptySamples,
    #[error("sample {sample} has {got} layers, expected {expected}")]
    MismatchedLayers {
        sample: usize,
        expected: usize,
        got: usize,
    },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error(transparent)]
    Layer(#[from] LayerOutOfRange),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub r: f64,
    pub delta_tol: f64,
    pub max_steps: usize,
    pub min_tokens_per_layer: usize,
}

impl BudgetSpec {
    pub fn new(r: f64) -> Result<Self, AllocError> {
        let spec = Self {
            r,
            delta_tol: DEFAULT_DELTA_TOL,
            max_steps: DEFAULT_MAX_STEPS,
            min_tokens_per_layer: DEFAULT_MIN_TOKENS,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_delta_tol(mut self, delta_tol: f64) -> Self {
        self.delta_tol = delta_tol;
        self
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn with_min_tokens(mut self, min_tokens: usize) -> Self {
        self.min_tokens_per_layer = min_tokens;
        self
    }

    pub fn validate(&self) -> Result<(), AllocError> {
        if !(self.r > 0.0 && self.r <= 1.0) {
            return Err(AllocError::InvalidBudget(format!(
                "r must be in (0, 1], got {}",
                self.r
            )));
        }
        if self.delta_tol.is_nan() || self.delta_tol < 0.0 {
            return Err(AllocError::InvalidBudget(format!(
                "delta_tol must be nonnegative, got {}",
                self.delta_tol
            )));
        }
        if self.max_steps == 0 {
            return Err(AllocError::InvalidBudget(
                "max_steps must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `round(r * L * N)`, the exact token total of a finalized configuration.
    pub fn total_tokens(&self, layers: usize, seq_len: usize) -> usize {
        (self.r * (layers * seq_len) as f64).round() as usize
    }

    /// `r * L * N`, snapped to the nearest integer when within float noise.
    fn continuous_target(&self, layers: usize, seq_len: usize) -> f64 {
        let exact = self.r * (layers * seq_len) as f64;
        if (exact - exact.round()).abs() < 1e-9 {
            exact.round()
        } else {
            exact
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub p: f64,
    pub steps: usize,
    /// `sum_l R_l - r L` at the returned threshold.
    pub delta_final: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    PrefixKv,
    Uniform,
    Pyramid,
    Local,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::PrefixKv => "prefixkv",
            Policy::Uniform => "uniform",
            Policy::Pyramid => "pyramid",
            Policy::Local => "local",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = AllocError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prefixkv" => Ok(Policy::PrefixKv),
            "uniform" => Ok(Policy::Uniform),
            "pyramid" => Ok(Policy::Pyramid),
            "local" => Ok(Policy::Local),
            other => Err(AllocError::InvalidPolicy(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Online,
    Offline { samples: usize },
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OfflineMethod {
    #[default]
    PerSampleMean,
    PooledCurve,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixConfiguration {
    pub budget: BudgetSpec,
    /// Sequence length the token counts are realized for.
    pub seq_len: usize,
    pub ratios: Vec<f64>,
    pub token_counts: Vec<usize>,
    /// `None` for baselines.
    pub search: Option<SearchResult>,
    pub source: Source,
    pub policy: Policy,
    /// Leading positions always kept by the local policy.
    pub sink_count: Option<usize>,
}

impl PrefixConfiguration {
    pub fn layers(&self) -> usize {
        self.ratios.len()
    }

    /// Re-derives token counts for another sequence length from the stored
    /// ratios.
    pub fn realize(&self, seq_len: usize) -> Result<Self, AllocError> {
        let (ratios, token_counts) = realize_ratios(&self.ratios, seq_len, &self.budget)?;
        Ok(Self {
            seq_len,
            ratios,
            token_counts,
            ..self.clone()
        })
    }

    pub fn to_document(&self) -> ConfigDocument {
        ConfigDocument {
            budget: self.budget,
            seq_len: self.seq_len,
            p: self.search.map(|s| s.p),
            steps: self.search.map(|s| s.steps),
            converged: self.search.map(|s| s.converged),
            delta_final: self.search.map(|s| s.delta_final),
            ratios: self.ratios.clone(),
            token_counts: self.token_counts.clone(),
            source: match self.source {
                Source::Online => "online",
                Source::Offline { .. } => "offline",
                Source::Baseline => "baseline",
            }
            .into(),
            samples: match self.source {
                Source::Offline { samples } => Some(samples),
                _ => None,
            },
            policy: self.policy,
            sink_count: self.sink_count,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document())
            .expect("config serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let doc: ConfigDocument = serde_json::from_str(text)?;
        doc.try_into()
            .map_err(|e: String| serde::de::Error::custom(e))
    }
}

/// On-disk form of a [`PrefixConfiguration`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigDocument {
    pub budget: BudgetSpec,
    pub seq_len: usize,
    pub p: Option<f64>,
    pub steps: Option<usize>,
    pub converged: Option<bool>,
    #[serde(default)]
    pub delta_final: Option<f64>,
    pub ratios: Vec<f64>,
    pub token_counts: Vec<usize>,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    pub policy: Policy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sink_count: Option<usize>,
}

impl TryFrom<ConfigDocument> for PrefixConfiguration {
    type Error = String;

    fn try_from(doc: ConfigDocument) -> Result<Self, String> {
        doc.budget.validate().map_err(|e| e.to_string())?;
        if doc.ratios.len() != doc.token_counts.len() {
            return Err("ratios and token_counts differ in length".into());
        }
        let source = match doc.source.as_str() {
            "online" => Source::Online,
            "offline" => Source::Offline {
                samples: doc.samples.unwrap_or(1),
            },
            "baseline" => Source::Baseline,
            other => return Err(format!("unknown source `{other}`")),
        };
        let search = match (doc.p, doc.steps, doc.converged) {
            (Some(p), Some(steps), Some(converged)) => Some(SearchResult {
                p,
                steps,
                delta_final: doc.delta_final.unwrap_or(0.0),
                converged,
            }),
            _ => None,
        };
        if doc.policy == Policy::Local && doc.sink_count.is_none() {
            return Err("local policy requires sink_count".into());
        }
        Ok(Self {
            budget: doc.budget,
            seq_len: doc.seq_len,
            ratios: doc.ratios,
            token_counts: doc.token_counts,
            search,
            source,
            policy: doc.policy,
            sink_count: doc.sink_count,
        })
    }
}

/// Smallest prefix size whose cumulative priority reaches `p`.
///
/// `p <= 0` selects the empty prefix and `p >= 1` the full sequence.
pub fn count_at_threshold(
    seq: &PrioritySequence,
    layer: usize,
    p: f64,
) -> Result<usize, LayerOutOfRange> {
    let cum = seq.cumulative.get(layer).ok_or(LayerOutOfRange {
        layer,
        layers: seq.layers(),
    })?;
    let n = cum.len();
    if p <= 0.0 {
        return Ok(0);
    }
    if p >= 1.0 {
        return Ok(n);
    }
    // cumulative sums can fall short of 1 by rounding; the full prefix always qualifies
    Ok((cum.partition_point(|&c| c < p) + 1).min(n))
}

pub fn ratio_at_threshold(
    seq: &PrioritySequence,
    layer: usize,
    p: f64,
) -> Result<f64, LayerOutOfRange> {
    let count = count_at_threshold(seq, layer, p)?;
    Ok(count as f64 / seq.len_of(layer) as f64)
}

fn counts_at(seq: &PrioritySequence, p: f64) -> Vec<usize> {
    (0..seq.layers())
        .map(|l| count_at_threshold(seq, l, p).expect("layer index in range"))
        .collect()
}

/// Whether any layer has a cumulative value strictly between `lo` and `hi`.
fn has_breakpoint(seq: &PrioritySequence, lo: f64, hi: f64) -> bool {
    seq.cumulative.iter().any(|cum| {
        let i = cum.partition_point(|&c| c <= lo);
        i < cum.len() && cum[i] < hi
    })
}

/// Bisection on the retention threshold.
///
/// Stops when the budget difference is exactly zero, within `delta_tol`,
/// when no threshold left in the bracket changes any layer's count, or
/// after `max_steps` midpoints. A non-converged search returns the visited
/// midpoint with the smallest `|delta|` (lower `p` on ties).
pub fn binary_search(seq: &PrioritySequence, budget: &BudgetSpec) -> SearchResult {
    let layers = seq.layers();
    let n = seq.seq_len();
    debug_assert!((0..layers).all(|l| seq.len_of(l) == n));
    let target = budget.continuous_target(layers, n);
    let n_f = n as f64;

    if target >= (layers * n) as f64 {
        return SearchResult {
            p: 1.0,
            steps: 0,
            delta_final: 0.0,
            converged: true,
        };
    }

    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut best: Option<(f64, f64)> = None;
    let mut steps = 0;
    let mut flat_seen = false;
    while steps < budget.max_steps {
        let p = 0.5 * (lo + hi);
        if !(lo < p && p < hi) {
            break;
        }
        // Counts are constant on (lo, hi) when no cumulative value lies
        // inside it; once that constant is known, bisection cannot improve.
        let flat = !has_breakpoint(seq, lo, hi);
        if flat && (hi < 1.0 || flat_seen) {
            break;
        }
        flat_seen = flat;
        steps += 1;
        let kept: usize = counts_at(seq, p).iter().sum();
        let delta = (kept as f64 - target) / n_f;
        if delta == 0.0 || delta.abs() <= budget.delta_tol + DELTA_SLACK {
            return SearchResult {
                p,
                steps,
                delta_final: delta,
                converged: true,
            };
        }
        let better = match best {
            None => true,
            Some((bp, bd)) => delta.abs() < bd.abs() || (delta.abs() == bd.abs() && p < bp),
        };
        if better {
            best = Some((p, delta));
        }
        if delta < 0.0 {
            lo = p;
        } else {
            hi = p;
        }
    }
    let (p, delta_final) = best.unwrap_or((0.5, f64::NAN));
    SearchResult {
        p,
        steps,
        delta_final,
        converged: false,
    }
}

/// Scales raw ratios to the budget, clamps them to
/// `[min_tokens / N, 1]`, and rounds to integer counts summing to
/// `round(r L N)`. Returns the continuous ratios and the counts.
pub fn realize_ratios(
    raw: &[f64],
    seq_len: usize,
    budget: &BudgetSpec,
) -> Result<(Vec<f64>, Vec<usize>), AllocError> {
    budget.validate()?;
    let layers = raw.len();
    let total = budget.total_tokens(layers, seq_len);
    let min = budget.min_tokens_per_layer;
    if min > seq_len || total < layers * min {
        return Err(AllocError::Infeasible {
            budget_tokens: total,
            layers,
            min_tokens: min,
        });
    }

    let goal = budget.r * layers as f64;
    let sum: f64 = raw.iter().sum();
    let mut ratios: Vec<f64> = if sum <= 0.0 {
        vec![budget.r; layers]
    } else if (sum - goal).abs() <= 1e-12 {
        raw.to_vec()
    } else {
        raw.iter().map(|x| x * goal / sum).collect()
    };

    let floor = min as f64 / seq_len as f64;
    water_fill(
        &mut ratios,
        goal.clamp(floor * layers as f64, layers as f64),
        floor,
        1.0,
    );
    let counts = largest_remainder(&ratios, seq_len, total, min);
    Ok((ratios, counts))
}

/// Clamps into `[lo, hi]` and rescales the unclamped entries until the sum
/// reaches `goal`.
fn water_fill(x: &mut [f64], goal: f64, lo: f64, hi: f64) {
    for _ in 0..=x.len() {
        x.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        let diff = goal - x.iter().sum::<f64>();
        if diff.abs() <= 1e-12 {
            return;
        }
        let free: Vec<usize> = (0..x.len())
            .filter(|&i| if diff > 0.0 { x[i] < hi } else { x[i] > lo })
            .collect();
        if free.is_empty() {
            return;
        }
        let free_sum: f64 = free.iter().map(|&i| x[i]).sum();
        if free_sum > 0.0 {
            let factor = (free_sum + diff) / free_sum;
            free.iter().for_each(|&i| x[i] *= factor);
        } else {
            let share = diff / free.len() as f64;
            free.iter().for_each(|&i| x[i] += share);
        }
    }
    x.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
}

/// Integer counts in `[min, n]` summing to `total` that minimize
/// `sum |count - ratio * n|`, ties going to the lower layer index.
fn largest_remainder(ratios: &[f64], n: usize, total: usize, min: usize) -> Vec<usize> {
    let want: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = want
        .iter()
        .map(|w| (w.floor().max(0.0) as usize).clamp(min, n))
        .collect();
    let mut sum: usize = counts.iter().sum();
    while sum < total {
        let l = (0..counts.len())
            .filter(|&l| counts[l] < n)
            .max_by(|&a, &b| {
                let (ra, rb) = (want[a] - counts[a] as f64, want[b] - counts[b] as f64);
                ra.total_cmp(&rb).then(b.cmp(&a))
            })
            .expect("total <= L * n");
        counts[l] += 1;
        sum += 1;
    }
    while sum > total {
        let l = (0..counts.len())
            .filter(|&l| counts[l] > min)
            .min_by(|&a, &b| {
                let (ra, rb) = (want[a] - counts[a] as f64, want[b] - counts[b] as f64);
                ra.total_cmp(&rb).then(a.cmp(&b))
            })
            .expect("total >= L * min");
        counts[l] -= 1;
        sum -= 1;
    }
    counts
}

pub fn finalize_config(
    seq: &PrioritySequence,
    result: &SearchResult,
    budget: &BudgetSpec,
) -> Result<PrefixConfiguration, AllocError> {
    let n = seq.seq_len();
    let raw: Vec<f64> = counts_at(seq, result.p)
        .into_iter()
        .map(|c| c as f64 / n as f64)
        .collect();
    let (ratios, token_counts) = realize_ratios(&raw, n, budget)?;
    Ok(PrefixConfiguration {
        budget: *budget,
        seq_len: n,
        ratios,
        token_counts,
        search: Some(*result),
        source: Source::Online,
        policy: Policy::PrefixKv,
        sink_count: None,
    })
}

/// Online planning for a single sequence: search then finalize.
pub fn plan_online(
    seq: &PrioritySequence,
    budget: &BudgetSpec,
) -> Result<PrefixConfiguration, AllocError> {
    budget.validate()?;
    let result = binary_search(seq, budget);
    finalize_config(seq, &result, budget)
}

/// Evaluates a cumulative curve of length `from` as a step function on a
/// grid of `to` points.
fn resample_curve(cum: &[f64], to: usize) -> Vec<f64> {
    let from = cum.len();
    (0..to)
        .map(|k| {
            // smallest prefix of the source covering ratio (k + 1) / to
            let idx = ((k + 1) * from).div_ceil(to) - 1;
            cum[idx]
        })
        .collect()
}

/// Derives one configuration from several sample sequences ahead of time.
pub fn estimate_offline(
    samples: &[PrioritySequence],
    budget: &BudgetSpec,
    method: OfflineMethod,
) -> Result<PrefixConfiguration, AllocError> {
    budget.validate()?;
    let first = samples.first().ok_or(AllocError::EmptySamples)?;
    let layers = first.layers();
    for (i, s) in samples.iter().enumerate() {
        if s.layers() != layers {
            return Err(AllocError::MismatchedLayers {
                sample: i,
                expected: layers,
                got: s.layers(),
            });
        }
    }
    let grid = samples
        .iter()
        .map(PrioritySequence::seq_len)
        .max()
        .unwrap_or(0);
    let count = samples.len();

    let mut config = match method {
        OfflineMethod::PerSampleMean => {
            let mut sum_ratios = vec![0.0; layers];
            let (mut sum_p, mut max_steps, mut all_converged) = (0.0, 0, true);
            for s in samples {
                let online = plan_online(s, budget)?;
                for (acc, r) in sum_ratios.iter_mut().zip(&online.ratios) {
                    *acc += r;
                }
                let search = online.search.expect("online plans carry a search result");
                sum_p += search.p;
                max_steps = max_steps.max(search.steps);
                all_converged &= search.converged;
            }
            let mean: Vec<f64> = sum_ratios.iter().map(|r| r / count as f64).collect();
            let delta_final = mean.iter().sum::<f64>() - budget.r * layers as f64;
            let (ratios, token_counts) = realize_ratios(&mean, grid, budget)?;
            PrefixConfiguration {
                budget: *budget,
                seq_len: grid,
                ratios,
                token_counts,
                search: Some(SearchResult {
                    p: sum_p / count as f64,
                    steps: max_steps,
                    delta_final,
                    converged: all_converged,
                }),
                source: Source::Online,
                policy: Policy::PrefixKv,
                sink_count: None,
            }
        }
        OfflineMethod::PooledCurve => {
            let mut pooled = vec![vec![0.0; grid]; layers];
            for s in samples {
                for (l, acc) in pooled.iter_mut().enumerate() {
                    for (a, v) in acc.iter_mut().zip(resample_curve(&s.cumulative[l], grid)) {
                        *a += v;
                    }
                }
            }
            pooled
                .iter_mut()
                .flat_map(|c| c.iter_mut())
                .for_each(|v| *v /= count as f64);
            plan_online(&PrioritySequence::from_cumulative(pooled), budget)?
        }
    };
    config.source = Source::Offline { samples: count };
    Ok(config)
}

/// Fixed-shape allocations used as comparison points.
pub fn baseline_config(
    policy: Policy,
    budget: &BudgetSpec,
    meta: &TraceMeta,
    sink_count: Option<usize>,
) -> Result<PrefixConfiguration, AllocError> {
    budget.validate()?;
    let layers = meta.layers;
    let r = budget.r;
    let raw: Vec<f64> = match policy {
        Policy::Uniform | Policy::Local => vec![r; layers],
        Policy::Pyramid if layers == 1 => vec![r],
        Policy::Pyramid => {
            let spread = r.min(1.0 - r) / 2.0;
            (0..layers)
                .map(|l| r + spread * (1.0 - 2.0 * l as f64 / (layers - 1) as f64))
                .collect()
        }
        Policy::PrefixKv => {
            return Err(AllocError::InvalidPolicy(
                "prefixkv is not a baseline; use plan_online or estimate_offline".into(),
            ))
        }
    };
    let sink_count =
        match policy {
            Policy::Local => Some(sink_count.ok_or_else(|| {
                AllocError::InvalidPolicy("local policy requires sink_count".into())
            })?),
            _ => None,
        };
    let (ratios, token_counts) = realize_ratios(&raw, meta.seq_len, budget)?;
    Ok(PrefixConfiguration {
        budget: *budget,
        seq_len: meta.seq_len,
        ratios,
        token_counts,
        search: None,
        source: Source::Baseline,
        policy,
        sink_count,
    })
}
