//! Lorenz curves of priority sequences and their Gini coefficients.

use thiserror::Error;

use crate::importance::PrioritySequence;

#[derive(Debug, Error, PartialEq)]
#[error("layer {layer} out of range ({layers} layers)")]
pub struct LayerOutOfRange {
    pub layer: usize,
    pub layers: usize,
}

/// Points `(j / N, P_j)` for `j = 1..=N`; the origin is implied.
#[derive(Debug, Clone, PartialEq)]
pub struct LorenzCurve {
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub layer: usize,
    pub gini: f64,
    pub curve: LorenzCurve,
}

pub fn lorenz_curve(seq: &PrioritySequence, layer: usize) -> Result<LorenzCurve, LayerOutOfRange> {
    let cum = seq.cumulative.get(layer).ok_or(LayerOutOfRange {
        layer,
        layers: seq.layers(),
    })?;
    let n = cum.len() as f64;
    Ok(LorenzCurve {
        points: cum
            .iter()
            .enumerate()
            .map(|(j, &y)| ((j + 1) as f64 / n, y))
            .collect(),
    })
}

/// Twice the area between the curve and the equality line, trapezoidal rule
/// from the origin, clamped to `[0, 1]`.
pub fn gini(curve: &LorenzCurve) -> f64 {
    let mut area = 0.0;
    let (mut px, mut py) = (0.0, 0.0);
    for &(x, y) in &curve.points {
        area += (x - px) * (y + py) / 2.0;
        px = x;
        py = y;
    }
    (2.0 * (area - 0.5)).clamp(0.0, 1.0)
}

pub fn layer_stats(seq: &PrioritySequence) -> Vec<LayerStats> {
    (0..seq.layers())
        .map(|layer| {
            let curve = lorenz_curve(seq, layer).expect("layer index in range");
            LayerStats {
                layer,
                gini: gini(&curve),
                curve,
            }
        })
        .collect()
}
