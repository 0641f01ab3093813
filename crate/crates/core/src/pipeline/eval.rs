//! Reconstruction and forward-pass error of a compressed model.

use serde::{Deserialize, Serialize};

use super::CompressedModel;
use crate::error::{Error, Result};
use crate::io::{parameter_report, ParameterReport};
use crate::linalg::{norm2, Matrix};
use crate::model::MoEModel;
use crate::MatrixKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEval {
    pub layer: usize,
    pub kind: MatrixKind,
    pub group: usize,
    pub experts: Vec<usize>,
    pub rank: usize,
    /// `||W_g − Ŵ_g||_F / ||W_g||_F` over the stacked group matrix.
    pub relative_error: f64,
    pub loss: f64,
    /// `sqrt(loss / elements) / std(W_g)`.
    pub scaled_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindEval {
    pub layer: usize,
    pub kind: MatrixKind,
    /// `Σ_i F_i ||W_i − Ŵ_i||_F / ||W_i||_F`.
    pub weighted_error: f64,
    pub loss: f64,
    pub scaled_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tokens: usize,
    pub renorm_gates: bool,
    pub groups: Vec<GroupEval>,
    pub kinds: Vec<KindEval>,
    /// Mean of the per-`(layer, kind)` weighted errors.
    pub weighted_error: f64,
    /// Mean over held-out tokens and layers of
    /// `||y − ŷ||_2 / max(||y||_2, 1e-30)`.
    pub forward_error: f64,
    /// `forward_error` to six significant digits.
    pub forward_error_text: String,
    pub parameters: ParameterReport,
}

fn ratio_or_zero(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den.max(1e-30)
    }
}

fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn rel_frobenius(w: &Matrix, approx: &Matrix) -> Result<f64> {
    Ok(ratio_or_zero(w.sub(approx)?.frobenius_norm(), w.frobenius_norm()))
}

/// Mean relative output error of `approx` against `original`.
pub fn forward_error(
    original: &MoEModel,
    approx: &MoEModel,
    tokens: &[Vec<f64>],
    renorm_gates: bool,
) -> Result<f64> {
    if !original.same_architecture(approx) {
        return Err(Error::Shape("models differ in architecture".into()));
    }
    if tokens.is_empty() {
        return Err(Error::Argument("evaluation needs at least one token".into()));
    }
    let mut total = 0.0;
    for l in 0..original.layers.len() {
        for x in tokens {
            let y = original.forward(l, x, renorm_gates)?;
            let yh = approx.forward(l, x, renorm_gates)?;
            let diff: Vec<f64> = y.iter().zip(&yh).map(|(a, b)| a - b).collect();
            total += norm2(&diff) / norm2(&y).max(1e-30);
        }
    }
    Ok(total / (tokens.len() * original.layers.len()) as f64)
}

pub fn evaluate(
    original: &MoEModel,
    compressed: &CompressedModel,
    tokens: &[Vec<f64>],
    renorm_gates: bool,
) -> Result<EvalReport> {
    let parameters = parameter_report(original, compressed)?;
    let approx = compressed.decompress()?;
    let mut groups = Vec::new();
    let mut kinds = Vec::new();
    for (l, layer) in compressed.layers.iter().enumerate() {
        for c in &layer.kinds {
            let targets = original.expert_matrices(l, c.kind);
            let approx_kind = approx.expert_matrices(l, c.kind);
            let mut weighted = 0.0;
            let mut loss = 0.0;
            for (i, (w, a)) in targets.iter().zip(&approx_kind).enumerate() {
                weighted += layer.expert_frequencies[i] * rel_frobenius(w, a)?;
                loss += w.sub(a)?.frobenius_norm_sq();
            }
            let all: Vec<f64> = targets.iter().flat_map(|t| t.data().iter().copied()).collect();
            kinds.push(KindEval {
                layer: l,
                kind: c.kind,
                weighted_error: weighted,
                loss,
                scaled_loss: ratio_or_zero((loss / all.len() as f64).sqrt(), std_dev(&all)),
            });
            for (g, members) in c.plan.groups.iter().enumerate() {
                let w = Matrix::vstack(&members.iter().map(|&e| &targets[e]).collect::<Vec<_>>())?;
                let a = Matrix::vstack(&members.iter().map(|&e| &approx_kind[e]).collect::<Vec<_>>())?;
                let loss = w.sub(&a)?.frobenius_norm_sq();
                groups.push(GroupEval {
                    layer: l,
                    kind: c.kind,
                    group: g,
                    experts: members.clone(),
                    rank: c.allocation.ranks[g],
                    relative_error: rel_frobenius(&w, &a)?,
                    loss,
                    scaled_loss: ratio_or_zero((loss / w.len() as f64).sqrt(), std_dev(w.data())),
                });
            }
        }
    }
    let weighted_error = kinds.iter().map(|k| k.weighted_error).sum::<f64>() / kinds.len() as f64;
    let forward_error = forward_error(original, &approx, tokens, renorm_gates)?;
    Ok(EvalReport {
        tokens: tokens.len(),
        renorm_gates,
        groups,
        kinds,
        weighted_error,
        forward_error,
        forward_error_text: format!("{forward_error:.5e}"),
        parameters,
    })
}
