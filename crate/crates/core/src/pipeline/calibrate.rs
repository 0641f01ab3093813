//! Seeded calibration tokens and routing-count collection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MoEModel;
use crate::routing::{RoutingTrace, TraceFile};

/// Token distributions used for calibration and evaluation. Changing the
/// preset changes which experts are hit, and therefore the allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenPreset {
    /// Standard normal vectors.
    #[default]
    Gaussian,
    /// Standard normal plus a constant offset of 0.5 on every coordinate.
    Shifted,
    /// Student-t with 3 degrees of freedom per coordinate.
    Heavy,
}

impl std::str::FromStr for TokenPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(TokenPreset::Gaussian),
            "shifted" => Ok(TokenPreset::Shifted),
            "heavy" => Ok(TokenPreset::Heavy),
            other => Err(Error::Argument(format!("unknown token preset {other:?}"))),
        }
    }
}

pub fn generate_tokens(d: usize, count: usize, seed: u64, preset: TokenPreset) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
    (0..count)
        .map(|_| {
            (0..d)
                .map(|_| match preset {
                    TokenPreset::Gaussian => normal(),
                    TokenPreset::Shifted => normal() + 0.5,
                    TokenPreset::Heavy => {
                        let z = normal();
                        let chi2: f64 = (0..3).map(|_| normal().powi(2)).sum();
                        z / (chi2 / 3.0).sqrt()
                    }
                })
                .collect()
        })
        .collect()
}

/// Route every token through every layer and count the selected experts.
/// Layers see the same token independently.
pub fn run_calibration(model: &MoEModel, tokens: &[Vec<f64>]) -> Result<TraceFile> {
    if tokens.is_empty() {
        return Err(Error::Argument("calibration needs at least one token".into()));
    }
    let mut layers = Vec::with_capacity(model.layers.len());
    for l in 0..model.layers.len() {
        let mut counts = vec![0u64; model.n_experts];
        for x in tokens {
            for (i, _) in model.route(l, x, false)? {
                counts[i] += 1;
            }
        }
        layers.push(RoutingTrace::new(l, counts));
    }
    Ok(TraceFile {
        n_experts: model.n_experts,
        layers,
    })
}
