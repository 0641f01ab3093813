//! Information density scoring and rank allocation.
//!
//! The effective rank of a group matrix is `exp(H)` where `H` is the Shannon
//! entropy (natural log) of its normalized squared singular values. It is
//! normalized across groups, blended with the group routing frequency, and the
//! blended score splits a global rank budget between groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Squared-spectrum mass below which a term contributes `0 * log 0 = 0`.
const PROB_FLOOR: f64 = 1e-15;

/// Slack added before flooring `K_total * C_g` so that values such as
/// `10 * 0.4 / 1.0000000000000002` floor to 4 and not 3.
const FLOOR_SLACK: f64 = 1e-9;

/// Effective rank `exp(-sum p_i ln p_i)` with `p_i = s_i^2 / sum s_j^2`.
pub fn effective_rank(singular_values: &[f64]) -> Result<f64> {
    if let Some(bad) = singular_values.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(Error::Argument(format!("singular value {bad} is not a finite nonnegative number")));
    }
    let energy: f64 = singular_values.iter().map(|s| s * s).sum();
    if energy <= 0.0 {
        return Err(Error::DegenerateMatrix("all singular values are zero".into()));
    }
    let entropy: f64 = singular_values
        .iter()
        .map(|s| s * s / energy)
        .filter(|&p| p >= PROB_FLOOR)
        .map(|p| -p * p.ln())
        .sum();
    Ok(entropy.exp())
}

/// `E_g = R_g / sum_b R_b`.
pub fn normalized_effective_ranks(eff_ranks: &[f64]) -> Result<Vec<f64>> {
    if eff_ranks.is_empty() || eff_ranks.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::Argument("effective ranks must be positive".into()));
    }
    let total: f64 = eff_ranks.iter().sum();
    Ok(eff_ranks.iter().map(|r| r / total).collect())
}

/// `C_g = xi * E_g + (1 - xi) * F_g`.
pub fn fuse_importance(e: &[f64], f: &[f64], xi: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&xi) {
        return Err(Error::Argument(format!("fusion weight {xi} outside [0, 1]")));
    }
    if e.len() != f.len() {
        return Err(Error::Shape(format!(
            "{} effective-rank scores vs {} frequencies",
            e.len(),
            f.len()
        )));
    }
    Ok(e.iter().zip(f).map(|(e, f)| xi * e + (1.0 - xi) * f).collect())
}

/// Per-group importance of one `(layer, kind)` problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub eff_ranks: Vec<f64>,
    pub e: Vec<f64>,
    pub f: Vec<f64>,
    pub c: Vec<f64>,
    pub xi: f64,
}

impl ImportanceScores {
    pub fn compute(eff_ranks: Vec<f64>, group_freqs: Vec<f64>, xi: f64) -> Result<Self> {
        let e = normalized_effective_ranks(&eff_ranks)?;
        let c = fuse_importance(&e, &group_freqs, xi)?;
        Ok(Self {
            eff_ranks,
            e,
            f: group_freqs,
            c,
            xi,
        })
    }
}

/// Float-parameter budget for one matrix kind of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankBudget {
    pub original_params: usize,
    pub target_params: usize,
    /// Residual vector length `a` per group (0 disables residuals).
    pub residual_dim: usize,
    pub mixing_params: usize,
    /// Parameters per retained rank of one group: `k*p + d`.
    pub per_rank_params: usize,
    pub k_total: usize,
}

/// Translate a compression ratio into a total rank budget.
///
/// Counts A-block columns and B rows (`k*p + d` per rank), the `n*m` mixing
/// coefficients and one residual vector of `floor(residual_fraction*k*p*d)`
/// entries per group.
pub fn rank_budget(
    n: usize,
    k: usize,
    p: usize,
    d: usize,
    ratio: f64,
    residual_fraction: f64,
) -> Result<RankBudget> {
    if k == 0 || n == 0 || !n.is_multiple_of(k) {
        return Err(Error::Config(format!("group size {k} must divide the expert count {n}")));
    }
    if p == 0 || d == 0 {
        return Err(Error::Argument("matrix dimensions must be positive".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Argument(format!("compression ratio {ratio} outside (0, 1)")));
    }
    if !(0.0..1.0).contains(&residual_fraction) {
        return Err(Error::Argument(format!(
            "residual fraction {residual_fraction} outside [0, 1)"
        )));
    }
    let m = n / k;
    let original = n * p * d;
    let target = ((1.0 - ratio) * original as f64).floor() as usize;
    let residual_dim = (residual_fraction * (k * p * d) as f64).floor() as usize;
    let mixing = n * m;
    let per_rank = k * p + d;
    let fixed = m * residual_dim + mixing;
    let k_total = target.saturating_sub(fixed) / per_rank;
    if target < fixed || k_total < m {
        return Err(Error::InfeasibleRatio(format!(
            "ratio {ratio} leaves {target} of {original} parameters; {fixed} go to mixing and \
             residual terms and {m} groups need at least {} more for rank 1 each",
            m * per_rank
        )));
    }
    Ok(RankBudget {
        original_params: original,
        target_params: target,
        residual_dim,
        mixing_params: mixing,
        per_rank_params: per_rank,
        k_total,
    })
}

/// Retained ranks per group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankAllocation {
    pub k_total: usize,
    /// `max(1, floor(K_total * C_g / sum C))` before clamping and repair.
    pub raw: Vec<usize>,
    pub ranks: Vec<usize>,
}

impl RankAllocation {
    pub fn total(&self) -> usize {
        self.ranks.iter().sum()
    }
}

/// Proportional allocation `K_g = max(1, floor(K_total * C_g / sum C))`,
/// clamped to each group's maximal rank. If the `max(1, .)` floor pushes the
/// sum over budget, the largest group (lowest index on ties) is decremented
/// until the budget holds.
pub fn allocate_ranks(c: &[f64], k_total: usize, r_max: &[usize]) -> Result<RankAllocation> {
    let m = c.len();
    if r_max.len() != m {
        return Err(Error::Shape(format!("{m} scores vs {} rank caps", r_max.len())));
    }
    if m == 0 || k_total < m {
        return Err(Error::InfeasibleRatio(format!(
            "rank budget {k_total} cannot give {m} groups rank 1"
        )));
    }
    if c.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Argument("importance scores must be finite and nonnegative".into()));
    }
    if r_max.contains(&0) {
        return Err(Error::Argument("rank caps must be positive".into()));
    }
    let sum: f64 = c.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Argument("importance scores sum to zero".into()));
    }
    let raw: Vec<usize> = c
        .iter()
        .map(|&cg| ((k_total as f64 * cg / sum + FLOOR_SLACK).floor() as usize).max(1))
        .collect();
    let mut ranks: Vec<usize> = raw.iter().zip(r_max).map(|(&k, &cap)| k.min(cap)).collect();
    while ranks.iter().sum::<usize>() > k_total {
        let (idx, _) = ranks
            .iter()
            .enumerate()
            .fold((0, 0), |best, (i, &k)| if k > best.1 { (i, k) } else { best });
        if ranks[idx] <= 1 {
            break;
        }
        ranks[idx] -= 1;
    }
    Ok(RankAllocation {
        k_total,
        raw,
        ranks,
    })
}

/// Equal split of the whole budget: `floor(K_total / m)` per group, with the
/// remainder handed out one rank at a time from group 0, then clamped to the
/// caps. Used as the baseline for the adaptive split.
pub fn allocate_uniform(m: usize, k_total: usize, r_max: &[usize]) -> Result<RankAllocation> {
    if r_max.len() != m {
        return Err(Error::Shape(format!("{m} groups vs {} rank caps", r_max.len())));
    }
    if m == 0 || k_total < m {
        return Err(Error::InfeasibleRatio(format!(
            "rank budget {k_total} cannot give {m} groups rank 1"
        )));
    }
    let raw: Vec<usize> = (0..m).map(|g| k_total / m + usize::from(g < k_total % m)).collect();
    let ranks = raw.iter().zip(r_max).map(|(&k, &cap)| k.min(cap)).collect();
    Ok(RankAllocation {
        k_total,
        raw,
        ranks,
    })
}
