//! Shared-basis factorization of grouped expert weights.
//!
//! Every expert `i` of group `g` is approximated as
//!
//! ```text
//! W_i ≈ A_i · φ( Σ_j α_ij · align(B_j, K_g) ) + reshape_i(P η_g)
//! ```
//!
//! where `A_i` is `p × K_g`, each basis `B_j` is `K_j × d`, `align` truncates
//! or zero-pads a basis to `K_g` rows, and the last term is the expert's slice
//! of the group residual embedded by the shared sparse projection. The
//! parameters start from the truncated SVD of the stacked group matrix and are
//! refined by Adam on the summed squared Frobenius error.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, SvdFactors};
use crate::residual::SparseProjection;
use crate::routing::GroupPlan;

/// Elementwise nonlinearity applied to the mixed basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => linalg::silu(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => linalg::silu_derivative(x),
            Activation::Identity => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Identity => "identity",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Argument(format!("unknown activation {other:?}"))),
        }
    }
}

/// Group bases `B_j`, one `K_j × d` matrix per group.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisBank {
    pub bases: Vec<Matrix>,
}

impl BasisBank {
    pub fn ranks(&self) -> Vec<usize> {
        self.bases.iter().map(Matrix::rows).collect()
    }
}

/// Expert-specific factors `A_i`, indexed by expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertFactors {
    pub factors: Vec<Matrix>,
    pub group_of: Vec<usize>,
}

/// Mixing coefficients `α`, an `n × m` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureCoefficients {
    pub alpha: Matrix,
}

/// The trainable state of one `(layer, matrix kind)` problem.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorParams {
    pub experts: ExpertFactors,
    pub bank: BasisBank,
    pub mixing: MixtureCoefficients,
    /// One residual vector per group; all empty when residuals are off.
    pub eta: Vec<Vec<f64>>,
}

impl FactorParams {
    pub fn len(&self) -> usize {
        self.experts.factors.iter().map(Matrix::len).sum::<usize>()
            + self.bank.bases.iter().map(Matrix::len).sum::<usize>()
            + self.mixing.alpha.len()
            + self.eta.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameter count per block: `[A, B, α, η]`.
    pub fn block_sizes(&self) -> [usize; 4] {
        [
            self.experts.factors.iter().map(Matrix::len).sum(),
            self.bank.bases.iter().map(Matrix::len).sum(),
            self.mixing.alpha.len(),
            self.eta.iter().map(Vec::len).sum(),
        ]
    }

    /// Flatten in block order A, B, α, η.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for a in &self.experts.factors {
            out.extend_from_slice(a.data());
        }
        for b in &self.bank.bases {
            out.extend_from_slice(b.data());
        }
        out.extend_from_slice(self.mixing.alpha.data());
        for e in &self.eta {
            out.extend_from_slice(e);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len(), "flat parameter length mismatch");
        let mut pos = 0;
        let mut fill = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[pos..pos + dst.len()]);
            pos += dst.len();
        };
        for a in &mut self.experts.factors {
            fill(a.data_mut());
        }
        for b in &mut self.bank.bases {
            fill(b.data_mut());
        }
        fill(self.mixing.alpha.data_mut());
        for e in &mut self.eta {
            fill(e);
        }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.set_flat(&vec![0.0; self.len()]);
        z
    }

    /// Round every parameter to `f32` precision, as stored on disk.
    pub fn round_to_f32(&self) -> Self {
        let mut r = self.clone();
        let flat: Vec<f64> = self.to_flat().iter().map(|&v| v as f32 as f64).collect();
        r.set_flat(&flat);
        r
    }
}

/// Truncated-SVD initialization of one group from its stacked `kp × d`
/// matrix: `A_i` are consecutive `p`-row blocks of `U_K` and the group basis
/// is `diag(S_K) Vt_K`.
pub fn init_factors(w_group: &Matrix, rank: usize, p: usize) -> Result<(Vec<Matrix>, Matrix)> {
    let f = linalg::svd(w_group)?;
    init_from_svd(&f, rank, p)
}

pub fn init_from_svd(f: &SvdFactors, rank: usize, p: usize) -> Result<(Vec<Matrix>, Matrix)> {
    let rows = f.u.rows();
    if p == 0 || !rows.is_multiple_of(p) {
        return Err(Error::Shape(format!("{rows} stacked rows are not a multiple of p={p}")));
    }
    if rank == 0 || rank > f.rank() {
        return Err(Error::Argument(format!(
            "rank {rank} exceeds the maximal rank {} of the group matrix",
            f.rank()
        )));
    }
    let (u, b) = linalg::truncated_factors(f, rank)?;
    let a = (0..rows / p).map(|s| u.row_block(s * p, p)).collect();
    Ok((a, b))
}

/// `Σ_j α_j · align(B_j, K_target)`; `align` keeps the leading rows of a
/// larger basis and zero-pads a smaller one.
pub fn mixed_basis(bank: &BasisBank, alpha_row: &[f64], target_rank: usize) -> Result<Matrix> {
    if alpha_row.len() != bank.bases.len() {
        return Err(Error::Shape(format!(
            "{} mixing coefficients for {} bases",
            alpha_row.len(),
            bank.bases.len()
        )));
    }
    let d = bank
        .bases
        .first()
        .ok_or_else(|| Error::Shape("empty basis bank".into()))?
        .cols();
    let mut out = Matrix::zeros(target_rank, d);
    for (b, &w) in bank.bases.iter().zip(alpha_row) {
        if b.cols() != d {
            return Err(Error::Shape("bases disagree on column count".into()));
        }
        if w == 0.0 {
            continue;
        }
        for r in 0..b.rows().min(target_rank) {
            for (o, &v) in out.row_mut(r).iter_mut().zip(b.row(r)) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

/// `A_i · φ(mixed basis)`, plus the expert's residual block when present.
pub fn reconstruct_expert(
    a: &Matrix,
    bank: &BasisBank,
    alpha_row: &[f64],
    residual: Option<&Matrix>,
    activation: Activation,
) -> Result<Matrix> {
    let mixed = mixed_basis(bank, alpha_row, a.cols())?;
    let z = mixed.map(|v| activation.apply(v));
    let w = a.matmul(&z)?;
    match residual {
        Some(r) => w.add(r),
        None => Ok(w),
    }
}

/// Per-expert blocks of `P η_g`, reshaped to `p × d` in group slot order.
pub fn residual_blocks(
    plan: &GroupPlan,
    eta: &[Vec<f64>],
    projection: Option<&SparseProjection>,
    p: usize,
    d: usize,
) -> Result<Vec<Option<Matrix>>> {
    let n = plan.n_experts();
    let proj = match (projection, eta.first().map_or(0, Vec::len)) {
        (Some(proj), a) if a > 0 => proj,
        (None, a) if a > 0 => return Err(Error::Shape("residual vectors without a projection".into())),
        _ => return Ok(vec![None; n]),
    };
    if proj.dim() != plan.k * p * d {
        return Err(Error::Shape(format!(
            "projection dimension {} does not match group size {}",
            proj.dim(),
            plan.k * p * d
        )));
    }
    let block = p * d;
    let mut out = vec![None; n];
    for (g, members) in plan.groups.iter().enumerate() {
        let full = proj.apply(&eta[g])?;
        for (slot, &e) in members.iter().enumerate() {
            let data = full[slot * block..(slot + 1) * block].to_vec();
            out[e] = Some(Matrix::new(p, d, data)?);
        }
    }
    Ok(out)
}

/// Decompress every expert of one `(layer, kind)` problem.
pub fn reconstruct_experts(
    plan: &GroupPlan,
    params: &FactorParams,
    activation: Activation,
    projection: Option<&SparseProjection>,
    p: usize,
    d: usize,
) -> Result<Vec<Matrix>> {
    let residuals = residual_blocks(plan, &params.eta, projection, p, d)?;
    params
        .experts
        .factors
        .iter()
        .enumerate()
        .map(|(i, a)| {
            reconstruct_expert(a, &params.bank, params.mixing.alpha.row(i), residuals[i].as_ref(), activation)
        })
        .collect()
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub activation: Activation,
    /// Steps between training-log entries.
    pub log_interval: usize,
    /// Stop once the best loss improved by less than `early_stop_tol`
    /// (relative) over this many steps. 0 disables early stopping.
    pub early_stop_window: usize,
    pub early_stop_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            activation: Activation::Silu,
            log_interval: 100,
            early_stop_window: 100,
            early_stop_tol: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| x > 0.0 && x < 1.0;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::Config(format!(
                "Adam betas ({}, {}) must lie in (0, 1)",
                self.beta1, self.beta2
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub scaled_loss: f64,
}

impl LogEntry {
    pub fn to_text(&self) -> String {
        format!("step {:>6}  loss {:.9e}  scaled {:.6e}", self.step, self.loss, self.scaled_loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best parameters seen, never worse than the starting point.
    pub params: FactorParams,
    /// Loss before every update, then the loss after the last one.
    pub history: Vec<f64>,
    pub log: Vec<LogEntry>,
    pub steps_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Fixed data of one factorization problem: target expert matrices, their
/// grouping, the activation and the optional shared residual projection.
#[derive(Debug, Clone)]
pub struct FactorProblem {
    targets: Vec<Matrix>,
    plan: GroupPlan,
    activation: Activation,
    projection: Option<Arc<SparseProjection>>,
    locate: Vec<(usize, usize)>,
    p: usize,
    d: usize,
    target_std: f64,
}

impl FactorProblem {
    pub fn new(
        targets: Vec<Matrix>,
        plan: GroupPlan,
        activation: Activation,
        projection: Option<Arc<SparseProjection>>,
    ) -> Result<Self> {
        let (p, d) = targets
            .first()
            .ok_or_else(|| Error::Shape("no expert matrices".into()))?
            .shape();
        if let Some(bad) = targets.iter().find(|t| t.shape() != (p, d)) {
            return Err(Error::Shape(format!(
                "expert shapes disagree: {p}x{d} vs {}x{}",
                bad.rows(),
                bad.cols()
            )));
        }
        plan.validate(targets.len())?;
        if let Some(proj) = &projection {
            if proj.dim() != plan.k * p * d {
                return Err(Error::Shape(format!(
                    "projection dimension {} does not match group size {}",
                    proj.dim(),
                    plan.k * p * d
                )));
            }
        }
        let locate = plan.locate();
        let count = (targets.len() * p * d) as f64;
        let mean = targets.iter().flat_map(|t| t.data()).sum::<f64>() / count;
        let var = targets
            .iter()
            .flat_map(|t| t.data())
            .map(|v| (v - mean).powi(2))
            .sum::<f64>()
            / count;
        Ok(Self {
            targets,
            plan,
            activation,
            projection,
            locate,
            p,
            d,
            target_std: var.sqrt(),
        })
    }

    pub fn targets(&self) -> &[Matrix] {
        &self.targets
    }

    pub fn plan(&self) -> &GroupPlan {
        &self.plan
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn projection(&self) -> Option<&Arc<SparseProjection>> {
        self.projection.as_ref()
    }

    pub fn n_experts(&self) -> usize {
        self.targets.len()
    }

    /// Stacked `kp × d` matrix of group `g` in plan order.
    pub fn group_matrix(&self, g: usize) -> Matrix {
        let blocks: Vec<&Matrix> = self.plan.groups[g].iter().map(|&e| &self.targets[e]).collect();
        Matrix::vstack(&blocks).expect("expert shapes validated")
    }

    pub fn element_count(&self) -> usize {
        self.targets.len() * self.p * self.d
    }

    /// Standard deviation of all target entries.
    pub fn target_std(&self) -> f64 {
        self.target_std
    }

    /// `sqrt(loss / elements) / std(targets)`.
    pub fn scaled_loss(&self, loss: f64) -> f64 {
        scaled_loss(loss, self.element_count(), self.target_std)
    }

    /// Assemble initial parameters from per-group `(A blocks, basis)` pairs,
    /// with one-hot mixing on the owning group and zero residuals.
    pub fn params_from_groups(
        &self,
        groups: Vec<(Vec<Matrix>, Matrix)>,
        residual_dim: usize,
    ) -> Result<FactorParams> {
        let m = self.plan.m;
        if groups.len() != m {
            return Err(Error::Shape(format!("{} initialized groups for m={m}", groups.len())));
        }
        if residual_dim > 0 {
            match &self.projection {
                Some(p) if p.residual_dim() == residual_dim => {}
                _ => {
                    return Err(Error::Shape(format!(
                        "residual dimension {residual_dim} has no matching projection"
                    )))
                }
            }
        }
        let n = self.n_experts();
        let mut factors = vec![Matrix::zeros(1, 1); n];
        let mut bases = Vec::with_capacity(m);
        for (g, (blocks, basis)) in groups.into_iter().enumerate() {
            if blocks.len() != self.plan.k || basis.cols() != self.d {
                return Err(Error::Shape(format!("group {g} initialization has wrong shape")));
            }
            for (slot, a) in blocks.into_iter().enumerate() {
                if a.shape() != (self.p, basis.rows()) {
                    return Err(Error::Shape(format!("factor of group {g} slot {slot} has wrong shape")));
                }
                factors[self.plan.groups[g][slot]] = a;
            }
            bases.push(basis);
        }
        let group_of: Vec<usize> = self.locate.iter().map(|l| l.0).collect();
        let alpha = Matrix::from_fn(n, m, |i, j| if group_of[i] == j { 1.0 } else { 0.0 });
        Ok(FactorParams {
            experts: ExpertFactors { factors, group_of },
            bank: BasisBank { bases },
            mixing: MixtureCoefficients { alpha },
            eta: vec![vec![0.0; residual_dim]; m],
        })
    }

    /// Truncated-SVD initialization at the given per-group ranks.
    pub fn initialize(&self, ranks: &[usize], residual_dim: usize) -> Result<FactorParams> {
        if ranks.len() != self.plan.m {
            return Err(Error::Shape(format!("{} ranks for {} groups", ranks.len(), self.plan.m)));
        }
        let groups = ranks
            .iter()
            .enumerate()
            .map(|(g, &k)| init_factors(&self.group_matrix(g), k, self.p))
            .collect::<Result<Vec<_>>>()?;
        self.params_from_groups(groups, residual_dim)
    }

    fn check_params(&self, params: &FactorParams) -> Result<()> {
        let n = self.n_experts();
        let m = self.plan.m;
        if params.experts.factors.len() != n
            || params.bank.bases.len() != m
            || params.mixing.alpha.shape() != (n, m)
            || params.eta.len() != m
        {
            return Err(Error::Shape("parameter block counts do not match the problem".into()));
        }
        for (i, a) in params.experts.factors.iter().enumerate() {
            let g = self.locate[i].0;
            if a.shape() != (self.p, params.bank.bases[g].rows()) {
                return Err(Error::Shape(format!("factor of expert {i} has shape {:?}", a.shape())));
            }
        }
        if params.bank.bases.iter().any(|b| b.cols() != self.d) {
            return Err(Error::Shape("basis column count differs from d".into()));
        }
        let a_len = params.eta[0].len();
        if params.eta.iter().any(|e| e.len() != a_len) {
            return Err(Error::Shape("residual vectors differ in length".into()));
        }
        if a_len > 0 {
            match &self.projection {
                Some(p) if p.residual_dim() == a_len => {}
                _ => return Err(Error::Shape("residual vectors without a matching projection".into())),
            }
        }
        Ok(())
    }

    /// Residual block `reshape_i(P η_g)` of every expert, `None` when
    /// residuals are off.
    pub fn residual_blocks(&self, params: &FactorParams) -> Result<Vec<Option<Matrix>>> {
        residual_blocks(&self.plan, &params.eta, self.projection.as_deref(), self.p, self.d)
    }

    /// Approximation of every expert matrix.
    pub fn reconstruct(&self, params: &FactorParams) -> Result<Vec<Matrix>> {
        self.check_params(params)?;
        reconstruct_experts(&self.plan, params, self.activation, self.projection.as_deref(), self.p, self.d)
    }

    /// `Σ_i ||W_i − Ŵ_i||_F²`.
    pub fn loss(&self, params: &FactorParams) -> Result<f64> {
        let approx = self.reconstruct(params)?;
        self
            .targets
            .iter()
            .zip(&approx)
            .map(|(w, a)| w.sub(a).map(|r| r.frobenius_norm_sq()))
            .sum::<Result<f64>>()
    }

    /// Per-group share of the loss.
    pub fn group_losses(&self, params: &FactorParams) -> Result<Vec<f64>> {
        let approx = self.reconstruct(params)?;
        Ok(self
            .plan
            .groups
            .iter()
            .map(|members| {
                members
                    .iter()
                    .map(|&e| self.targets[e].zip_map(&approx[e], |a, b| a - b).frobenius_norm_sq())
                    .sum()
            })
            .collect())
    }

    /// Loss and its analytic gradient with respect to every parameter block.
    pub fn loss_and_gradients(&self, params: &FactorParams) -> Result<(f64, FactorParams)> {
        self.check_params(params)?;
        let residuals = self.residual_blocks(params)?;
        let mut grad = params.zeros_like();
        let mut loss = 0.0;
        let m = self.plan.m;
        let mut r_blocks: Vec<Matrix> = Vec::with_capacity(self.n_experts());

        for i in 0..self.n_experts() {
            let a = &params.experts.factors[i];
            let rank = a.cols();
            let alpha_row = params.mixing.alpha.row(i);
            let mixed = mixed_basis(&params.bank, alpha_row, rank)?;
            let z = mixed.map(|v| self.activation.apply(v));
            let mut approx = a.mul_unchecked(&z);
            if let Some(res) = &residuals[i] {
                approx.axpy(1.0, res);
            }
            let r = approx.zip_map(&self.targets[i], |x, w| x - w);
            loss += r.frobenius_norm_sq();

            grad.experts.factors[i] = r.mul_transposed(&z).scale(2.0);
            let g_z = a.transposed_mul(&r);
            let g_mixed = g_z.zip_map(&mixed, |gz, mv| 2.0 * gz * self.activation.derivative(mv));

            for j in 0..m {
                let basis = &params.bank.bases[j];
                let shared = basis.rows().min(rank);
                let mut g_alpha = 0.0;
                for row in 0..shared {
                    g_alpha += linalg::dot(g_mixed.row(row), basis.row(row));
                }
                grad.mixing.alpha.set(i, j, g_alpha);
                let w = alpha_row[j];
                if w != 0.0 {
                    let gb = &mut grad.bank.bases[j];
                    for row in 0..shared {
                        for (o, &v) in gb.row_mut(row).iter_mut().zip(g_mixed.row(row)) {
                            *o += w * v;
                        }
                    }
                }
            }
            r_blocks.push(r);
        }

        if let (Some(proj), true) = (&self.projection, !params.eta[0].is_empty()) {
            for (g, members) in self.plan.groups.iter().enumerate() {
                let mut v = Vec::with_capacity(proj.dim());
                for &e in members {
                    v.extend(r_blocks[e].data().iter().map(|x| 2.0 * x));
                }
                grad.eta[g] = proj.adjoint(&v)?;
            }
        }
        Ok((loss, grad))
    }

    /// Adam refinement for `config.steps` updates. Returns the best
    /// parameters seen, so the final loss never exceeds the initial one.
    pub fn train(&self, init: &FactorParams, config: &TrainConfig) -> Result<TrainOutcome> {
        config.validate()?;
        if config.activation != self.activation {
            return Err(Error::Config(format!(
                "train config activation {} differs from problem activation {}",
                config.activation.as_str(),
                self.activation.as_str()
            )));
        }
        let mut params = init.clone();
        let mut flat = params.to_flat();
        let mut adam = Adam::new(
            flat.len(),
            config.learning_rate,
            config.beta1,
            config.beta2,
            config.epsilon,
        );
        let mut history = Vec::with_capacity(config.steps + 1);
        let mut best_history: Vec<f64> = Vec::with_capacity(config.steps + 1);
        let mut log = Vec::new();
        let mut best = (f64::INFINITY, flat.clone());
        let mut steps_run = 0;

        for step in 0..=config.steps {
            params.set_flat(&flat);
            let (loss, grad) = self.loss_and_gradients(&params)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    learning_rate: config.learning_rate,
                    context: String::new(),
                });
            }
            history.push(loss);
            if loss < best.0 {
                best = (loss, flat.clone());
            }
            best_history.push(best.0);
            if config.log_interval > 0 && (step % config.log_interval == 0 || step == config.steps) {
                log.push(LogEntry {
                    step,
                    loss,
                    scaled_loss: self.scaled_loss(loss),
                });
            }
            if step == config.steps || best.0 == 0.0 {
                break;
            }
            let w = config.early_stop_window;
            if w > 0 && step >= w {
                let before = best_history[step - w];
                if before - best.0 <= config.early_stop_tol * before {
                    break;
                }
            }
            adam.step(&mut flat, &grad.to_flat());
            steps_run += 1;
        }

        params.set_flat(&best.1);
        let initial_loss = history[0];
        Ok(TrainOutcome {
            params,
            history,
            log,
            steps_run,
            initial_loss,
            final_loss: best.0,
        })
    }

    /// Worst relative error between analytic gradients and central
    /// differences over `points` parameters sampled uniformly.
    pub fn finite_difference_check(
        &self,
        params: &FactorParams,
        h: f64,
        points: usize,
        seed: u64,
    ) -> Result<f64> {
        check_step(h)?;
        let n = params.len();
        if points == 0 || n == 0 {
            return Ok(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx: Vec<usize> = (0..points).map(|_| rng.random_range(0..n)).collect();
        self.fd_errors(params, h, &idx).map(|e| e.into_iter().fold(0.0, f64::max))
    }

    /// Worst relative error per block `[A, B, α, η]`, checking every
    /// parameter. Empty blocks report 0.
    pub fn finite_difference_blocks(&self, params: &FactorParams, h: f64) -> Result<[f64; 4]> {
        check_step(h)?;
        let idx: Vec<usize> = (0..params.len()).collect();
        let errs = self.fd_errors(params, h, &idx)?;
        let mut out = [0.0; 4];
        let mut start = 0;
        for (b, size) in params.block_sizes().into_iter().enumerate() {
            out[b] = errs[start..start + size].iter().cloned().fold(0.0, f64::max);
            start += size;
        }
        Ok(out)
    }

    fn fd_errors(&self, params: &FactorParams, h: f64, idx: &[usize]) -> Result<Vec<f64>> {
        let (_, grad) = self.loss_and_gradients(params)?;
        let analytic = grad.to_flat();
        let base = params.to_flat();
        let mut probe = params.clone();
        let mut flat = base.clone();
        idx.iter()
            .map(|&i| {
                flat[i] = base[i] + h;
                probe.set_flat(&flat);
                let plus = self.loss(&probe)?;
                flat[i] = base[i] - h;
                probe.set_flat(&flat);
                let minus = self.loss(&probe)?;
                flat[i] = base[i];
                let numeric = (plus - minus) / (2.0 * h);
                Ok(relative_error(analytic[i], numeric))
            })
            .collect()
    }
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Argument(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

/// `|a − b| / max(|a|, |b|, 1e-6)`; the floor keeps near-zero gradients from
/// turning round-off into large relative errors.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Per-element RMS error divided by the standard deviation of the targets.
pub fn scaled_loss(loss: f64, elements: usize, target_std: f64) -> f64 {
    if loss == 0.0 {
        return 0.0;
    }
    (loss / elements as f64).sqrt() / target_std.max(1e-30)
}
