//! End-to-end compression: calibration, grouping, scoring, allocation,
//! factorization, residual training and evaluation.

mod calibrate;
mod eval;

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{
    init_from_svd, reconstruct_experts, Activation, FactorParams, FactorProblem, LogEntry,
    TrainConfig,
};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{ExpertWeights, MoELayer, MoEModel};
use crate::residual::{build_projection, SparseProjection};
use crate::routing::{build_group_plan, expert_frequencies, group_frequencies, GroupPlan, TraceFile};
use crate::spectral::{
    allocate_ranks, allocate_uniform, effective_rank, rank_budget, ImportanceScores, RankAllocation, RankBudget,
};
use crate::MatrixKind;

pub use calibrate::{generate_tokens, run_calibration, TokenPreset};
pub use eval::{evaluate, forward_error, EvalReport, GroupEval, KindEval};

/// Environment variable capping the worker count; `0` or unset means one
/// worker per core.
pub const THREADS_ENV: &str = "RFID_THREADS";

/// How the total rank budget is split between groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AllocationMode {
    /// Proportional to the fused importance score.
    #[default]
    Adaptive,
    /// The same budget split evenly between groups.
    Uniform,
    /// Every group keeps its maximal rank; the ratio is ignored and the
    /// factorized form may be larger than the original.
    Full,
}

impl std::str::FromStr for AllocationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(AllocationMode::Adaptive),
            "uniform" => Ok(AllocationMode::Uniform),
            "full" => Ok(AllocationMode::Full),
            other => Err(Error::Argument(format!("unknown allocation mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub ratio: f64,
    pub xi: f64,
    pub k: usize,
    pub residual_fraction: f64,
    pub allocation: AllocationMode,
    pub train: TrainConfig,
    /// Base seed of the residual projections.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ratio: 0.4,
            xi: 0.7,
            k: 4,
            residual_fraction: 0.03,
            allocation: AllocationMode::Adaptive,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.xi) {
            return Err(Error::Argument(format!("fusion weight {} outside [0, 1]", self.xi)));
        }
        if self.k == 0 {
            return Err(Error::Argument("group size must be positive".into()));
        }
        if self.allocation != AllocationMode::Full && !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Argument(format!("compression ratio {} outside (0, 1)", self.ratio)));
        }
        if !(0.0..1.0).contains(&self.residual_fraction) {
            return Err(Error::Argument(format!(
                "residual fraction {} outside [0, 1)",
                self.residual_fraction
            )));
        }
        self.train.validate()
    }
}

/// Seed of the projection for one kind, shared by every layer.
pub fn projection_seed(base: u64, kind: MatrixKind) -> u64 {
    splitmix64(base ^ kind.tag().wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Losses of one factorization problem at each stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KindStats {
    /// Loss with every factor zero, `Σ ||W_i||²`.
    pub zero_loss: f64,
    pub init_loss: f64,
    pub trained_loss: f64,
    /// Loss after rounding the parameters to `f32` for storage.
    pub stored_loss: f64,
    pub scaled_loss: f64,
    pub steps_run: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedKind {
    pub kind: MatrixKind,
    pub plan: GroupPlan,
    pub importance: ImportanceScores,
    pub budget: RankBudget,
    pub allocation: RankAllocation,
    pub params: FactorParams,
    pub stats: KindStats,
    pub log: Vec<LogEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayer {
    pub expert_frequencies: Vec<f64>,
    pub kinds: Vec<CompressedKind>,
    pub down: Vec<Matrix>,
    pub router: Matrix,
}

impl CompressedLayer {
    pub fn kind(&self, kind: MatrixKind) -> Result<&CompressedKind> {
        self.kinds
            .iter()
            .find(|c| c.kind == kind)
            .ok_or_else(|| Error::Shape(format!("layer has no compressed {kind} matrices")))
    }
}

/// In-memory compressed artifact. Parameters are already rounded to `f32`,
/// so saving and loading reproduces it exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedModel {
    pub n_experts: usize,
    pub d: usize,
    pub p: usize,
    pub top_k: usize,
    pub config: PipelineConfig,
    pub projections: Vec<(MatrixKind, Arc<SparseProjection>)>,
    pub layers: Vec<CompressedLayer>,
    pub trace: TraceFile,
}

impl CompressedModel {
    pub fn projection(&self, kind: MatrixKind) -> Option<&SparseProjection> {
        self.projections
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, p)| p.as_ref())
    }

    pub fn activation(&self) -> Activation {
        self.config.train.activation
    }

    /// Approximate up or gate matrices of every expert in one layer.
    pub fn reconstruct(&self, layer: usize, kind: MatrixKind) -> Result<Vec<Matrix>> {
        let l = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Argument(format!("layer {layer} out of range")))?;
        let c = l.kind(kind)?;
        reconstruct_experts(&c.plan, &c.params, self.activation(), self.projection(kind), self.p, self.d)
    }

    /// Dense model with every compressed matrix replaced by its
    /// approximation.
    pub fn decompress(&self) -> Result<MoEModel> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let up = self.reconstruct(l, MatrixKind::Up)?;
            let gate = self.reconstruct(l, MatrixKind::Gate)?;
            let experts = up
                .into_iter()
                .zip(gate)
                .zip(&layer.down)
                .map(|((up, gate), down)| ExpertWeights {
                    up,
                    gate,
                    down: down.clone(),
                })
                .collect();
            layers.push(MoELayer {
                experts,
                router: layer.router.clone(),
            });
        }
        let model = MoEModel {
            n_experts: self.n_experts,
            d: self.d,
            p: self.p,
            top_k: self.top_k,
            layers,
        };
        model.validate()?;
        Ok(model)
    }
}

/// Everything decided before training for one `(layer, kind)` item.
struct Prepared {
    layer: usize,
    kind: MatrixKind,
    problem: FactorProblem,
    importance: ImportanceScores,
    budget: RankBudget,
    allocation: RankAllocation,
    init: FactorParams,
}

fn prepare(
    model: &MoEModel,
    layer: usize,
    kind: MatrixKind,
    freqs: &[f64],
    trace: &TraceFile,
    config: &PipelineConfig,
    projection: Option<Arc<SparseProjection>>,
) -> Result<Prepared> {
    let (n, p, d, k) = (model.n_experts, model.p, model.d, config.k);
    let plan = build_group_plan(freqs, k)?;
    let layer_trace = trace
        .layer(layer)
        .ok_or_else(|| Error::Argument(format!("trace has no counts for layer {layer}")))?;
    let group_freqs = group_frequencies(layer_trace, &plan)?;
    let problem = FactorProblem::new(
        model.expert_matrices(layer, kind),
        plan.clone(),
        config.train.activation,
        projection,
    )?;
    let svds = (0..plan.m)
        .map(|g| linalg::svd(&problem.group_matrix(g)))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.with_context(&format!("layer {layer} {kind}")))?;
    let eff = svds
        .iter()
        .map(|f| effective_rank(&f.s))
        .collect::<Result<Vec<_>>>()?;
    let importance = ImportanceScores::compute(eff, group_freqs, config.xi)?;

    let r_max = (k * p).min(d);
    let (budget, allocation) = match config.allocation {
        AllocationMode::Full => {
            let residual_dim = (config.residual_fraction * (k * p * d) as f64).floor() as usize;
            let per_rank = k * p + d;
            let k_total = plan.m * r_max;
            let budget = RankBudget {
                original_params: n * p * d,
                target_params: k_total * per_rank + n * plan.m + plan.m * residual_dim,
                residual_dim,
                mixing_params: n * plan.m,
                per_rank_params: per_rank,
                k_total,
            };
            let ranks = vec![r_max; plan.m];
            (
                budget,
                RankAllocation {
                    k_total,
                    raw: ranks.clone(),
                    ranks,
                },
            )
        }
        mode => {
            let budget = rank_budget(n, k, p, d, config.ratio, config.residual_fraction)?;
            let caps = vec![r_max; plan.m];
            let allocation = match mode {
                AllocationMode::Uniform => allocate_uniform(plan.m, budget.k_total, &caps)?,
                _ => allocate_ranks(&importance.c, budget.k_total, &caps)?,
            };
            (budget, allocation)
        }
    };

    let groups = svds
        .iter()
        .zip(&allocation.ranks)
        .map(|(f, &r)| init_from_svd(f, r, p))
        .collect::<Result<Vec<_>>>()?;
    let init = problem.params_from_groups(groups, budget.residual_dim)?;
    Ok(Prepared {
        layer,
        kind,
        problem,
        importance,
        budget,
        allocation,
        init,
    })
}

fn train_item(item: Prepared, config: &PipelineConfig) -> Result<CompressedKind> {
    let ctx = format!("layer {} {}", item.layer, item.kind);
    let problem = &item.problem;
    let zero_loss: f64 = problem.targets().iter().map(Matrix::frobenius_norm_sq).sum();
    let outcome = problem
        .train(&item.init, &config.train)
        .map_err(|e| e.with_context(&ctx))?;
    let params = outcome.params.round_to_f32();
    let stored_loss = problem.loss(&params)?;
    Ok(CompressedKind {
        kind: item.kind,
        plan: problem.plan().clone(),
        importance: item.importance,
        budget: item.budget,
        allocation: item.allocation,
        params,
        stats: KindStats {
            zero_loss,
            init_loss: outcome.initial_loss,
            trained_loss: outcome.final_loss,
            stored_loss,
            scaled_loss: problem.scaled_loss(stored_loss),
            steps_run: outcome.steps_run,
        },
        log: outcome.log,
    })
}

/// Worker pool honoring [`THREADS_ENV`].
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v.trim().parse::<usize>().map_err(|_| {
            Error::Config(format!("{THREADS_ENV}={v:?} is not a nonnegative integer"))
        })?,
        _ => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Compress the up and gate matrices of every layer.
///
/// Budgets and allocations of all items are settled before any training
/// starts, so an infeasible ratio fails fast. Items then train in parallel;
/// results do not depend on the worker count.
pub fn compress_model(model: &MoEModel, trace: &TraceFile, config: &PipelineConfig) -> Result<CompressedModel> {
    model.validate()?;
    config.validate()?;
    trace.validate()?;
    if trace.n_experts != model.n_experts {
        return Err(Error::Shape(format!(
            "trace has {} experts, model has {}",
            trace.n_experts, model.n_experts
        )));
    }
    if !model.n_experts.is_multiple_of(config.k) {
        return Err(Error::Config(format!(
            "group size {} must divide the expert count {}",
            config.k, model.n_experts
        )));
    }
    let dim = config.k * model.p * model.d;
    let residual_dim = (config.residual_fraction * dim as f64).floor() as usize;
    let projections = if residual_dim > 0 {
        MatrixKind::COMPRESSED
            .iter()
            .map(|&kind| {
                build_projection(dim, residual_dim, projection_seed(config.seed, kind))
                    .map(|p| (kind, Arc::new(p)))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let projection_for = |kind: MatrixKind| {
        projections
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, p)| Arc::clone(p))
    };

    let mut frequencies = Vec::with_capacity(model.layers.len());
    for l in 0..model.layers.len() {
        let t = trace
            .layer(l)
            .ok_or_else(|| Error::Argument(format!("trace has no counts for layer {l}")))?;
        frequencies.push(expert_frequencies(t)?);
    }
    let items: Vec<(usize, MatrixKind)> = (0..model.layers.len())
        .flat_map(|l| MatrixKind::COMPRESSED.into_iter().map(move |k| (l, k)))
        .collect();

    let pool = thread_pool()?;
    let prepared = pool.install(|| {
        items
            .par_iter()
            .map(|&(l, kind)| prepare(model, l, kind, &frequencies[l], trace, config, projection_for(kind)))
            .collect::<Result<Vec<_>>>()
    })?;
    let trained = pool.install(|| {
        prepared
            .into_par_iter()
            .map(|item| train_item(item, config))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut trained = trained.into_iter();
    let layers = model
        .layers
        .iter()
        .zip(frequencies)
        .map(|(layer, expert_frequencies)| CompressedLayer {
            expert_frequencies,
            kinds: trained.by_ref().take(MatrixKind::COMPRESSED.len()).collect(),
            down: layer.experts.iter().map(|e| e.down.clone()).collect(),
            router: layer.router.clone(),
        })
        .collect();
    Ok(CompressedModel {
        n_experts: model.n_experts,
        d: model.d,
        p: model.p,
        top_k: model.top_k,
        config: *config,
        projections,
        layers,
        trace: trace.clone(),
    })
}
