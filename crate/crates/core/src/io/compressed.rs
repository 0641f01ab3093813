use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::model::{expert_name, router_name};
use super::{find, read_json, read_tensor, sha256_hex, write_atomic, write_json, TensorEntry, TensorWriter};
use crate::basis::{BasisBank, ExpertFactors, FactorParams, LogEntry, MixtureCoefficients};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::MoEModel;
use crate::pipeline::{CompressedKind, CompressedLayer, CompressedModel, KindStats, PipelineConfig};
use crate::residual::SparseProjection;
use crate::routing::{GroupPlan, TraceFile};
use crate::spectral::{ImportanceScores, RankAllocation, RankBudget};
use crate::MatrixKind;

pub const COMPRESSED_MANIFEST: &str = "compression.json";
pub const TRACE_FILE: &str = "trace.json";
const COMPRESSED_FORMAT: &str = "moe-compressed";
const COMPRESSED_VERSION: u32 = 1;

pub const RATIO_DEFINITION: &str = "achieved_ratio = 1 - compressed / original, counting the float \
parameters of the up and gate expert matrices; compressed = A + B + alpha + eta; down projections and \
routers are stored dense and excluded; projection index metadata is counted separately in bytes";

/// Float-parameter counts of one `(layer, kind)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindParams {
    pub kind: MatrixKind,
    pub original: usize,
    pub a: usize,
    pub b: usize,
    pub alpha: usize,
    pub eta: usize,
    pub compressed: usize,
}

impl KindParams {
    fn count(kind: MatrixKind, original: usize, params: &FactorParams) -> Self {
        let [a, b, alpha, eta] = params.block_sizes();
        Self {
            kind,
            original,
            a,
            b,
            alpha,
            eta,
            compressed: a + b + alpha + eta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub layer: usize,
    pub kinds: Vec<KindParams>,
    pub original: usize,
    pub compressed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub ratio_definition: String,
    pub layers: Vec<LayerParams>,
    pub original: usize,
    pub compressed: usize,
    pub requested_ratio: f64,
    pub achieved_ratio: f64,
    /// Size of the encoded projection files.
    pub index_metadata_bytes: usize,
}

fn count_params(c: &CompressedModel) -> Result<ParameterReport> {
    let per_kind = c.n_experts * c.p * c.d;
    let layers: Vec<LayerParams> = c
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let kinds: Vec<KindParams> = layer
                .kinds
                .iter()
                .map(|k| KindParams::count(k.kind, per_kind, &k.params))
                .collect();
            LayerParams {
                layer: l,
                original: kinds.iter().map(|k| k.original).sum(),
                compressed: kinds.iter().map(|k| k.compressed).sum(),
                kinds,
            }
        })
        .collect();
    let original: usize = layers.iter().map(|l| l.original).sum();
    let compressed: usize = layers.iter().map(|l| l.compressed).sum();
    let mut index_metadata_bytes = 0;
    for (_, p) in &c.projections {
        index_metadata_bytes += p.encode()?.len();
    }
    Ok(ParameterReport {
        ratio_definition: RATIO_DEFINITION.into(),
        layers,
        original,
        compressed,
        requested_ratio: c.config.ratio,
        achieved_ratio: 1.0 - compressed as f64 / original as f64,
        index_metadata_bytes,
    })
}

/// Parameter accounting of `compressed` against the model it came from.
pub fn parameter_report(original: &MoEModel, compressed: &CompressedModel) -> Result<ParameterReport> {
    if original.n_experts != compressed.n_experts
        || original.p != compressed.p
        || original.d != compressed.d
        || original.top_k != compressed.top_k
        || original.layers.len() != compressed.layers.len()
    {
        return Err(Error::Shape("compressed artifact does not match the model architecture".into()));
    }
    count_params(compressed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRef {
    pub kind: MatrixKind,
    pub file: String,
    pub dim: usize,
    pub residual_dim: usize,
    pub seed: Option<u64>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindManifest {
    pub kind: MatrixKind,
    pub plan: GroupPlan,
    pub importance: ImportanceScores,
    pub budget: RankBudget,
    pub allocation: RankAllocation,
    pub residual_dim: usize,
    pub params: KindParams,
    pub stats: KindStats,
    pub log: Vec<LogEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub layer: usize,
    pub expert_frequencies: Vec<f64>,
    pub kinds: Vec<KindManifest>,
}

/// `compression.json`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedManifest {
    pub format: String,
    pub version: u32,
    pub n_experts: usize,
    pub d: usize,
    pub p: usize,
    pub top_k: usize,
    pub n_layers: usize,
    pub config: PipelineConfig,
    pub trace: String,
    pub projections: Vec<ProjectionRef>,
    pub parameters: ParameterReport,
    pub layers: Vec<LayerManifest>,
    pub tensors: Vec<TensorEntry>,
}

fn factor_name(layer: usize, kind: MatrixKind, what: &str) -> String {
    format!("layer{layer}.{kind}.{what}")
}

fn eta_matrix(eta: &[Vec<f64>]) -> Result<Option<Matrix>> {
    match eta.first().map_or(0, Vec::len) {
        0 => Ok(None),
        a => Matrix::new(eta.len(), a, eta.concat()).map(Some),
    }
}

pub fn save_compressed(c: &CompressedModel, dir: &Path) -> Result<CompressedManifest> {
    let mut w = TensorWriter::new(dir);
    let mut layers = Vec::with_capacity(c.layers.len());
    let mut text_log = String::new();
    let mut json_log = String::new();
    let per_kind = c.n_experts * c.p * c.d;
    for (l, layer) in c.layers.iter().enumerate() {
        let mut kinds = Vec::with_capacity(layer.kinds.len());
        for k in &layer.kinds {
            let params = &k.params;
            for (i, a) in params.experts.factors.iter().enumerate() {
                w.write(factor_name(l, k.kind, &format!("A.{i}")), a)?;
            }
            for (g, b) in params.bank.bases.iter().enumerate() {
                w.write(factor_name(l, k.kind, &format!("B.{g}")), b)?;
            }
            w.write(factor_name(l, k.kind, "alpha"), &params.mixing.alpha)?;
            if let Some(eta) = eta_matrix(&params.eta)? {
                w.write(factor_name(l, k.kind, "eta"), &eta)?;
            }
            for e in &k.log {
                let _ = writeln!(text_log, "layer {l} {}: {}", k.kind, e.to_text());
                let line = serde_json::json!({
                    "layer": l,
                    "kind": k.kind,
                    "step": e.step,
                    "loss": e.loss,
                    "scaled_loss": e.scaled_loss,
                });
                let _ = writeln!(json_log, "{line}");
            }
            kinds.push(KindManifest {
                kind: k.kind,
                plan: k.plan.clone(),
                importance: k.importance.clone(),
                budget: k.budget,
                allocation: k.allocation.clone(),
                residual_dim: params.eta.first().map_or(0, Vec::len),
                params: KindParams::count(k.kind, per_kind, params),
                stats: k.stats,
                log: k.log.clone(),
            });
        }
        for (i, down) in layer.down.iter().enumerate() {
            w.write(expert_name(l, i, "down"), down)?;
        }
        w.write(router_name(l), &layer.router)?;
        layers.push(LayerManifest {
            layer: l,
            expert_frequencies: layer.expert_frequencies.clone(),
            kinds,
        });
    }
    let mut projections = Vec::with_capacity(c.projections.len());
    for (kind, p) in &c.projections {
        let bytes = p.encode()?;
        let file = format!("proj/{kind}.rfidproj");
        write_atomic(&dir.join(&file), &bytes)?;
        projections.push(ProjectionRef {
            kind: *kind,
            file,
            dim: p.dim(),
            residual_dim: p.residual_dim(),
            seed: p.seed(),
            sha256: sha256_hex(&bytes),
        });
    }
    c.trace.save(&dir.join(TRACE_FILE))?;
    write_atomic(&dir.join("logs/train.txt"), text_log.as_bytes())?;
    write_atomic(&dir.join("logs/train.jsonl"), json_log.as_bytes())?;
    let manifest = CompressedManifest {
        format: COMPRESSED_FORMAT.into(),
        version: COMPRESSED_VERSION,
        n_experts: c.n_experts,
        d: c.d,
        p: c.p,
        top_k: c.top_k,
        n_layers: c.layers.len(),
        config: c.config,
        trace: TRACE_FILE.into(),
        projections,
        parameters: count_params(c)?,
        layers,
        tensors: w.entries,
    };
    write_json(&dir.join(COMPRESSED_MANIFEST), &manifest)?;
    Ok(manifest)
}

fn load_projection(dir: &Path, r: &ProjectionRef) -> Result<SparseProjection> {
    let path = dir.join(&r.file);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::format(0, format!("missing projection file {}", r.file)))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    if sha256_hex(&bytes) != r.sha256 {
        return Err(Error::Integrity {
            tensor: r.file.clone(),
            message: "projection digest does not match manifest".into(),
        });
    }
    let p = SparseProjection::decode(&bytes)?;
    if p.dim() != r.dim || p.residual_dim() != r.residual_dim || p.seed() != r.seed {
        return Err(Error::format(0, format!("projection {} disagrees with its manifest entry", r.file)));
    }
    Ok(p)
}

pub fn load_compressed(dir: &Path) -> Result<CompressedModel> {
    let manifest: CompressedManifest = read_json(&dir.join(COMPRESSED_MANIFEST))?;
    if manifest.format != COMPRESSED_FORMAT || manifest.version != COMPRESSED_VERSION {
        return Err(Error::format(
            0,
            format!(
                "unsupported compressed format {} v{} (expected {COMPRESSED_FORMAT} v{COMPRESSED_VERSION})",
                manifest.format, manifest.version
            ),
        ));
    }
    if manifest.layers.len() != manifest.n_layers {
        return Err(Error::format(0, "layer count disagrees with layer entries"));
    }
    let (n, p, d) = (manifest.n_experts, manifest.p, manifest.d);
    let load = |name: String, shape: [usize; 2]| -> Result<Matrix> {
        let entry = find(&manifest.tensors, &name)?;
        if entry.shape != shape {
            return Err(Error::format(
                0,
                format!("tensor {name} declared {:?}, expected {shape:?}", entry.shape),
            ));
        }
        read_tensor(dir, entry)
    };

    let mut projections = Vec::with_capacity(manifest.projections.len());
    for r in &manifest.projections {
        projections.push((r.kind, Arc::new(load_projection(dir, r)?)));
    }

    let mut layers = Vec::with_capacity(manifest.n_layers);
    for (l, lm) in manifest.layers.iter().enumerate() {
        if lm.layer != l || lm.expert_frequencies.len() != n {
            return Err(Error::format(0, format!("layer entry {l} is malformed")));
        }
        let mut kinds = Vec::with_capacity(lm.kinds.len());
        for km in &lm.kinds {
            km.plan.validate(n)?;
            let ranks = &km.allocation.ranks;
            if ranks.len() != km.plan.m {
                return Err(Error::format(0, format!("layer {l} {} has {} ranks", km.kind, ranks.len())));
            }
            let locate = km.plan.locate();
            let factors = (0..n)
                .map(|i| load(factor_name(l, km.kind, &format!("A.{i}")), [p, ranks[locate[i].0]]))
                .collect::<Result<Vec<_>>>()?;
            let bases = (0..km.plan.m)
                .map(|g| load(factor_name(l, km.kind, &format!("B.{g}")), [ranks[g], d]))
                .collect::<Result<Vec<_>>>()?;
            let alpha = load(factor_name(l, km.kind, "alpha"), [n, km.plan.m])?;
            let a = km.residual_dim;
            let eta = if a > 0 {
                let e = load(factor_name(l, km.kind, "eta"), [km.plan.m, a])?;
                (0..km.plan.m).map(|g| e.row(g).to_vec()).collect()
            } else {
                vec![Vec::new(); km.plan.m]
            };
            if a > 0 && !projections.iter().any(|(k, pr)| *k == km.kind && pr.residual_dim() == a) {
                return Err(Error::format(0, format!("layer {l} {} residuals lack a projection", km.kind)));
            }
            let params = FactorParams {
                experts: ExpertFactors {
                    factors,
                    group_of: locate.iter().map(|x| x.0).collect(),
                },
                bank: BasisBank { bases },
                mixing: MixtureCoefficients { alpha },
                eta,
            };
            let counted = KindParams::count(km.kind, km.params.original, &params);
            if counted != km.params {
                return Err(Error::format(
                    0,
                    format!("layer {l} {} parameter counts disagree with stored blobs", km.kind),
                ));
            }
            kinds.push(CompressedKind {
                kind: km.kind,
                plan: km.plan.clone(),
                importance: km.importance.clone(),
                budget: km.budget,
                allocation: km.allocation.clone(),
                params,
                stats: km.stats,
                log: km.log.clone(),
            });
        }
        let down = (0..n)
            .map(|i| load(expert_name(l, i, "down"), [d, p]))
            .collect::<Result<Vec<_>>>()?;
        layers.push(CompressedLayer {
            expert_frequencies: lm.expert_frequencies.clone(),
            kinds,
            down,
            router: load(router_name(l), [n, d])?,
        });
    }
    let trace = TraceFile::load(&dir.join(&manifest.trace))?;
    let model = CompressedModel {
        n_experts: n,
        d,
        p,
        top_k: manifest.top_k,
        config: manifest.config,
        projections,
        layers,
        trace,
    };
    if count_params(&model)? != manifest.parameters {
        return Err(Error::format(0, "parameter report disagrees with stored blobs"));
    }
    Ok(model)
}
