use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{find, read_json, read_tensor, write_json, TensorEntry, TensorWriter};
use crate::error::{Error, Result};
use crate::model::{ExpertWeights, MoELayer, MoEModel};

pub const MODEL_MANIFEST: &str = "model.json";
const MODEL_FORMAT: &str = "moe-model";
const MODEL_VERSION: u32 = 1;

/// `model.json`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format: String,
    pub version: u32,
    pub n_experts: usize,
    pub d: usize,
    pub p: usize,
    pub top_k: usize,
    pub n_layers: usize,
    pub tensors: Vec<TensorEntry>,
}

pub(crate) fn expert_name(layer: usize, expert: usize, what: &str) -> String {
    format!("layer{layer}.expert{expert}.{what}")
}

pub(crate) fn router_name(layer: usize) -> String {
    format!("layer{layer}.router")
}

pub fn save_model(model: &MoEModel, dir: &Path) -> Result<ModelManifest> {
    model.validate()?;
    let mut w = TensorWriter::new(dir);
    for (l, layer) in model.layers.iter().enumerate() {
        for (i, e) in layer.experts.iter().enumerate() {
            w.write(expert_name(l, i, "up"), &e.up)?;
            w.write(expert_name(l, i, "gate"), &e.gate)?;
            w.write(expert_name(l, i, "down"), &e.down)?;
        }
        w.write(router_name(l), &layer.router)?;
    }
    let manifest = ModelManifest {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        n_experts: model.n_experts,
        d: model.d,
        p: model.p,
        top_k: model.top_k,
        n_layers: model.layers.len(),
        tensors: w.entries,
    };
    write_json(&dir.join(MODEL_MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_model(dir: &Path) -> Result<MoEModel> {
    let manifest: ModelManifest = read_json(&dir.join(MODEL_MANIFEST))?;
    if manifest.format != MODEL_FORMAT || manifest.version != MODEL_VERSION {
        return Err(Error::format(
            0,
            format!(
                "unsupported model format {} v{} (expected {MODEL_FORMAT} v{MODEL_VERSION})",
                manifest.format, manifest.version
            ),
        ));
    }
    let (n, p, d) = (manifest.n_experts, manifest.p, manifest.d);
    let load = |name: String, shape: [usize; 2]| -> Result<crate::Matrix> {
        let entry = find(&manifest.tensors, &name)?;
        if entry.shape != shape {
            return Err(Error::format(
                0,
                format!("tensor {name} declared {:?}, architecture needs {shape:?}", entry.shape),
            ));
        }
        read_tensor(dir, entry)
    };
    let mut layers = Vec::with_capacity(manifest.n_layers);
    for l in 0..manifest.n_layers {
        let experts = (0..n)
            .map(|i| {
                Ok(ExpertWeights {
                    up: load(expert_name(l, i, "up"), [p, d])?,
                    gate: load(expert_name(l, i, "gate"), [p, d])?,
                    down: load(expert_name(l, i, "down"), [d, p])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        layers.push(MoELayer {
            experts,
            router: load(router_name(l), [n, d])?,
        });
    }
    let model = MoEModel {
        n_experts: n,
        d,
        p,
        top_k: manifest.top_k,
        layers,
    };
    model.validate()?;
    Ok(model)
}
