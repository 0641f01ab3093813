//! Routing statistics: activation counts, frequencies and the
//! frequency-sorted grouping of experts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw activation tallies of one MoE layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub layer: usize,
    pub counts: Vec<u64>,
}

impl RoutingTrace {
    pub fn new(layer: usize, counts: Vec<u64>) -> Self {
        Self { layer, counts }
    }

    pub fn n_experts(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Elementwise sum with another batch of the same layer.
    pub fn merge(&mut self, other: &RoutingTrace) -> Result<()> {
        if other.layer != self.layer || other.counts.len() != self.counts.len() {
            return Err(Error::Shape(format!(
                "cannot merge trace of layer {} ({} experts) into layer {} ({} experts)",
                other.layer,
                other.counts.len(),
                self.layer,
                self.counts.len()
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// On-disk trace document: `{ "n_experts": int, "layers": [ {layer, counts} ] }`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceFile {
    pub n_experts: usize,
    pub layers: Vec<RoutingTrace>,
}

impl TraceFile {
    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.layers.iter().enumerate() {
            if t.counts.len() != self.n_experts {
                return Err(Error::Shape(format!(
                    "trace layer entry {i} has {} counts, expected {}",
                    t.counts.len(),
                    self.n_experts
                )));
            }
        }
        Ok(())
    }

    pub fn layer(&self, layer: usize) -> Option<&RoutingTrace> {
        self.layers.iter().find(|t| t.layer == layer)
    }

    /// Fold calibration batches together: entries for the same layer are
    /// summed, output sorted by layer.
    pub fn aggregate(batches: &[TraceFile]) -> Result<TraceFile> {
        let n = batches
            .first()
            .ok_or_else(|| Error::Argument("no trace batches".into()))?
            .n_experts;
        let mut layers: Vec<RoutingTrace> = Vec::new();
        for b in batches {
            if b.n_experts != n {
                return Err(Error::Shape(format!(
                    "trace batch has {} experts, expected {n}",
                    b.n_experts
                )));
            }
            b.validate()?;
            for t in &b.layers {
                match layers.iter_mut().find(|l| l.layer == t.layer) {
                    Some(existing) => existing.merge(t)?,
                    None => layers.push(t.clone()),
                }
            }
        }
        layers.sort_by_key(|l| l.layer);
        Ok(TraceFile {
            n_experts: n,
            layers,
        })
    }

    pub fn load(path: &Path) -> Result<TraceFile> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let trace: TraceFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        trace.validate()?;
        Ok(trace)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        crate::io::write_atomic(path, text.as_bytes())
    }
}

/// `F_i = z_i / sum_b z_b`.
pub fn expert_frequencies(trace: &RoutingTrace) -> Result<Vec<f64>> {
    let total = trace.total();
    if total == 0 {
        return Err(Error::DegenerateTrace(format!(
            "layer {} has no recorded activations",
            trace.layer
        )));
    }
    let total = total as f64;
    Ok(trace.counts.iter().map(|&z| z as f64 / total).collect())
}

/// Frequency-sorted partition of the experts of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPlan {
    /// Expert indices in descending frequency order.
    pub ordering: Vec<usize>,
    /// `m` groups of `k` experts, sliced sequentially from `ordering`.
    pub groups: Vec<Vec<usize>>,
    pub k: usize,
    pub m: usize,
}

impl GroupPlan {
    pub fn n_experts(&self) -> usize {
        self.ordering.len()
    }

    /// `(group, slot within group)` for every expert index.
    pub fn locate(&self) -> Vec<(usize, usize)> {
        let mut loc = vec![(usize::MAX, usize::MAX); self.n_experts()];
        for (g, members) in self.groups.iter().enumerate() {
            for (slot, &e) in members.iter().enumerate() {
                loc[e] = (g, slot);
            }
        }
        loc
    }

    /// Check that the groups partition `0..n` into `m` groups of `k`.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.groups.len() != self.m || self.m * self.k != n || self.ordering.len() != n {
            return Err(Error::Shape(format!(
                "plan with m={} k={} does not cover {n} experts",
                self.m, self.k
            )));
        }
        let mut seen = vec![false; n];
        for g in &self.groups {
            if g.len() != self.k {
                return Err(Error::Shape(format!("group of size {} (expected {})", g.len(), self.k)));
            }
            for &e in g {
                if e >= n || std::mem::replace(&mut seen[e], true) {
                    return Err(Error::Shape(format!("expert index {e} invalid or repeated")));
                }
            }
        }
        Ok(())
    }
}

/// Sort experts by descending frequency (ties to the lower index) and slice
/// them into groups of `k`.
pub fn build_group_plan(freqs: &[f64], k: usize) -> Result<GroupPlan> {
    let n = freqs.len();
    if k == 0 || n == 0 || !n.is_multiple_of(k) {
        return Err(Error::Config(format!(
            "group size {k} must divide the expert count {n}"
        )));
    }
    let mut ordering: Vec<usize> = (0..n).collect();
    ordering.sort_by(|&a, &b| freqs[b].total_cmp(&freqs[a]).then(a.cmp(&b)));
    let groups = ordering.chunks(k).map(<[usize]>::to_vec).collect();
    Ok(GroupPlan {
        ordering,
        groups,
        k,
        m: n / k,
    })
}

/// `F_g = sum of member counts / total count`.
pub fn group_frequencies(trace: &RoutingTrace, plan: &GroupPlan) -> Result<Vec<f64>> {
    let total = trace.total();
    if total == 0 {
        return Err(Error::DegenerateTrace(format!(
            "layer {} has no recorded activations",
            trace.layer
        )));
    }
    plan.groups
        .iter()
        .map(|g| {
            let mut sum = 0u64;
            for &e in g {
                sum += *trace.counts.get(e).ok_or_else(|| {
                    Error::Shape(format!(
                        "expert {e} out of range for a trace of {} experts",
                        trace.n_experts()
                    ))
                })?;
            }
            Ok(sum as f64 / total as f64)
        })
        .collect()
}
