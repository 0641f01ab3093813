//! In-memory MoE model, the synthetic generator and the SwiGLU forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::MatrixKind;

/// One SwiGLU expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    /// `p × d`
    pub up: Matrix,
    /// `p × d`
    pub gate: Matrix,
    /// `d × p`
    pub down: Matrix,
}

impl ExpertWeights {
    pub fn matrix(&self, kind: MatrixKind) -> &Matrix {
        match kind {
            MatrixKind::Up => &self.up,
            MatrixKind::Gate => &self.gate,
        }
    }

    /// `W_down (W_up x ⊙ SiLU(W_gate x))`
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let up = self.up.mat_vec(x)?;
        let gate = self.gate.mat_vec(x)?;
        let h: Vec<f64> = up.iter().zip(&gate).map(|(u, g)| u * linalg::silu(*g)).collect();
        self.down.mat_vec(&h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoELayer {
    pub experts: Vec<ExpertWeights>,
    /// `n × d` router weights.
    pub router: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoEModel {
    pub n_experts: usize,
    /// Hidden size `d`.
    pub d: usize,
    /// Intermediate size `p`.
    pub p: usize,
    pub top_k: usize,
    pub layers: Vec<MoELayer>,
}

impl MoEModel {
    pub fn validate(&self) -> Result<()> {
        let (n, p, d) = (self.n_experts, self.p, self.d);
        if self.top_k == 0 || self.top_k > n {
            return Err(Error::Shape(format!("top_k {} must lie in 1..={n}", self.top_k)));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.experts.len() != n || layer.router.shape() != (n, d) {
                return Err(Error::Shape(format!("layer {l} does not have {n} experts with an {n}x{d} router")));
            }
            for (i, e) in layer.experts.iter().enumerate() {
                if e.up.shape() != (p, d) || e.gate.shape() != (p, d) || e.down.shape() != (d, p) {
                    return Err(Error::Shape(format!("layer {l} expert {i} has inconsistent shapes")));
                }
            }
        }
        Ok(())
    }

    /// Copies of one projection kind of every expert in a layer.
    pub fn expert_matrices(&self, layer: usize, kind: MatrixKind) -> Vec<Matrix> {
        self.layers[layer]
            .experts
            .iter()
            .map(|e| e.matrix(kind).clone())
            .collect()
    }

    pub fn same_architecture(&self, other: &MoEModel) -> bool {
        self.n_experts == other.n_experts
            && self.d == other.d
            && self.p == other.p
            && self.top_k == other.top_k
            && self.layers.len() == other.layers.len()
    }

    /// Router softmax followed by top-K selection; ties go to the lower
    /// expert index. Returns `(expert, gate weight)` pairs, highest first.
    pub fn route(&self, layer: usize, x: &[f64], renorm_gates: bool) -> Result<Vec<(usize, f64)>> {
        let logits = self.layers[layer].router.mat_vec(x)?;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut order: Vec<usize> = (0..self.n_experts).collect();
        order.sort_by(|&a, &b| exps[b].total_cmp(&exps[a]).then(a.cmp(&b)));
        let mut picked: Vec<(usize, f64)> = order[..self.top_k].iter().map(|&i| (i, exps[i] / z)).collect();
        if renorm_gates {
            let s: f64 = picked.iter().map(|p| p.1).sum();
            picked.iter_mut().for_each(|p| p.1 /= s);
        }
        Ok(picked)
    }

    /// `y = Σ_{i ∈ TopK} G_i(x) E_i(x)` for one layer.
    pub fn forward(&self, layer: usize, x: &[f64], renorm_gates: bool) -> Result<Vec<f64>> {
        if layer >= self.layers.len() {
            return Err(Error::Argument(format!("layer {layer} out of range")));
        }
        let mut y = vec![0.0; self.d];
        for (i, g) in self.route(layer, x, renorm_gates)? {
            let e = self.layers[layer].experts[i].forward(x)?;
            for (yi, ei) in y.iter_mut().zip(&e) {
                *yi += g * ei;
            }
        }
        Ok(y)
    }
}

/// Parameters of a seeded synthetic MoE model with known spectra.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub p: usize,
    pub d: usize,
    pub layers: usize,
    pub top_k: usize,
    /// Singular values of every up/gate matrix decay as `exp(-decay * i)`.
    pub spectral_decay: f64,
    /// Spread of the per-expert router norms; 0 gives balanced routing.
    pub router_skew: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The bundled demo configuration.
    pub fn demo() -> Self {
        Self {
            n: 32,
            p: 16,
            d: 32,
            layers: 2,
            top_k: 2,
            spectral_decay: 0.5,
            router_skew: 2.0,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.d == 0 || self.layers == 0 {
            return Err(Error::Config("n, p, d and layers must be positive".into()));
        }
        if self.top_k == 0 || self.top_k > self.n {
            return Err(Error::Config(format!("top_k {} must lie in 1..={}", self.top_k, self.n)));
        }
        if !(self.spectral_decay >= 0.0 && self.spectral_decay.is_finite()) {
            return Err(Error::Config("spectral_decay must be finite and nonnegative".into()));
        }
        if !(self.router_skew >= 0.0 && self.router_skew.is_finite()) {
            return Err(Error::Config("router_skew must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// `rows × cols` (rows ≥ cols) with orthonormal columns, by Gram-Schmidt on
/// a Gaussian draw.
fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while q.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for u in &q {
                let proj = linalg::dot(&v, u);
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let nrm = linalg::norm2(&v);
        if nrm > 1e-8 {
            q.push(v.iter().map(|x| x / nrm).collect());
        }
    }
    Matrix::from_fn(rows, cols, |r, c| q[c][r])
}

/// `U diag(σ) Vᵀ` with σ_i ∝ exp(-decay·i), scaled so that Σσ² = p (entry
/// RMS 1/√d, the usual fan-in scale).
fn spectral_matrix(p: usize, d: usize, decay: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let r = p.min(d);
    let raw: Vec<f64> = (0..r).map(|i| (-decay * i as f64).exp()).collect();
    let energy: f64 = raw.iter().map(|s| s * s).sum();
    let c = (p as f64 / energy).sqrt();
    let u = random_orthonormal(p, r, rng);
    let v = random_orthonormal(d, r, rng);
    let mut us = u;
    for row in 0..p {
        for (x, s) in us.row_mut(row).iter_mut().zip(&raw) {
            *x *= c * s;
        }
    }
    us.mul_transposed(&v)
}

/// Deterministic synthetic model. All values are rounded to `f32` so that a
/// save/load cycle reproduces the in-memory model exactly.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<MoEModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut layers = Vec::with_capacity(spec.layers);
    for _ in 0..spec.layers {
        let experts = (0..spec.n)
            .map(|_| ExpertWeights {
                up: spectral_matrix(spec.p, spec.d, spec.spectral_decay, &mut rng).round_to_f32(),
                gate: spectral_matrix(spec.p, spec.d, spec.spectral_decay, &mut rng).round_to_f32(),
                down: gaussian(spec.d, spec.p, 1.0 / (spec.p as f64).sqrt(), &mut rng).round_to_f32(),
            })
            .collect();
        // Unit-norm router rows scaled by a per-expert popularity factor.
        let mut router = gaussian(spec.n, spec.d, 1.0, &mut rng);
        for i in 0..spec.n {
            let u: f64 = rng.random_range(-0.5..0.5);
            let factor = (spec.router_skew * u).exp();
            let row = router.row_mut(i);
            let nrm = linalg::norm2(row);
            row.iter_mut().for_each(|v| *v *= factor / nrm);
        }
        layers.push(MoELayer {
            experts,
            router: router.round_to_f32(),
        });
    }
    let model = MoEModel {
        n_experts: spec.n,
        d: spec.d,
        p: spec.p,
        top_k: spec.top_k,
        layers,
    };
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::effective_rank;

    fn small(decay: f64, skew: f64) -> SyntheticSpec {
        SyntheticSpec {
            n: 8,
            p: 8,
            d: 12,
            layers: 1,
            top_k: 2,
            spectral_decay: decay,
            router_skew: skew,
            seed: 3,
        }
    }

    #[test]
    fn flat_spectrum_has_full_effective_rank() {
        let m = generate_synthetic(&small(0.0, 0.0)).unwrap();
        for e in &m.layers[0].experts {
            let s = linalg::svd(&e.up).unwrap().s;
            assert!((effective_rank(&s).unwrap() - 8.0).abs() < 0.5);
        }
    }

    #[test]
    fn steep_spectrum_has_low_effective_rank() {
        let m = generate_synthetic(&small(1.0, 0.0)).unwrap();
        for e in &m.layers[0].experts {
            let s = linalg::svd(&e.gate).unwrap().s;
            assert!(effective_rank(&s).unwrap() < 0.25 * 8.0);
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic(&small(0.5, 1.0)).unwrap();
        let b = generate_synthetic(&small(0.5, 1.0)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticSpec { seed: 4, ..small(0.5, 1.0) }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_expert_forward_is_the_expert() {
        let spec = SyntheticSpec { n: 1, top_k: 1, ..small(0.5, 0.0) };
        let m = generate_synthetic(&spec).unwrap();
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let y = m.forward(0, &x, false).unwrap();
        let e = m.layers[0].experts[0].forward(&x).unwrap();
        for (a, b) in y.iter().zip(&e) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let m = generate_synthetic(&small(0.5, 2.0)).unwrap();
        assert!(m.forward(0, &[0.0; 12], false).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_scalar_loops() {
        let spec = SyntheticSpec { n: 4, top_k: 2, ..small(0.3, 1.0) };
        let m = generate_synthetic(&spec).unwrap();
        let layer = &m.layers[0];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let x: Vec<f64> = (0..spec.d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let logits: Vec<f64> = (0..4)
                .map(|i| (0..spec.d).map(|c| layer.router.get(i, c) * x[c]).sum())
                .collect();
            let denom: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
            let probs: Vec<f64> = logits.iter().map(|l| l.exp() / denom).collect();
            let mut idx = [0usize, 1, 2, 3];
            idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap());
            let mut want = vec![0.0; spec.d];
            for &i in &idx[..2] {
                let e = &layer.experts[i];
                let mut h = vec![0.0; spec.p];
                for r in 0..spec.p {
                    let mut u = 0.0;
                    let mut g = 0.0;
                    for c in 0..spec.d {
                        u += e.up.get(r, c) * x[c];
                        g += e.gate.get(r, c) * x[c];
                    }
                    h[r] = u * g / (1.0 + (-g).exp());
                }
                for r in 0..spec.d {
                    let mut acc = 0.0;
                    for c in 0..spec.p {
                        acc += e.down.get(r, c) * h[c];
                    }
                    want[r] += probs[i] * acc;
                }
            }
            let got = m.forward(0, &x, false).unwrap();
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn renormalized_gates_sum_to_one() {
        let m = generate_synthetic(&small(0.5, 1.0)).unwrap();
        let x = vec![0.3; 12];
        let r = m.route(0, &x, true).unwrap();
        assert!((r.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-12);
        let raw = m.route(0, &x, false).unwrap();
        assert!(raw.iter().map(|p| p.1).sum::<f64>() < 1.0);
    }

    #[test]
    fn routing_ties_prefer_lower_index() {
        let mut m = generate_synthetic(&small(0.5, 0.0)).unwrap();
        m.layers[0].router = Matrix::zeros(8, 12);
        let r = m.route(0, &[1.0; 12], false).unwrap();
        assert_eq!(r.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1]);
        assert!((r[0].1 - 0.125).abs() < 1e-15);
    }
}
