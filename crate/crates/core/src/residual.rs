//! Sparse isometric projection used to embed low-dimensional residual
//! vectors into the full weight space of an expert group.
//!
//! Row `t` of the `D x a` matrix `P` has a single nonzero `1/sqrt(n_q)` in
//! column `q = pi(t)`, where `n_q` counts the rows mapped to `q`. Columns are
//! therefore disjointly supported with unit norm, so `P^T P = I` and the map
//! `eta -> P eta` preserves Euclidean norms.
//!
//! `P` is never materialized: products are index gathers and scatters over
//! `pi`, and the binary encoding stores only the seed and the column counts.
//!
//! With `a` far below `D` a random `P` of this shape also captures most of a
//! residual that lies near a low intrinsic-dimension subspace with high
//! probability; that bound is a statement about the data and is not checked
//! at runtime.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::MatrixKind;

const MAGIC: &[u8; 8] = b"RFIDPROJ";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 8 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseProjection {
    d: usize,
    a: usize,
    /// `None` for projections built from an explicit index map.
    seed: Option<u64>,
    pi: Vec<u32>,
    counts: Vec<u32>,
    scales: Vec<f64>,
}

/// Low-dimensional residual coordinates of one expert group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualVector {
    pub group: usize,
    pub kind: MatrixKind,
    pub eta: Vec<f64>,
}

fn count_columns(pi: &[u32], a: usize) -> Vec<u32> {
    let mut counts = vec![0u32; a];
    for &q in pi {
        counts[q as usize] += 1;
    }
    counts
}

fn scales_for(counts: &[u32]) -> Vec<f64> {
    counts
        .iter()
        .map(|&n| if n == 0 { 0.0 } else { 1.0 / (n as f64).sqrt() })
        .collect()
}

fn sample_index_map(d: usize, a: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // The first `a` rows cover every column once so no n_q is zero.
    let mut pi: Vec<u32> = (0..a as u32).collect();
    pi.extend((a..d).map(|_| rng.random_range(0..a as u32)));
    pi
}

/// Build the seeded projection for a `D`-dimensional group with an
/// `a`-dimensional residual.
pub fn build_projection(d: usize, a: usize, seed: u64) -> Result<SparseProjection> {
    if a == 0 || a > d {
        return Err(Error::Argument(format!(
            "residual dimension {a} must lie in 1..={d}"
        )));
    }
    if a > u32::MAX as usize || d > u32::MAX as usize {
        return Err(Error::Argument(format!("projection {d}x{a} too large")));
    }
    let pi = sample_index_map(d, a, seed);
    let counts = count_columns(&pi, a);
    Ok(SparseProjection {
        d,
        a,
        seed: Some(seed),
        scales: scales_for(&counts),
        pi,
        counts,
    })
}

impl SparseProjection {
    /// Projection from an explicit index map. Every column must be hit.
    pub fn from_index_map(pi: Vec<u32>, a: usize) -> Result<Self> {
        if a == 0 || pi.len() < a {
            return Err(Error::Argument(format!(
                "index map of length {} cannot cover {a} columns",
                pi.len()
            )));
        }
        if let Some(bad) = pi.iter().find(|&&q| q as usize >= a) {
            return Err(Error::Argument(format!("index {bad} out of range for {a} columns")));
        }
        let counts = count_columns(&pi, a);
        if let Some(q) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Argument(format!("column {q} has no rows")));
        }
        Ok(Self {
            d: pi.len(),
            a,
            seed: None,
            scales: scales_for(&counts),
            pi,
            counts,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn residual_dim(&self) -> usize {
        self.a
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn index_map(&self) -> &[u32] {
        &self.pi
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Nonzero value of column `q`.
    pub fn scale(&self, q: usize) -> f64 {
        self.scales[q]
    }

    /// `P eta`, by gathering.
    pub fn apply(&self, eta: &[f64]) -> Result<Vec<f64>> {
        if eta.len() != self.a {
            return Err(Error::Shape(format!(
                "residual vector has length {}, projection expects {}",
                eta.len(),
                self.a
            )));
        }
        let scaled: Vec<f64> = eta.iter().zip(&self.scales).map(|(e, s)| e * s).collect();
        Ok(self.pi.iter().map(|&q| scaled[q as usize]).collect())
    }

    /// `P^T v`, by scattering.
    pub fn adjoint(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.d {
            return Err(Error::Shape(format!(
                "vector has length {}, projection expects {}",
                v.len(),
                self.d
            )));
        }
        let mut out = vec![0.0; self.a];
        for (&q, &x) in self.pi.iter().zip(v) {
            out[q as usize] += x;
        }
        for (o, s) in out.iter_mut().zip(&self.scales) {
            *o *= s;
        }
        Ok(out)
    }

    /// Largest deviation of `P^T P` from the identity.
    ///
    /// Off-diagonal entries vanish because each row has one nonzero. Diagonal
    /// entry `q` equals `(rows mapped to q) / n_q` with `n_q` the stored count,
    /// so it is evaluated exactly from integers rather than by summing
    /// rounded squares.
    pub fn gram_check(&self) -> f64 {
        let actual = count_columns(&self.pi, self.a);
        actual
            .iter()
            .zip(&self.counts)
            .map(|(&hit, &stored)| {
                if stored == 0 {
                    if hit == 0 {
                        1.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    (hit as f64 - stored as f64).abs() / stored as f64
                }
            })
            .fold(0.0, f64::max)
    }

    /// Binary form: magic, version, seed, D, a, then `a` u32 column counts,
    /// all little-endian. The index map is regenerated from the seed.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let seed = self.seed.ok_or_else(|| {
            Error::Argument("only seeded projections can be encoded".into())
        })?;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.a);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&seed.to_le_bytes());
        out.extend_from_slice(&(self.d as u64).to_le_bytes());
        out.extend_from_slice(&(self.a as u64).to_le_bytes());
        for c in &self.counts {
            out.extend_from_slice(&c.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(8)?;
        if magic != MAGIC {
            return Err(Error::format(0, "bad magic, expected RFIDPROJ"));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(8, format!("unsupported projection version {version}")));
        }
        let seed = cur.u64()?;
        let d_off = cur.pos;
        let d = cur.u64()? as usize;
        let a_off = cur.pos;
        let a = cur.u64()? as usize;
        if a == 0 || a > d {
            return Err(Error::format(a_off, format!("residual dimension {a} invalid for D={d}")));
        }
        if d > u32::MAX as usize {
            return Err(Error::format(d_off, format!("dimension {d} too large")));
        }
        let need = a.checked_mul(4).ok_or_else(|| Error::format(a_off, "count table overflows"))?;
        if bytes.len() - cur.pos < need {
            return Err(Error::format(
                bytes.len(),
                format!("truncated count table: need {need} bytes after offset {}", cur.pos),
            ));
        }
        let table_start = cur.pos;
        let stored: Vec<u32> = (0..a)
            .map(|_| u32::from_le_bytes(cur.take(4).unwrap().try_into().unwrap()))
            .collect();
        if cur.pos != bytes.len() {
            return Err(Error::format(cur.pos, "trailing bytes after count table"));
        }
        let p = build_projection(d, a, seed)?;
        if let Some(q) = p.counts.iter().zip(&stored).position(|(x, y)| x != y) {
            return Err(Error::format(
                table_start + 4 * q,
                format!("count for column {q} does not match the seeded index map"),
            ));
        }
        Ok(p)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos,
                format!("truncated header: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
