//! Compression of Mixture-of-Experts weight banks guided by routing frequency
//! and information density.
//!
//! The pipeline, per MoE layer and per up/gate projection kind:
//!
//! 1. count expert activations on calibration tokens ([`routing`]);
//! 2. sort experts by frequency and slice them into groups of `k`;
//! 3. score every stacked group matrix by its effective rank and blend that
//!    with the group frequency ([`spectral`]);
//! 4. split a global rank budget between groups in proportion to the blended
//!    score;
//! 5. initialize shared-basis factors from the truncated SVD and refine them,
//!    together with a low-dimensional residual embedded through a sparse
//!    isometric projection, by Adam ([`basis`], [`residual`]);
//! 6. write a checksummed artifact that decompresses on demand ([`io`]).
//!
//! [`pipeline`] ties the stages together and the [`guide`] module carries the
//! narrative documentation, whose code listings run as doc-tests.

pub mod basis;
pub mod error;
pub mod guide;
pub mod io;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod residual;
pub mod routing;
pub mod spectral;

use serde::{Deserialize, Serialize};

pub use error::{Error, Result};
pub use linalg::Matrix;

/// Which expert projection a factorization problem compresses. The down
/// projection is always stored dense.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    Up,
    Gate,
}

impl MatrixKind {
    pub const COMPRESSED: [MatrixKind; 2] = [MatrixKind::Up, MatrixKind::Gate];

    pub fn as_str(self) -> &'static str {
        match self {
            MatrixKind::Up => "up",
            MatrixKind::Gate => "gate",
        }
    }

    pub(crate) fn tag(self) -> u64 {
        match self {
            MatrixKind::Up => 1,
            MatrixKind::Gate => 2,
        }
    }
}

impl std::fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}
