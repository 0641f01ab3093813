//! The user guide from `book/src`, compiled here so that its code listings
//! run as doc-tests and cannot drift from the library.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/routing.md")]
pub mod routing {}

#[doc = include_str!("../../../book/src/effective-rank.md")]
pub mod effective_rank {}

#[doc = include_str!("../../../book/src/allocation.md")]
pub mod allocation {}

#[doc = include_str!("../../../book/src/basis-sharing.md")]
pub mod basis_sharing {}

#[doc = include_str!("../../../book/src/residual.md")]
pub mod residual {}

#[doc = include_str!("../../../book/src/formats.md")]
pub mod formats {}

#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
