//! The chapters of the book under `book/src`, compiled so that `cargo test`
//! runs every Rust snippet in them as a doctest.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}
#[doc = include_str!("../../../book/src/verification.md")]
pub mod verification {}
#[doc = include_str!("../../../book/src/rounds.md")]
pub mod rounds {}
#[doc = include_str!("../../../book/src/policies.md")]
pub mod policies {}
#[doc = include_str!("../../../book/src/predictor.md")]
pub mod predictor {}
#[doc = include_str!("../../../book/src/costs.md")]
pub mod costs {}
#[doc = include_str!("../../../book/src/oracle.md")]
pub mod oracle {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
