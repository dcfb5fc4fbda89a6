//! The guide under `book/src`, compiled so that every Rust snippet runs as
//! a doc-test.

#![doc = include_str!("../../../book/src/introduction.md")]

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/censoring.md")]
pub mod censoring {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/learners.md")]
pub mod learners {}

#[doc = include_str!("../../../book/src/superlearner.md")]
pub mod superlearner {}

#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

#[doc = include_str!("../../../README.md")]
pub mod readme {}
