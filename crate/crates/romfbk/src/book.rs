//! The user guide, embedded so its code samples compile and run with the
//! test suite.
//!
//! The source lives in `book/` at the workspace root and renders with
//! `mdbook build book`. Each chapter is included verbatim below, which
//! turns every Rust block in the guide into a doc-test; the book cannot
//! drift from the library without failing `cargo test`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/transport-model.md")]
pub mod transport_model {}

#[doc = include_str!("../../../book/src/optimal-control.md")]
pub mod optimal_control {}

#[doc = include_str!("../../../book/src/reduction.md")]
pub mod reduction {}

#[doc = include_str!("../../../book/src/networks-and-losses.md")]
pub mod networks_and_losses {}

#[doc = include_str!("../../../book/src/online-loop.md")]
pub mod online_loop {}

#[doc = include_str!("../../../book/src/artifacts-and-cli.md")]
pub mod artifacts_and_cli {}
