//! Compiles and runs every listing in `book/src` as a doc-test.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/vehicle.md")]
pub mod vehicle {}
#[doc = include_str!("../../../book/src/ovm.md")]
pub mod ovm {}
#[doc = include_str!("../../../book/src/environment.md")]
pub mod environment {}
#[doc = include_str!("../../../book/src/networks.md")]
pub mod networks {}
#[doc = include_str!("../../../book/src/consensus.md")]
pub mod consensus {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/data-and-cli.md")]
pub mod data_and_cli {}
