//! Doc-test harness for the guide: every fenced Rust block in the book's
//! chapters compiles and runs under `cargo test --doc`, one module per
//! chapter so a failure names its source file.

#[doc = include_str!("src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("src/data-model.md")]
pub mod data_model {}
#[doc = include_str!("src/likelihood.md")]
pub mod likelihood {}
#[doc = include_str!("src/fitting.md")]
pub mod fitting {}
#[doc = include_str!("src/robust-covariance.md")]
pub mod robust_covariance {}
#[doc = include_str!("src/least-false.md")]
pub mod least_false {}
#[doc = include_str!("src/weighted-and-local.md")]
pub mod weighted_and_local {}
#[doc = include_str!("src/nonparametric.md")]
pub mod nonparametric {}
#[doc = include_str!("src/simulation.md")]
pub mod simulation {}
#[doc = include_str!("src/cli.md")]
pub mod cli {}
