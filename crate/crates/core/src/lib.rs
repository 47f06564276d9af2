//! Incentive design for federated unlearning.
//!
//! Clients choose how much of their data to contribute to an unlearning round;
//! the server pays them to do so. Data heterogeneity is measured with kernel
//! mean embeddings, clients play a Nash game over participation levels and the
//! server picks payments under a budget.
//!
//! Module map:
//! - [`embedding`]: kernels, empirical mean embeddings and RKHS distances.
//! - [`scenario`]: seeded non-IID scenarios and [`scenario::GameProfile`].
//! - [`client_game`]: client utilities, best responses and Nash solving.
//! - [`server_opt`]: server objective, payment bounds and the incremental
//!   payment optimizer.
//! - [`oracle`]: brute-force and analytic cross-checks.
//! - [`report`]: the run modes behind the command-line tool.

pub mod client_game;
pub mod embedding;
pub mod error;
pub mod oracle;
pub mod par;
pub mod report;
pub mod scenario;
pub mod server_opt;

pub use error::{Error, Result};
