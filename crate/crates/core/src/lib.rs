//! Robust cross-modal matching under noisy correspondence.
//!
//! The crate is organised bottom-up:
//!
//! - [`mi`]: histogram estimates of marginal/joint distributions and mutual information.
//! - [`sivc`]: anchor selection, MI change rates and soft correspondence labels.
//! - [`gmm`]: two-component 1-D Gaussian mixture over per-sample losses and clean/noisy division.
//! - [`encoder`]: linear dual encoder into a shared unit-norm space, SGD and checkpoints.
//! - [`loss`]: hard-negative triplet loss with the distribution-adaptive soft margin.
//! - [`trilearning`]: Coordinator/Master/Assistant training, Co-teaching and unfiltered baselines.
//! - [`data`]: synthetic paired features, shuffle-noise injection, splitting and the dataset file.
//! - [`eval`]: Recall@K, Rsum, partition quality and seed batteries.
//! - [`run`]: run directories (`metrics.csv`, checkpoints, manifest).

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![cfg_attr(test, allow(clippy::needless_range_loop))]

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod loss;
pub mod matrix;
pub mod mi;
pub mod rng;
pub mod run;
pub mod sivc;
pub mod trilearning;

pub use error::{Result, TsvcError};
