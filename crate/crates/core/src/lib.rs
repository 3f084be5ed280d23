// NaN-rejecting guards use negated comparisons; numeric kernels index explicitly.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cohort;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod ingest;
pub mod pipeline;
pub mod pooling;
pub mod represent;
pub mod rss;
pub mod synth;
pub mod text;

pub use error::{Error, Result};
pub use exec::Execution;
