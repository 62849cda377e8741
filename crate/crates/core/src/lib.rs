//! Flow-matching generation under stochastic optimal control.
//!
//! The crate trains small velocity fields with the conditional flow-matching
//! loss, steers sampling with a single-pass instantaneous controller,
//! fine-tunes an additive control network with Adjoint Matching under the
//! memoryless noise schedule, and scores multi-subject disentanglement with
//! the normalized Jensen-Shannon FOCUS cost.
//!
//! Runnable walkthroughs live in `examples/`, one per capability:
//!
//! ```text
//! cargo run --release --example train_base_field
//! cargo run --release --example sample_ode_sde
//! cargo run --release --example focus_cost
//! cargo run --release --example test_time_control
//! cargo run --release --example adjoint_matching
//! cargo run --release --example vp_correspondence
//! cargo run --release --example metrics_and_elo
//! ```

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod control;
pub mod costs;
pub mod error;
pub mod field;
pub mod linalg;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod schedules;

pub use error::{Error, Result};
