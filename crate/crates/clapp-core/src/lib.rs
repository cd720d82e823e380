//! Layer-local, self-supervised plasticity for feedforward encoders.
//!
//! The crate implements a family of contrastive, predictive learning rules
//! that train each layer of an encoder with information available at that
//! layer: pre/post-synaptic activity, a dendritic prediction routed through
//! explicit weights, and broadcast modulation signals derived from the
//! fixation/saccade structure of the input stream. Reference gradient paths
//! (softmax contrastive and blocked analytic chains) plus finite-difference
//! oracles certify that the hand-written updates descend the loss they claim
//! to.
//!
//! Module map:
//!
//! - [`tensor`] — dense array kernel: matmul, conv2d, max-pool, activations,
//!   and the within-layer adjoint.
//! - [`stream`] — datasets, the fixation/saccade event stream, image
//!   patchification, synthetic sequence data.
//! - [`encoder`] — the feedforward stack with per-step state capture and a
//!   trace ring for delayed context lookups.
//! - [`plasticity`] — hinge score/loss, broadcast modulator, the local update
//!   rules, synchronous variants, and softmax-contrastive reference gradients.
//! - [`recurrent`] — GRU with gradient-blocked recurrence, eligibility-trace
//!   updates, and the reverse-sweep reference.
//! - [`probe`] — frozen-encoder linear classification per layer.
//! - [`verify`] — finite differences, blocked analytic gradients, and the
//!   rule-vs-oracle equivalence report.
//! - [`train`] — batched training loop shared by the CLI and tests.
//! - [`config`] — run configuration, validation, serialization.
//! - [`checkpoint`] — JSON manifest + raw float32 blob persistence.

pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod plasticity;
pub mod probe;
pub mod recurrent;
pub mod stream;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{ClappError, Result};
pub use tensor::{Scalar, Tensor};
