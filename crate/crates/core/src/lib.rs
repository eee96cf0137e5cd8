//! Meta-learning for linear inverse imaging problems.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`rng`], [`numerics`], [`npy`]: dense arrays, seeded
//!   randomness, metrics and gradient checks.
//! * [`operators`]: measurement operators with exact adjoints, kernel
//!   projectors, pseudo-inverses, TV prox and task generation.
//! * [`bayes`]: Gaussian priors and the closed-form Bayes estimator for
//!   noiseless linear measurements.
//! * [`models`]: the linear reconstruction model and the unrolled
//!   primal-dual network with hand-written reverse mode.
//! * [`bilevel`]: losses, inner solvers, unrolled hypergradients, meta
//!   training and fine-tuning.
//! * [`harness`]: experiment configuration, datasets, metrics files and the
//!   experiment drivers used by the `metainv` binary.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bayes;
pub mod bilevel;
pub mod error;
pub mod harness;
pub mod models;
pub mod npy;
pub mod numerics;
pub mod operators;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use operators::{LinearOp, OpKind, Sample, Split, Task, TaskKind};
pub use rng::Rng;
pub use tensor::Tensor;
