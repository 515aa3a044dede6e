//! Latent factorization of sparse user x service x time quality tensors.
//!
//! The crate models a rank-R three-way factorization trained by stochastic
//! gradient descent over the observed entries only, in two interchangeable
//! regimes: a federated protocol in which each user's row of the tensor stays
//! on its own client and only service/time gradients travel, and a
//! centralized trainer that owns the whole tensor. Both share the same
//! arithmetic kernels, so matched configurations produce bit-identical
//! trajectories.
//!
//! `std` is optional; with `default-features = false` the crate is
//! `no_std` + `alloc` and the in-process transport (which needs a `Mutex`)
//! is compiled out.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(feature = "std")]
extern crate std;

pub mod centralized;
pub mod evaluation;
pub mod federation;
pub mod lft;
pub mod seed;
pub mod tensor;

pub(crate) mod float;

pub use centralized::{train_centralized, GradientMode};
pub use evaluation::{run_experiment, EvalError, EvaluationSet, ExperimentReport, RoundReport, TrialResult};
#[cfg(feature = "std")]
pub use federation::InProcessTransport;
pub use federation::{
    assemble_factors, client_bytes_per_round, run_training, server_bytes_per_round, server_round,
    ClientExecutor, ClientOutcome, ClientState, CommLedger, FedError, GradientBatch,
    GradientRecord, MessageKind, MessageRecord, ModelDownload, SequentialExecutor, ServerState,
    TrainOptions, Transport, TransportError,
};
pub use lft::{
    apply_step, apply_step_in_place, element_gradients, element_loss, full_loss, init_factors,
    predict, predict_rows, weighted_federated_loss, ElementGradients, Hyperparams, LatentFactors,
    LftError, Matrix,
};
pub use seed::derive_seed;
pub use tensor::{Entry, Shape, SparseTensor, SplitSpec, TensorError, UserShard};
