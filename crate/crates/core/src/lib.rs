//! Layer-wise optimal task-vector merging.
//!
//! Given a pre-trained network and several fine-tuned experts, each
//! mergeable unit gets the shared delta that minimizes the summed squared
//! change of that unit's output across all tasks, evaluated on a handful of
//! exemplar inputs per task. The minimizers have closed forms:
//!
//! * matrix weights: `T* = (Σ_k X_kᵀX_k)† Σ_k X_kᵀX_k T_k`
//! * scale vectors: per-dimension weighted mean with weights `Σ x[d]²`
//! * bias vectors: the plain mean of the task deltas
//!
//! and the merged model is `W_pre + λ·T*`.
//!
//! Modules, bottom up: [`tensor`] (dense algebra), [`netspec`] (network
//! description, checkpoints, task vectors, file format), [`capture`]
//! (forward pass and feature statistics), [`merge_lot`] (the solvers and
//! pipeline), [`baselines`] (averaging, task arithmetic, direct parameter
//! merging), [`analysis`] (drift, loss change and Lipschitz bound
//! diagnostics), [`toybench`] (synthetic tasks and a tiny trainer) and
//! [`cli`].

pub mod analysis;
pub mod baselines;
pub mod capture;
pub mod cli;
pub mod error;
pub mod json;
pub mod merge_lot;
pub mod netspec;
pub mod tensor;
pub mod toybench;

pub use error::{Error, FormatError, Result};
pub use tensor::Matrix;
