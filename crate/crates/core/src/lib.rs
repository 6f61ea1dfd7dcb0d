//! Feature-centroid contrastive learning (FCCL) at desk scale.
//!
//! A classifier is trained with cross-entropy plus a contrastive term that
//! pulls each l2-normalized feature toward its own class centroid and away
//! from the centroids of the other classes. Centroids are kept in a
//! [`CentroidBank`] and updated by an exponential moving average whose
//! smoothing coefficient grows linearly to 1 over training.
//!
//! Modules:
//! - [`centroid_bank`]: EMA class centroids and their checkpoint format.
//! - [`losses`]: contrastive loss, cross-entropy, the combined objective and gradients.
//! - [`model`]: MLP backbone, linear head, backprop, SGD and the warmup/cosine schedule.
//! - [`data`]: synthetic domain-shifted datasets, CSV tables, batching.
//! - [`trainer`]: source training, pseudo-labelling and target fine-tuning.
//! - [`metrics`]: quadratic weighted kappa, binary and macro one-vs-rest AUC.
//! - [`diagnostics`]: class/centroid cosine heatmap, PCA projection, feature spread.
//! - [`cli`]: the `fccl` command line and its run-directory layout.

// `!(x >= y)` is used on purpose so NaN is rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod centroid_bank;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod trainer;

pub use centroid_bank::{l2_normalize, CentroidBank};
pub use data::{Dataset, Domain, SynthConfig};
pub use error::{FcclError, Result};
pub use linalg::Matrix;
pub use losses::LossBreakdown;
pub use model::{ModelDims, ModelParams, OptimState};
pub use trainer::{RunReport, TrainConfig};
