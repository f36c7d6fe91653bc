//! Noise-robust classification with per-sample outlier slacks and
//! centroid-similarity soft labels on a small MLP.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod centroids;
pub mod data;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod numerics;
pub mod trainer;

pub use centroids::{keep_fraction, soft_label, ClassEmbeddings, SoftLabel};
pub use data::{synth_clusters, Dataset, Split, Standardizer, SynthSpec};
pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentSummary};
pub use loss::{LossTerms, Mode, UStore};
pub use metrics::{detection_auc, EpochRecord, TrainReport};
pub use model::{ForwardOutput, Gradients, MlpModel};
pub use noise::{NoiseKind, NoiseReport, NoiseSpec, PairMap};
pub use numerics::{Mat, Rng};
pub use trainer::{evaluate, predict, train, Execution, TrainConfig, Trainer};
