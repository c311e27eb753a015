//! Gravity-regularized training and structured pruning of small CNNs.
//!
//! The crate is split the way the pipeline runs:
//!
//! * [`tensor`], [`graph`], [`descriptor`]: dense tensors, the layer DAG and
//!   the text format describing architectures;
//! * [`forward`], [`backward`], [`optim`], [`train`]: the deterministic f32
//!   engine and the SGD loop;
//! * [`gravity`]: filter masses, attractor selection, forces and the
//!   sign-gradient penalty folded into training;
//! * [`pruning`], [`cost`]: L1 filter ranking, model surgery, and analytic
//!   parameter/FLOP reports with speedup/compression ratios;
//! * [`checkpoint`]: the binary model format;
//! * [`check`]: independent f64 reference implementations used to verify all
//!   of the above.

pub mod backward;
pub mod check;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod descriptor;
pub mod error;
pub mod forward;
pub mod graph;
pub mod gravity;
pub mod optim;
pub mod pruning;
pub mod tensor;
pub mod train;

pub use backward::{backward, GradMap};
pub use checkpoint::{load_checkpoint, save_checkpoint, TrainMeta};
pub use cost::{cost_model, speedup_compression, CostReport};
pub use data::Dataset;
pub use descriptor::{build_model, parse_descriptor, to_descriptor};
pub use error::{CoreError, Result};
pub use forward::forward;
pub use graph::{Init, LayerId, LayerKind, ModelGraph};
pub use gravity::{AttractorMode, GravityConfig};
pub use optim::sgd_step;
pub use pruning::{apply_plan, make_pruning_plan, mask_filters, PruningPlan};
pub use tensor::TensorRec;
pub use train::{evaluate, train, EpochLog, LrSchedule, TrainOptions};
