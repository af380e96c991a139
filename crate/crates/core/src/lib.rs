//! Source-free domain adaptation by neighborhood reciprocity clustering.
//!
//! A classifier trained on labeled source data is adapted to an unlabeled
//! target set by pulling each prediction towards the stored predictions of
//! its nearest neighbors in feature space. Reciprocal neighbors get full
//! weight, others a small affinity `r`, and neighbors-of-neighbors add a
//! weak expanded signal. A diversity term keeps the mean prediction from
//! collapsing onto a few classes.
//!
//! Modules, bottom-up:
//! - [`math`]: matrices, normalization, softmax
//! - [`model`]: MLP with manual backprop, SGD-momentum, source pretraining
//! - [`bank`]: feature/score memory banks (full and FIFO)
//! - [`neighbors`]: kNN, reciprocity, affinity and expanded sets
//! - [`losses`]: the four adaptation losses and their logit gradients
//! - [`data`]: synthetic shifted domains and CSV I/O
//! - [`engine`]: the adaptation loop, diagnostics and ablation grid
//! - [`scenario`]: the reference synthetic shift used in tests and benches

pub mod bank;
pub mod data;
pub mod engine;
pub mod error;
pub mod losses;
pub mod math;
pub mod model;
pub mod neighbors;
pub mod scenario;

pub use bank::{FeatureBank, FifoBank, MemoryBanks, ScoreBank};
pub use data::{Dataset, Domain, ShiftSpec};
pub use engine::{AdaptConfig, BankMode, LossToggles, RunHistory};
pub use error::{NrcError, Result};
pub use losses::LossBreakdown;
pub use math::Matrix;
pub use model::{MlpModel, ModelConfig, OptimizerState, PretrainConfig};
pub use neighbors::{AffinityConfig, ExpandedTable, NeighborTable};
