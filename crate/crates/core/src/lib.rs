//! Structured pruning laboratory.
//!
//! Small trainable feed-forward networks, 8x1 block masks, and the pruning
//! procedures built on them: iterative magnitude pruning (IMP), lottery-ticket
//! rewinding (LTH), language-agnostic pruning (LAP), fixed per-language
//! pathways, and the adaptive-masking variants (adaptive monolingual pruning
//! and dynamic pathways with residual masks).
//!
//! The "languages" are synthetic related classification tasks produced by
//! [`taskgen`]; everything else is independent of where the data comes from.

pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod masking;
pub mod net;
pub mod pathways;
pub mod pruners;
pub mod schedule;
pub mod taskgen;

mod train;

pub use error::{Error, Result};
pub use masking::{BlockMask, BlockScores, LayerShape, MaskDiagnostics, BLOCK_ROWS};
pub use net::{
    Activation, ForwardPass, Gradients, Layer, MaskPolicy, Matrix, ModelSpec, ModelState,
    Reduction, TrainConfig,
};
pub use pathways::{PathwayInit, PathwayRegistry, PathwayRunResult};
pub use pruners::{EventKind, EventRecord, MaskEvent, MetricRow, PruneRunResult, ScoringScope};
pub use schedule::{ScheduleEvent, SparsitySchedule};
pub use taskgen::{Batch, LanguageId, LanguageTask, SamplingScheme, TaskSuiteSpec};

/// Version string embedded in every artifact the harness writes.
pub const CODE_VERSION: &str = concat!("pathprune-", env!("CARGO_PKG_VERSION"));
