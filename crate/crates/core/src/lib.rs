//! Cross-modal alignment losses for text-to-aerial person retrieval.
//!
//! * [`numeric`]: dense matrices, a reverse-mode tape, and gradient checking.
//! * [`sdm`]: similarity distribution matching between two feature sets.
//! * [`cda`]: gated mixing of direct and ground-bridged matching.
//! * [`fuzzy`]: query-token interaction with fuzzy membership weighting.
//! * [`metrics`]: Rank-k, mAP and RSum.
//! * [`synth`]: seeded tri-modal worlds and training runs on them.
//! * [`io`]: embedding files, run configs, checkpoints.

pub mod cda;
pub mod error;
pub mod fuzzy;
pub mod gradsuite;
pub mod io;
pub mod metrics;
pub mod numeric;
pub mod sdm;
pub mod synth;

pub use error::{Error, Result};
