//! Guided-rollout reinforcement learning at desk scale.
//!
//! The crate composes a distilled hidden Markov model with keyphrase DFAs to
//! form a guided behavior policy for rollout exploration, keeps exact
//! per-token importance weights, and optimizes a power-scaled clipped
//! surrogate objective with group-relative advantages. Brute-force
//! enumeration oracles cross-check every cleverly computed quantity on tiny
//! instances.

pub mod guidance;
pub mod hmm;
pub mod lexicon;
pub mod math;
pub mod optimizer;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod toyworld;

pub use guidance::{build_guidance_tables, GuidanceSession, GuidanceTables};
pub use hmm::{fit_baum_welch, Hmm};
pub use lexicon::{build_keyphrase_dfa, KeyphraseConstraint, KeyphraseDfa, Vocab};
pub use optimizer::{BaselineMode, TrainConfig, TrainState};
pub use policy::{ContextPolicy, PolicyGradient};
pub use rollout::{guided_next_distribution, GuidedTrajectory};
pub use toyworld::{TaskMode, ToyTask};
