//! Test-time adaptation of a source-trained model to an unlabeled, shifted
//! target domain, built around three mechanisms:
//!
//! - entropy-ranked partition of the target set into a confident
//!   pseudo-source subset and the remaining target subset,
//! - hierarchical prediction aggregation that fuses per-patch and
//!   downsampled-global predictions,
//! - confidence-aware complementary learning that supervises both confident
//!   positives and confidently rejected classes through a ternary mask.
//!
//! The crate ships desk-scale differentiable models with hand-derived
//! backward passes, deterministic synthetic domain-shift generators, the
//! two-stage adaptation engine (offline and streaming), and the verification
//! tools for the threshold bounds the method relies on.

pub mod alignment;
pub mod cacl;
pub mod dump;
pub mod error;
pub mod field;
pub mod gradcheck;
pub mod hfa;
pub mod netcore;
pub mod numerics;
pub mod selection;

pub use cacl::{CaclConfig, TauNegSchedule, TernaryMask};
pub use error::{Error, Result};
pub use field::{Field, LabelField, Rect};
pub use netcore::{ModelParams, ModelShape, OptimState, ParamGrads};
pub use numerics::{ProbDist, SortedDist, TheoremReport};
pub use selection::{DomainPartition, EntropyBank};
