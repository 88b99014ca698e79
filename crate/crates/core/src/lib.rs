//! Learning odometry-augmented hidden Markov models of topological
//! environments.
//!
//! An augmented HMM extends the classic ⟨S, O, A, B, π⟩ tuple with a
//! pairwise odometric relation matrix R (planar displacement means and
//! variances plus von Mises heading parameters) whose means must form a
//! directed metric. The learner is a constrained Baum-Welch variant: the
//! E-step folds relation densities into the forward/backward recursions and
//! the M-step reestimates R under anti-symmetry or full additivity.
//!
//! Crate layout follows the pipeline: [`sim`] generates ground-truth models
//! and noisy experience sequences, [`init`] builds starting models,
//! [`inference`] + [`reestimate`] run the EM loop, [`eval`] scores learnt
//! models against the truth via sampled KL divergence, and [`experiment`]
//! orchestrates seeded multi-restart sweeps.

pub mod circular;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod inference;
pub mod io;
pub mod model;
pub mod reestimate;
pub mod init;
pub mod sim;

pub use error::{OdoHmmError, Result};
pub use model::{
    AugmentedHmm, ConstraintRegime, CoordinateRegime, ExperienceSequence, OdoReading,
    RelationEntry, ValidationReport, Violation,
};
pub use reestimate::{learn, EmConfig, EmTrace, LearnOutcome, StateEmbedding};
