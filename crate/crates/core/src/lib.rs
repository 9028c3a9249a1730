//! Estimation of the average treatment effect on the treated (ATT) under a
//! multiplicative instrumental-variable model.
//!
//! The crate is organised bottom-up:
//!
//! * [`data`] holds the observed-data representation and cross-fitting fold plans.
//! * [`learners`] fits the first-stage nuisance surfaces `p_z`, `π_z`, `e_z`.
//! * [`fw`] builds pseudo-outcomes and the Forster–Warmuth series learner used
//!   for `δ(X)` and `Ω(X)`.
//! * [`estimator`] assembles the cross-fitted influence-function estimator, its
//!   variance and the median adjustment over repeated splits.
//! * [`baselines`] contains the single-arm Wald plug-in, the substitution
//!   estimator and two-stage least squares.
//! * [`simulation`] provides the data-generating processes, quadrature oracles and
//!   the replication harness.

pub mod baselines;
pub mod data;
pub mod error;
pub mod estimator;
pub mod fw;
pub mod learners;
mod linalg;
pub mod quadrature;
pub mod rng;
pub mod simulation;

pub use data::{make_fold_plan, make_stratified_fold_plan, validate, Dataset, FoldPlan, Observation};
pub use error::{MivError, Result};
pub use estimator::{
    cross_fit, eif_evaluate, median_adjust, mivhr_diagnostic, variance_and_ci, EstimateReport,
    RunConfig,
};
pub use fw::{BasisSpec, FwModel, PseudoOutcomeVariant};
pub use learners::{ClipPolicy, LearnerSpec, NuisanceFit};
pub use simulation::{Dgp4Params, GlimParams, OracleSurfaces, ReplicationSummary};
