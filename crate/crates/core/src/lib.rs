//! Numerical laboratory for nonautonomous Kolmogorov operators
//! `A(t)φ = Tr(Q(t,x) D²φ) + <b(t,x), ∇φ>` on `R^d`, `d <= 3`.
//!
//! Two independent engines approximate the evolution operator `G(t,s)`: a particle
//! (SDE) engine and a finite-difference (PDE) engine. On top of them sit estimators
//! for the evolution system of measures and the convergence experiments.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod coefficient_model;
pub mod convergence;
pub mod error;
pub mod example_family;
pub mod linalg;
pub mod measure;
pub mod pde;
pub mod quadrature;
pub mod rng;
pub mod sde;
pub mod stats;
pub mod test_functions;

pub use coefficient_model::{
    apply_generator, hypothesis_scan, CoefficientModel, Coefficients, GrowthVariant, HypothesisConstants,
    HypothesisReport, Jet, LyapunovSpec, SamplingPlan,
};
pub use error::{Error, Result};
pub use example_family::{preset, DiffusionForm, ExampleParams, FamilyParams, OUParams, OuOracle, Preset, TimeProfile};
pub use rng::SeedLineage;
pub use test_functions::TestFunction;

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 3;
pub use convergence::{ConvergenceReport, Series, Verdict};
pub use measure::{DensityEstimate, Estimator, GEngine, MeasureConfig, MeasureEstimate, SpaceTimeWindowMeasure};
pub use pde::{FdConfig, GridFunction, SpatialGrid};
pub use sde::{InitSpec, IntegratorConfig, ParticleEnsemble};
