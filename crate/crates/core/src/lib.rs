//! Numerical simulation of locally constrained inverse curvature flows, the
//! inverse mean curvature flow and the volume-preserving Guan–Li flow for
//! radial graphs in warped products `N = (a, b) × S₀`, `ḡ = dr² + ϑ(r)² σ`,
//! together with audits of the associated integral identities, monotone
//! quantities and Minkowski-type inequalities.
//!
//! The crate is organised bottom-up:
//!
//! * [`ambient`]: warp functions, assumption checks, ambient Ricci blocks and
//!   radial-slice reference functionals (`φ`, `ψ`).
//! * [`basegrid`]: discretisation of `S₀` (periodic torus or axisymmetric
//!   sphere), finite-difference partials and quadrature.
//! * [`geometry`]: extrinsic geometry of a graph `r = u(y)` per grid node.
//! * [`flow`]: time stepping, initial data and checkpoints.
//! * [`audit`]: functionals, identity residuals, inequality gaps and
//!   trajectory verdicts.

pub mod ambient;
pub mod audit;
pub mod basegrid;
pub mod flow;
pub mod geometry;
mod quadrature;

pub use ambient::{
    AmbientVector, AssumptionReport, BaseManifold, SliceData, SliceFunctional, WarpFamily,
    WarpFunction, WarpJet, WarpedSpace,
};
pub use audit::{AuditReport, AuditTolerances, Functionals, InequalityGaps};
pub use basegrid::{BaseGrid, Chart, Partials, ScalarField};
pub use flow::{
    FlowConfig, FlowError, FlowState, FlowType, Integrator, Perturbation, RunResult, RunVerdict,
    StepRecord,
};
pub use geometry::{CurvatureFunction, GeometryFields};
