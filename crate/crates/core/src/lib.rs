//! Numerical flows of rough (non-Lipschitz) vector fields.
//!
//! The crate computes classical flows of continuous vector fields whose
//! spatial derivative is only Orlicz-summable, checks the quantitative
//! estimates that come with that setting (Osgood moduli, Gronwall and
//! Liouville identities, exponential-summability Sobolev bounds), estimates
//! flow-map regularity and pushforward densities empirically, and solves
//! transport/continuity Cauchy problems along characteristics.
//!
//! Modules:
//! * [`field`] — vector fields with evaluation and spatial Jacobians
//! * [`gallery`] — closed-form example fields used as oracles
//! * [`orlicz`] — gauges, moduli, Luxemburg norms, summability integrals
//! * [`flow`] — trajectories, flow maps, variational/Liouville solves
//! * [`regularity`] — Sobolev refinement studies, pushforward densities
//! * [`pde`] — transport/continuity solvers and weak-form residuals
//! * [`io`] — CSV/JSON serialization of grids and reports

pub mod domain;
pub mod field;
pub mod flow;
pub mod gallery;
pub mod io;
pub mod linalg;
pub mod orlicz;
pub mod pde;
pub mod quad;
pub mod regularity;

pub use domain::{BoxDomain, CellGrid, SpatialGrid};
pub use field::{FieldError, VectorField};
pub use linalg::MatrixSample;
