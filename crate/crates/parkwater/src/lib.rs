//! Planning engine for industrial-park water-reuse networks.
//!
//! An industrial park is a set of plants, each with water sources (effluent
//! streams at known flowrate and contaminant concentration) and water sinks
//! (demands with a flowrate and a maximum acceptable inlet concentration).
//! Sources can be reused directly inside their own plant, every plant can
//! export collected effluent to a shared regeneration hub that removes part
//! of the contaminant load and redistributes the treated water, and any
//! shortfall is covered by freshwater. The planner picks flows, pipe
//! installations and one hub regenerator per horizon so that either the
//! weighted annual cost or the weighted freshwater intake is minimal over a
//! multi-period horizon with staged plant entry.
//!
//! The crate is organized in layers:
//!
//! * [`model`] — instance data (plants, sources, sinks, regenerator catalog,
//!   economics, scenario) and solution types, plus validation.
//! * [`formulation`] — turns an instance into an explicit optimization
//!   program: variables, linear constraints and flow-times-concentration
//!   products.
//! * [`lp`] — a self-contained bounded-variable revised simplex solver used
//!   for all linear relaxations.
//! * [`solver`] — convex envelopes for the bilinear products, interval bound
//!   tightening, a fixed-point incumbent heuristic and a deterministic
//!   best-first branch-and-bound search.
//! * [`verify`] — an independent residual checker, a brute-force oracle for
//!   tiny instances and comparison against published reference rows.
//! * [`io`] — JSON instance/solution files, summary CSV and Graphviz export.

pub mod formulation;
pub mod io;
pub mod lp;
pub mod model;
pub mod solver;
pub mod verify;

#[cfg(test)]
pub(crate) mod testutil;

pub use model::{
    annualization_factor, validate_instance, CostBreakdown, EconomicParams, ModelError,
    NetworkInstance, ObjectiveKind, PeriodState, PlantId, RegeneratorOption, Scenario, SinkId,
    SinkSpec, Solution, SourceId, SourceSpec, ValidationIssue,
};
pub use solver::{solve, SolveReport, SolverConfig, TerminationReason};
