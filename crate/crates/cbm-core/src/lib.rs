//! Simulation engine for center-based models of biological cell populations.
//!
//! Cells are represented by their center coordinates and move under pairwise
//! distance-dependent forces derived from a short-range potential. The
//! resulting gradient ODE system is integrated with adaptive time steppers:
//!
//! * [`steppers::srfe_step`] — single rate forward Euler, step size from a
//!   local error estimate only,
//! * [`steppers::srfes_step`] — single rate forward Euler with an explicit
//!   stability bound from Gershgorin disks,
//! * [`steppers::mrfe_macro_step`] — two-level multirate forward Euler that
//!   advances strongly forced cells with `m` substeps inside one macro step,
//! * [`steppers::srbe_step`] — backward Euler solved by Newton–GMRES,
//!
//! plus a fixed-step baseline and a displacement-bound controller for
//! comparison. The [`scenarios`] module generates the standard test
//! configurations (relaxing cell pair, division inside a spheroid, linearly
//! growing tissue) with deterministic, seedable randomness, and [`analysis`]
//! provides reference solutions, error measurement, convergence studies, and
//! evaluation-count benchmarking.

pub mod analysis;
pub mod error;
pub mod jacobian;
pub mod linsolve;
pub mod model;
pub mod report;
pub mod scenarios;
pub mod steppers;

pub use error::Error;
pub use jacobian::{assemble, BlockJacobian, EigenEstimate};
pub use model::{build_neighbor_list, CellPopulation, ForceLaw, NeighborList, PairGeometry};
pub use scenarios::{
    division_in_spheroid, hcp_spheroid, linear_growth, two_cell_config, DivisionEvent, Scenario,
    ScenarioSpec, SeededRng,
};
pub use steppers::{
    Constraint, EvalCounters, Method, MultirateLevels, SimState, SolverConfig, StepDecision,
    TrajectoryRecord,
};
