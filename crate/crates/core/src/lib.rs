//! Numerical core for packed particle media confined by a potential.
//!
//! The pipeline freezes time, packs `N` particles into the sublevel sets of
//! the effective potential, and recovers the velocity field that carries the
//! packing forward: a normal part fixed by the motion of the level sets and a
//! minimal tangential part solved on each level curve.

pub mod equilibrium;
pub mod error;
pub mod fields;
pub mod geom;
pub mod kinematics;
pub mod levelset;
pub mod oned;
pub mod roots;
pub mod scenario;
pub mod tangential;

pub use equilibrium::{compute_p, solve_fermi_level, EquilibriumOptions, EquilibriumState, GridSpec, PTable};
pub use error::{Error, Result};
pub use fields::{FieldSpec, Potential, Topology, Volume};
pub use geom::Point;
pub use levelset::{extract_level_curve, extract_level_curves, unit_normal, weighted_level_integral, LevelCurve};
pub use tangential::{minimality_gap, parallel_kinetic_energy, solve_theta_on_curve, tangential_velocity, CurveEllipticSystem, ThetaSolution};
pub use kinematics::{advect_particle, check_averaged_continuity, Flow, KinematicsContext, TangentialField, Trajectory, VelocityDecomposition};
pub use oned::{endpoint_speed_1d, solve_domain_1d, velocity_1d, Interval1D, OneDProfile};
pub use scenario::{counterexample_report, counterexample_scenario, run_scenario, CounterexampleReport, RunSummary, Scenario};
