//! Freeway traffic toolkit: cell-transmission simulation with controlled
//! merging junctions, a cumulative-flow reformulation with structure
//! checkers, an embedded sparse bounded-variable simplex solver, an exact
//! linear-programming relaxation of the finite-horizon ramp-metering
//! problem with feasible-trajectory recovery, and a receding-horizon
//! controller for plants with capacity drop.

pub mod cctm;
pub mod fnc;
pub mod fundamental;
pub mod lp;
pub mod mpc;
pub mod network;
pub mod scenario;
pub mod sim;
