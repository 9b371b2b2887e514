//! Distributed primal-dual frequency and voltage control of AC microgrids:
//! network model, power flow, plant and controller dynamics, optimality
//! oracle, closed-loop simulation and passivity checks.

pub mod analysis;
pub mod cli;
pub mod controller;
pub mod equilibrium;
pub mod error;
pub mod invariants;
pub mod netmodel;
pub mod plant;
pub mod plot;
pub mod powerflow;
pub mod sim;

pub use error::{Error, Result};
