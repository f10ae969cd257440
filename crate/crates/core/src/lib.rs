//! Optimal bid and ask quotes for a market maker whose reference price follows
//! an Ornstein-Uhlenbeck process.
//!
//! The reduced HJB equation is solved on a price/inventory lattice by two
//! independent schemes ([`fd_solver`] and [`splitstep`]). The long-time
//! behaviour is checked against closed-form limits ([`policy`]) and against
//! the ground state of a Schrödinger problem ([`equilibrium`]), and the
//! resulting quotes can be traded in a Monte Carlo market ([`simulator`]).

pub mod cli;
pub mod config;
pub mod equilibrium;
pub mod error;
pub mod fd_solver;
pub mod lattice;
pub mod linalg;
pub mod model;
pub mod persist;
pub mod policy;
pub mod simulator;
pub mod solution;
pub mod splitstep;

pub use error::{Error, Result};
