//! Closed-loop equilibria of conditional mean-field games in a
//! regime-switching environment with general discounting.

pub mod cli_io;
pub mod equilibrium;
pub mod expr;
pub mod grid;
pub mod hjb;
pub mod meanfield_flow;
pub mod path_space;
pub mod regime_chain;
pub mod scenario;
pub mod scenarios;
pub mod validation;
