//! Independent references and theory checks for the solver.

pub mod classical;
pub mod local_opt;
pub mod nplayer;
pub mod riccati;

pub use classical::{classical_hjb_oracle, ClassicalError, ClassicalSolution};
pub use local_opt::{local_optimality_of, local_optimality_test, random_probes, Deviation, LocalOptReport, Probe};
pub use nplayer::{nplayer_simulate, SimReport};
pub use riccati::{equilibrium_riccati_oracle, riccati_oracle, EquilibriumRiccati, LqParams, OracleError, RiccatiSolution};
