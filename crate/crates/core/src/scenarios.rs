//! Scenarios shipped with the library.

use crate::scenario::{parse_scenario, Scenario};

pub const REFERENCE_LQ: &str = include_str!("../scenarios/reference_lq.scn");
pub const HYPERBOLIC: &str = include_str!("../scenarios/hyperbolic.scn");
pub const DECOUPLED: &str = include_str!("../scenarios/decoupled.scn");
pub const NON_CONTRACTIVE: &str = include_str!("../scenarios/non_contractive.scn");

/// `(name, text)` of every bundled scenario.
pub const ALL: [(&str, &str); 4] = [
    ("reference_lq", REFERENCE_LQ),
    ("hyperbolic", HYPERBOLIC),
    ("decoupled", DECOUPLED),
    ("non_contractive", NON_CONTRACTIVE),
];

pub fn reference_lq() -> Scenario {
    parse_scenario(REFERENCE_LQ).expect("bundled scenario parses")
}

pub fn hyperbolic() -> Scenario {
    parse_scenario(HYPERBOLIC).expect("bundled scenario parses")
}

pub fn non_contractive() -> Scenario {
    parse_scenario(NON_CONTRACTIVE).expect("bundled scenario parses")
}

pub fn decoupled() -> Scenario {
    parse_scenario(DECOUPLED).expect("bundled scenario parses")
}
