//! Criterion benchmarks live in `benches/`; run them with `cargo bench -p odap-bench`.

use odap_core::scenario::{load_scenario, Scenario, CASE_STUDY_ODAP};

/// Bundled scenario with whole-fragment transfers, the heaviest case.
pub fn reference_scenario() -> Scenario {
    load_scenario(CASE_STUDY_ODAP).expect("bundled scenario is valid")
}
