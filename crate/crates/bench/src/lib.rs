//! Fixtures shared by the benchmarks.

use std::path::PathBuf;

use dercoord::sim::Scenario;

/// Loads one of the bundled scenarios by file name.
pub fn bundled(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/scenarios").join(name);
    Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
