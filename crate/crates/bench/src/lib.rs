//! Shared fixtures for the kernel benchmarks.

use datorus_core::{analyze_matrix, make_da_map, BumpSpec, DaMap, COMPANION};

/// The companion-matrix DA map at amplitude `s` with the standard bump.
pub fn standard_map(s: f64) -> DaMap {
    let spec = analyze_matrix(COMPANION).expect("companion matrix is hyperbolic");
    make_da_map(&spec, BumpSpec::standard(), s).expect("standard amplitude is admissible")
}
