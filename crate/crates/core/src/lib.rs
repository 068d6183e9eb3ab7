//! Numerical laboratory for derived-from-Anosov maps of the 3-torus.
//!
//! The crate builds a DA perturbation `f = A + s·ρ·e₂` of a hyperbolic
//! integer automorphism, solves the semiconjugacy `h∘f = A∘h`, and runs
//! plaque, transfer-operator, Monte Carlo and coupling experiments on top.

pub mod coupling;
pub mod da_family;
pub mod ergodic_stats;
pub mod error;
pub mod numerics;
pub mod plaques;
pub mod semiconjugacy;
pub mod torus_linalg;

pub use coupling::{
    first_run, hyperbolic_block_mass, matched_distance_check, run_coupling, stopping_step,
    tail_statistics, CoupledPair, CouplingParams, CouplingRecord, FirstRunResult, PlaqueRectangle,
};
pub use da_family::{
    compute_frames, eval_and_diff, make_da_map, verify_partial_hyperbolicity, BumpSpec, DaMap,
    FrameField, PartialHyperbolicityReport, Profile,
};
pub use ergodic_stats::{
    birkhoff_sum, center_exponent, correlation_series, deviation_tail, fit_exponential,
    moment_bound_check, mostly_contracting_check, oscillation_check, plaque_birkhoff_mean,
    sample_nu_f, EstimateSeries, ObservableKind, ObservableSpec, RateFit,
};
pub use error::{Error, Result};
pub use plaques::{
    cs_holonomy, grow_plaque, linear_partition, project_e0, reference_measure, transfer_split,
    transfer_step, APlaque, Partition, Plaque, TransferSplit, WeightedPlaqueMeasure,
};
pub use semiconjugacy::{
    eval_h, fiber_probe, invert_h, leaf_bijectivity_check, quasi_isometry_probe, solve_h,
    DisplacementField, LeafKind, SemiconjugacyReport,
};
pub use torus_linalg::{
    analyze_matrix, apply_auto, eigen_coords, torus_reduce, IntegerAutomorphism, LatticePoint,
    SpectralData, TorusPoint,
};

/// The companion matrix of x³ − 3x² + 1, the default base automorphism.
pub const COMPANION: torus_linalg::IMat3 = [[0, 0, -1], [1, 0, 0], [0, 1, 3]];
