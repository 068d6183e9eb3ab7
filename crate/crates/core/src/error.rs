use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix determinant {det} is not +1 or -1")]
    NotInvertibleOverZ { det: i64 },
    #[error("spectrum is not real with distinct moduli off the unit circle: {reason}")]
    SpectrumNotRealSplit { reason: String },
    #[error("expected 2 contracting and 1 expanding eigenvalue, found {contracting} contracting")]
    WrongStableDimension { contracting: usize },
    #[error("non-finite input coordinate")]
    NonFiniteInput,
    #[error("lattice modulus {modulus} too large for exact arithmetic")]
    ModulusOverflow { modulus: i64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("map is not a diffeomorphism: det df changes sign near cell {cell:?} (det {det})")]
    NotDiffeomorphism { cell: [usize; 3], det: f64 },
    #[error("partial hyperbolicity check failed at cell {cell:?}: {reason}")]
    VerificationFailed { cell: [usize; 3], reason: String },
    #[error("no convergence at {point:?}: residual {residual:e}")]
    NoConvergence { point: [f64; 3], residual: f64 },
    #[error("series depth {depth} insufficient: residual {residual:e}, try depth {suggested}")]
    DepthInsufficient {
        depth: usize,
        residual: f64,
        suggested: usize,
    },
    #[error("leaf integration stalled at {point:?}")]
    LeafIntegrationStalled { point: [f64; 3] },
    #[error("h-image parameter not increasing at node {node}")]
    HImageNonMonotone { node: usize },
    #[error("leaf integration diverged at {point:?}")]
    LeafIntegrationDiverged { point: [f64; 3] },
    #[error("child construction failed: {0}")]
    ChildConstructionFailed(String),
    #[error("plaques lie in different boxes: {src:?} vs {dst:?}")]
    NotSameBox { src: [i64; 3], dst: [i64; 3] },
    #[error("holonomy image leaves the destination plaque at parameter {param}")]
    HolonomyOutOfPlaque { param: f64 },
    #[error("dropped fraction {rate:e} exceeds {limit:e}")]
    ExcessiveDropRate { rate: f64, limit: f64 },
    #[error("only {usable} entries above the noise floor, need {needed}")]
    InsufficientSignal { usable: usize, needed: usize },
    #[error("tree has more than {limit} leaves")]
    TreeTooLarge { limit: usize },
    #[error("no eps-approach found within {levels} levels")]
    NoEpsApproachWithinBudget { levels: usize },
    #[error("pairing mismatch: {0}")]
    PairingMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;
