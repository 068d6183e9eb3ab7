use std::path::PathBuf;

use datorus_core::coupling::CouplingParams;
use datorus_core::da_family::{BumpSpec, Profile};
use datorus_core::ergodic_stats::ObservableSpec;
use datorus_core::torus_linalg::{analyze_matrix, IMat3, TorusPoint};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SValues {
    One(f64),
    Sweep(Vec<f64>),
}

impl SValues {
    pub fn values(&self) -> Vec<f64> {
        match self {
            SValues::One(s) => vec![*s],
            SValues::Sweep(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileName {
    Ramp,
    Cubic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BumpConfig {
    pub center: [f64; 3],
    pub radius: f64,
    pub profile: ProfileName,
    /// Corner width of the ramp profile.
    pub delta: f64,
}

impl Default for BumpConfig {
    fn default() -> Self {
        BumpConfig {
            center: [0.0; 3],
            radius: 0.49,
            profile: ProfileName::Ramp,
            delta: 0.1,
        }
    }
}

impl BumpConfig {
    pub fn spec(&self) -> Result<BumpSpec, CliError> {
        let center = TorusPoint::new(self.center)
            .map_err(|e| CliError::ConfigInvalid(format!("bump.center: {e}")))?;
        let profile = match self.profile {
            ProfileName::Ramp => Profile::Ramp { delta: self.delta },
            ProfileName::Cubic => Profile::Cubic,
        };
        BumpSpec::new(center, self.radius, profile)
            .map_err(|e| CliError::ConfigInvalid(format!("bump: {e}")))
    }
}

fn half() -> f64 {
    0.5
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ObservableConfig {
    /// amplitude·cos(2π k·x) + offset.
    Character {
        k: [i64; 3],
        #[serde(default = "half")]
        gamma: f64,
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        offset: f64,
    },
    /// amplitude·d(x, center)^gamma + offset.
    Cusp {
        center: [f64; 3],
        #[serde(default = "half")]
        gamma: f64,
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        offset: f64,
    },
    Constant {
        value: f64,
    },
}

impl ObservableConfig {
    pub fn spec(&self) -> Result<ObservableSpec, CliError> {
        let check_gamma = |g: f64| {
            if g > 0.0 && g <= 1.0 {
                Ok(())
            } else {
                Err(CliError::ConfigInvalid(format!(
                    "observable gamma {g} must lie in (0, 1]"
                )))
            }
        };
        Ok(match self {
            ObservableConfig::Character {
                k,
                gamma,
                amplitude,
                offset,
            } => {
                check_gamma(*gamma)?;
                ObservableSpec::character(*k, *gamma)
                    .scaled(*amplitude)
                    .shifted(*offset)
            }
            ObservableConfig::Cusp {
                center,
                gamma,
                amplitude,
                offset,
            } => {
                check_gamma(*gamma)?;
                let c = TorusPoint::new(*center)
                    .map_err(|e| CliError::ConfigInvalid(format!("cusp center: {e}")))?;
                ObservableSpec::cusp(c, *gamma)
                    .scaled(*amplitude)
                    .shifted(*offset)
            }
            ObservableConfig::Constant { value } => ObservableSpec::constant(*value),
        })
    }

    pub fn label(&self) -> String {
        match self {
            ObservableConfig::Character { k, .. } => format!("chi({},{},{})", k[0], k[1], k[2]),
            ObservableConfig::Cusp { center, .. } => {
                format!("cusp({},{},{})", center[0], center[1], center[2])
            }
            ObservableConfig::Constant { value } => format!("const({value})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviationConfig {
    /// Index into `observables`.
    pub observable: usize,
    pub eps: f64,
    pub ns: Vec<usize>,
    /// Subtract the sampled ν_f mean first.
    pub centered: bool,
}

impl Default for DeviationConfig {
    fn default() -> Self {
        DeviationConfig {
            observable: 3,
            eps: 0.1,
            ns: (1..=8).map(|k| 5 * k).collect(),
            centered: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentConfig {
    pub observable: usize,
    pub s_mom: f64,
    pub n_max: usize,
    pub plaques: usize,
    pub per_leaf: usize,
}

impl Default for MomentConfig {
    fn default() -> Self {
        MomentConfig {
            observable: 4,
            s_mom: 1.0,
            n_max: 5,
            plaques: 20,
            per_leaf: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CouplingConfig {
    #[serde(rename = "K")]
    pub k: f64,
    pub lambda: f64,
    pub eps: f64,
    pub max_runs: usize,
    pub mass_floor: f64,
    /// Random rectangle pairs per s.
    pub pairs: usize,
    /// Steps past the coupling time in the distance audit.
    pub distance_steps: usize,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        let p = CouplingParams::default();
        CouplingConfig {
            k: p.k,
            lambda: p.lambda,
            eps: p.eps,
            max_runs: p.max_runs,
            mass_floor: p.mass_floor,
            pairs: 20,
            distance_steps: 20,
        }
    }
}

impl CouplingConfig {
    pub fn params(&self) -> CouplingParams {
        CouplingParams {
            k: self.k,
            lambda: self.lambda,
            eps: self.eps,
            max_runs: self.max_runs,
            mass_floor: self.mass_floor,
            ..CouplingParams::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub matrix: IMat3,
    pub s: SValues,
    pub grid_n: usize,
    pub depth: usize,
    pub frame_grid: usize,
    pub frame_iters: usize,
    pub ph_grid: usize,
    pub cone_angle: f64,
    pub boxes_per_axis: usize,
    /// Largest lag of the correlation series.
    pub n_max: usize,
    pub sample_count: usize,
    /// Orbit lengths of the exponent series.
    pub orbit_lengths: Vec<usize>,
    pub fiber_samples: usize,
    pub qi_pairs: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub bump: BumpConfig,
    pub observables: Vec<ObservableConfig>,
    /// Index pairs into `observables`.
    pub correlation_pairs: Vec<[usize; 2]>,
    pub deviations: DeviationConfig,
    pub moment: MomentConfig,
    pub coupling: CouplingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let ch = |k: [i64; 3]| ObservableConfig::Character {
            k,
            gamma: 0.5,
            amplitude: 1.0,
            offset: 0.0,
        };
        ExperimentConfig {
            matrix: datorus_core::COMPANION,
            s: SValues::One(0.05),
            grid_n: 24,
            depth: 120,
            frame_grid: 12,
            frame_iters: 120,
            ph_grid: 64,
            cone_angle: 0.3,
            boxes_per_axis: 2,
            n_max: 25,
            sample_count: 100_000,
            orbit_lengths: vec![10, 20, 30, 40, 50],
            fiber_samples: 64,
            qi_pairs: 32,
            seed: 20_240_601,
            output_dir: PathBuf::from("datorus-out"),
            bump: BumpConfig::default(),
            observables: vec![
                ch([0, 1, 0]),
                ch([1, 1, 0]),
                ch([1, 1, -1]),
                ObservableConfig::Character {
                    k: [0, 1, 0],
                    gamma: 0.5,
                    amplitude: 0.25,
                    offset: 0.0,
                },
                ObservableConfig::Character {
                    k: [0, 1, 0],
                    gamma: 0.5,
                    amplitude: 0.5,
                    offset: -0.55,
                },
                ObservableConfig::Cusp {
                    center: [0.0; 3],
                    gamma: 0.5,
                    amplitude: 1.0,
                    offset: 0.0,
                },
            ],
            correlation_pairs: vec![[0, 0], [1, 2], [5, 5]],
            deviations: DeviationConfig::default(),
            moment: MomentConfig::default(),
            coupling: CouplingConfig::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::ConfigInvalid(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| invalid(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        analyze_matrix(self.matrix).map_err(|e| invalid(format!("matrix: {e}")))?;
        self.bump.spec()?;
        let s = self.s.values();
        if s.is_empty() || s.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("s must be a nonempty list of finite values >= 0"));
        }
        let positive = [
            ("grid_n", self.grid_n.saturating_sub(1)),
            ("depth", self.depth),
            ("frame_grid", self.frame_grid),
            ("frame_iters", self.frame_iters),
            ("boxes_per_axis", self.boxes_per_axis),
            ("n_max", self.n_max),
            ("sample_count", self.sample_count),
            ("fiber_samples", self.fiber_samples),
            ("qi_pairs", self.qi_pairs),
            ("moment.n_max", self.moment.n_max),
            ("moment.plaques", self.moment.plaques),
            ("coupling.pairs", self.coupling.pairs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(format!("{name} is too small")));
            }
        }
        if self.ph_grid < 16 {
            return Err(invalid("ph_grid must be >= 16"));
        }
        if !(self.cone_angle > 0.0 && self.cone_angle < 1.0) {
            return Err(invalid("cone_angle must lie in (0, 1)"));
        }
        if self.orbit_lengths.is_empty() || self.orbit_lengths.contains(&0) {
            return Err(invalid("orbit_lengths must be nonempty and positive"));
        }
        for o in &self.observables {
            o.spec()?;
        }
        let nobs = self.observables.len();
        let idx_ok = |i: usize, what: &str| {
            if i < nobs {
                Ok(())
            } else {
                Err(invalid(format!(
                    "{what} refers to observable {i}, only {nobs} defined"
                )))
            }
        };
        for p in &self.correlation_pairs {
            idx_ok(p[0], "correlation_pairs")?;
            idx_ok(p[1], "correlation_pairs")?;
        }
        idx_ok(self.deviations.observable, "deviations.observable")?;
        idx_ok(self.moment.observable, "moment.observable")?;
        if !(self.deviations.eps > 0.0) || self.deviations.ns.is_empty() {
            return Err(invalid("deviations needs eps > 0 and a nonempty ns"));
        }
        if !(self.moment.s_mom > 0.0) || self.moment.per_leaf < 2 {
            return Err(invalid("moment needs s_mom > 0 and per_leaf >= 2"));
        }
        self.coupling
            .params()
            .validate()
            .map_err(|e| invalid(format!("coupling: {e}")))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        digest(&serde_json::to_vec(&c).expect("config serializes"))
    }
}

pub fn digest(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
