//! Run configuration. Every table rejects unknown keys; everything except
//! `seed` and `[model]` has a default.

use serde::{Deserialize, Serialize};

use translab::oracle::OracleGridConfig;
use translab::transfer::NormalizeConfig;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Required by every command except `oracle-check`.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    /// Truncation depth `D` of shift configurations.
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default)]
    pub out: Option<String>,
    /// Worker threads; results do not depend on it.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub normalize: NormalizeSection,
    #[serde(default)]
    pub decay: DecaySection,
    #[serde(default)]
    pub fclt: FcltSection,
    #[serde(default)]
    pub breiman: BreimanSection,
    #[serde(default)]
    pub support: SupportSection,
    #[serde(default)]
    pub oracle: OracleSection,
}

fn default_depth() -> usize {
    64
}

fn default_ambient() -> usize {
    2
}

fn default_p() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    /// Full shift over a finite alphabet.
    FullShiftFinite {
        points: Vec<f64>,
        /// Uniform when absent.
        #[serde(default)]
        weights: Option<Vec<f64>>,
        potential: FinitePotential,
    },
    /// Dyson potential on the circle (`ambient = 2`) or a higher sphere.
    DysonSphere {
        eps: f64,
        #[serde(default = "default_ambient")]
        ambient: usize,
    },
    /// Dyson potential with exponential a priori measure on `[0, ∞)`.
    DysonHalfline { eps: f64 },
    /// Backward weighted shift on truncated `ℓᵖ`.
    WeightedShift {
        /// Constant weight; exclusive with `weights`.
        #[serde(default)]
        constant: Option<f64>,
        #[serde(default)]
        weights: Option<Vec<f64>>,
        /// Length of the truncation when `constant` is used.
        #[serde(default)]
        dim: Option<usize>,
        #[serde(default = "default_p")]
        p: f64,
        #[serde(default)]
        c_lo: Option<f64>,
        #[serde(default)]
        c_hi: Option<f64>,
    },
    /// Affine maps `x ↦ scale·x + offset` on `[0, 1]` with equal weights;
    /// the dyadic pair when `maps` is absent.
    Ifs {
        #[serde(default)]
        maps: Option<Vec<[f64; 2]>>,
    },
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FinitePotential {
    Constant {
        value: f64,
    },
    /// `β·x_1`.
    Linear {
        beta: f64,
    },
    /// `J·x_1·x_2`.
    Pair {
        coupling: f64,
    },
    /// Values on words `w_1 ⋯ w_range`, indexed by `Σ idx(w_i)·s^{range−i}`.
    Table {
        range: usize,
        values: Vec<f64>,
    },
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizeSection {
    pub method: NormalizeMethod,
    pub spectral_n_max: usize,
    pub spectral_samples: usize,
    pub eigen_n: usize,
    pub eigen_particles: usize,
    pub probes: usize,
    pub check_samples: usize,
    pub tolerance: f64,
    pub flatness_trials: usize,
    pub flatness_n_max: usize,
    pub allow_flatness_override: bool,
}

impl Default for NormalizeSection {
    fn default() -> Self {
        let d = NormalizeConfig::default();
        Self {
            method: NormalizeMethod::Auto,
            spectral_n_max: d.spectral_n_max,
            spectral_samples: d.spectral_samples,
            eigen_n: d.eigen_n,
            eigen_particles: d.eigen_particles,
            probes: d.probes,
            check_samples: d.check_samples,
            tolerance: d.tolerance,
            flatness_trials: d.flatness_trials,
            flatness_n_max: d.flatness_n_max,
            allow_flatness_override: d.allow_flatness_override,
        }
    }
}

/// How `λ` and `h` are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizeMethod {
    /// Exact on finite-range potentials over small finite alphabets, estimated otherwise.
    #[default]
    Auto,
    Estimated,
    /// Perron eigenpair of the transfer matrix on cylinders.
    Exact,
}

/// Largest cylinder space the exact method builds.
pub const EXACT_MAX_STATES: usize = 4096;

impl NormalizeSection {
    pub fn to_config(&self, seed: u64, depth: usize) -> NormalizeConfig {
        NormalizeConfig {
            seed,
            depth,
            spectral_n_max: self.spectral_n_max,
            spectral_samples: self.spectral_samples,
            eigen_n: self.eigen_n,
            eigen_particles: self.eigen_particles,
            probes: self.probes,
            check_samples: self.check_samples,
            tolerance: self.tolerance,
            flatness_trials: self.flatness_trials,
            flatness_n_max: self.flatness_n_max,
            allow_flatness_override: self.allow_flatness_override,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecaySection {
    /// Depth of the coupled pair; at least the system depth.
    pub depth: usize,
    pub n_max: usize,
    /// Coupled paths per point of the cost series.
    pub samples: usize,
    /// `ε` of the log modulus `ω_ε`.
    pub omega_eps: f64,
    /// Both fitted exponents must be at most this.
    pub threshold: f64,
    pub center_steps: usize,
    pub correlation_steps: usize,
    pub correlation_n_max: usize,
    /// Correlation lags enter the fit only above this many standard errors.
    pub significance: f64,
    pub burn_in: usize,
}

impl Default for DecaySection {
    fn default() -> Self {
        Self {
            depth: 128,
            n_max: 64,
            samples: 2000,
            omega_eps: 2.0,
            threshold: -1.2,
            center_steps: 100_000,
            correlation_steps: 1_000_000,
            correlation_n_max: 64,
            significance: 3.0,
            burn_in: 64,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct FcltSection {
    pub n: usize,
    pub replicates: usize,
    pub burn_in: usize,
    pub center_steps: usize,
    pub correlation_steps: usize,
    pub correlation_n_max: usize,
    pub significance: f64,
    /// Fixed Poisson truncation; chosen from the correlation fit when absent.
    pub poisson_terms: Option<usize>,
    pub poisson_chains: usize,
    pub poisson_probes: usize,
    pub variance_states: usize,
    pub gk_steps: usize,
}

impl Default for FcltSection {
    fn default() -> Self {
        Self {
            n: 4096,
            replicates: 400,
            burn_in: 64,
            center_steps: 2_000_000,
            correlation_steps: 400_000,
            correlation_n_max: 32,
            significance: 3.0,
            poisson_terms: None,
            poisson_chains: 64,
            poisson_probes: 16,
            variance_states: 800,
            gk_steps: 400_000,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct BreimanSection {
    pub n: usize,
    /// Letters per `Pφ` estimate (exact on finite alphabets).
    pub letters: usize,
    pub burn_in: usize,
    pub tolerance: f64,
    pub checkpoints: usize,
    pub rate_ns: Vec<usize>,
    pub rate_seeds: usize,
    pub slope_band: [f64; 2],
    pub stationarity_n: usize,
}

impl Default for BreimanSection {
    fn default() -> Self {
        Self {
            n: 100_000,
            letters: 64,
            burn_in: 64,
            tolerance: 0.01,
            checkpoints: 24,
            rate_ns: vec![1000, 3000, 10_000, 30_000],
            rate_seeds: 64,
            slope_band: [-1.3, -0.7],
            stationarity_n: 10_000,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupportSection {
    pub balls: usize,
    pub radius: f64,
    pub steps: usize,
    pub seeds: usize,
    pub burn_in: usize,
    pub summability_n: usize,
    pub witness_radius: f64,
    pub witness_n_max: usize,
    pub ks_threshold: f64,
    pub ifs_start: f64,
    pub ifs_center: f64,
    pub ifs_radius: f64,
    pub ifs_k_max: usize,
    pub histogram_bins: usize,
}

impl Default for SupportSection {
    fn default() -> Self {
        Self {
            balls: 20,
            radius: 1.0,
            steps: 100_000,
            seeds: 5,
            burn_in: 1000,
            summability_n: 30,
            witness_radius: 0.5,
            witness_n_max: 10,
            ks_threshold: 0.02,
            ifs_start: 0.0,
            ifs_center: 0.8125,
            ifs_radius: 0.01,
            ifs_k_max: 8,
            histogram_bins: 16,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub cases: usize,
    pub depth: usize,
    pub transfer_samples: usize,
    pub transfer_n_max: usize,
    pub spectral_n_max: usize,
    pub spectral_samples: usize,
    pub eigen_n: usize,
    pub eigen_particles: usize,
    pub eigen_replicates: usize,
    pub chain_steps: usize,
    pub poisson_terms: usize,
    pub sigmas: f64,
    pub required_rate: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        let d = OracleGridConfig::default();
        Self {
            cases: d.cases,
            depth: d.depth,
            transfer_samples: d.transfer_samples,
            transfer_n_max: d.transfer_n_max,
            spectral_n_max: d.spectral_n_max,
            spectral_samples: d.spectral_samples,
            eigen_n: d.eigen_n,
            eigen_particles: d.eigen_particles,
            eigen_replicates: d.eigen_replicates,
            chain_steps: d.chain_steps,
            poisson_terms: d.poisson_terms,
            sigmas: d.sigmas,
            required_rate: d.required_rate,
        }
    }
}

impl OracleSection {
    pub fn to_config(&self, seed: u64) -> OracleGridConfig {
        OracleGridConfig {
            cases: self.cases,
            seed,
            depth: self.depth,
            transfer_samples: self.transfer_samples,
            transfer_n_max: self.transfer_n_max,
            spectral_n_max: self.spectral_n_max,
            spectral_samples: self.spectral_samples,
            eigen_n: self.eigen_n,
            eigen_particles: self.eigen_particles,
            eigen_replicates: self.eigen_replicates,
            chain_steps: self.chain_steps,
            poisson_terms: self.poisson_terms,
            sigmas: self.sigmas,
            required_rate: self.required_rate,
        }
    }
}

/// Parses a TOML document; unknown and missing keys are reported by name.
pub fn parse(text: &str) -> Result<RunConfig, String> {
    toml::from_str(text).map_err(|e| e.to_string())
}
