//! Run configuration: a single versioned TOML file driving dataset
//! generation, training, optimization, and the benchmark.

use crate::oracle::{Composition, OracleError, PairParams, PotentialSpec, SampleSpace};
use crate::surrogate::{ComsConfig, Conservatism};
use crate::vae::VaeConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unsupported schema_version {0}, expected {SCHEMA_VERSION}")]
    SchemaVersion(u32),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub s1: u8,
    pub s2: u8,
    pub sigma: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSection {
    pub n_species: usize,
    pub cutoff: f64,
    pub pairs: Vec<PairEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingSection {
    /// Cell length window in units of `max_sigma * n^(1/3)`.
    pub len_scale_min: f64,
    pub len_scale_max: f64,
    pub angle_min: f64,
    pub angle_max: f64,
    pub relax_max_steps: usize,
    pub relax_g_tol: f64,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self {
            len_scale_min: 1.0,
            len_scale_max: 2.0,
            angle_min: 60.0,
            angle_max: 120.0,
            relax_max_steps: 1500,
            relax_g_tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub per_composition: usize,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { per_composition: 60, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateSection {
    /// "coms" or "naive".
    pub mode: String,
    /// Fixed conservatism weight; ignored when `tau` is set.
    pub alpha: Option<f64>,
    /// Dual-mode overestimation budget in data-energy standard deviations.
    pub tau: Option<f64>,
    pub dual_lr: f64,
    pub adv_steps: usize,
    pub adv_lr: f64,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub alpha_max: f64,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        Self {
            mode: "coms".into(),
            alpha: Some(1.0),
            tau: None,
            dual_lr: 0.4,
            adv_steps: 1,
            adv_lr: 0.05,
            hidden: vec![256, 256],
            epochs: 200,
            batch_size: 16,
            learning_rate: 1e-3,
            alpha_max: 100.0,
        }
    }
}

impl SurrogateSection {
    pub fn coms_config(&self, seed: u64) -> Result<ComsConfig, ConfigError> {
        let conservatism = match (self.mode.as_str(), self.tau, self.alpha) {
            ("naive", _, _) => Conservatism::FixedAlpha(0.0),
            ("coms", Some(tau), _) => Conservatism::Dual { tau, dual_lr: self.dual_lr },
            ("coms", None, Some(alpha)) => Conservatism::FixedAlpha(alpha),
            ("coms", None, None) => {
                return Err(ConfigError::Invalid(
                    "surrogate mode \"coms\" needs either alpha or tau".into(),
                ))
            }
            (other, _, _) => {
                return Err(ConfigError::Invalid(format!(
                    "unknown surrogate mode {other:?} (expected \"coms\" or \"naive\")"
                )))
            }
        };
        Ok(ComsConfig {
            conservatism,
            adv_steps: self.adv_steps,
            adv_lr: self.adv_lr,
            hidden: self.hidden.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            alpha_max: self.alpha_max,
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSection {
    pub steps: usize,
    pub step_size: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self { steps: 50, step_size: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSection {
    /// Success threshold on (E_found - E_global) / |E_global|.
    pub threshold: f64,
    /// Multi-start budget for the brute-forced global minimum.
    pub global_budget: usize,
    /// Evaluation seeds; every method runs once per seed.
    pub eval_seeds: Vec<u64>,
    pub master_seed: u64,
    pub out_dir: String,
    /// Decode every k-th iterate in trajectory probes.
    pub trajectory_stride: usize,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self {
            threshold: 0.2,
            global_budget: 2000,
            eval_seeds: vec![17, 43, 101],
            master_seed: 20250,
            out_dir: "runs".into(),
            trajectory_stride: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub compositions: Vec<String>,
    pub potential: PotentialSection,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub vae: VaeConfig,
    #[serde(default)]
    pub surrogate: SurrogateSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub benchmark: BenchmarkSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion(self.schema_version));
        }
        if self.compositions.is_empty() {
            return Err(ConfigError::Invalid("no compositions".into()));
        }
        for id in &self.compositions {
            Composition::parse(id)?;
        }
        let t = self.benchmark.threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "threshold {t} outside (0, 1)"
            )));
        }
        if self.benchmark.eval_seeds.is_empty() {
            return Err(ConfigError::Invalid("no evaluation seeds".into()));
        }
        if self.benchmark.global_budget == 0 {
            return Err(ConfigError::Invalid("global_budget must be positive".into()));
        }
        self.potential_spec()?;
        Ok(())
    }

    pub fn potential_spec(&self) -> Result<PotentialSpec, ConfigError> {
        let pairs: Vec<(u8, u8, PairParams)> = self
            .potential
            .pairs
            .iter()
            .map(|p| (p.s1, p.s2, PairParams { sigma: p.sigma, epsilon: p.epsilon }))
            .collect();
        Ok(PotentialSpec::new(self.potential.n_species, &pairs, self.potential.cutoff)?)
    }

    pub fn sample_space(&self, composition: &Composition) -> Result<SampleSpace, ConfigError> {
        let spec = self.potential_spec()?;
        let scale = spec.max_sigma() * (composition.n() as f64).cbrt();
        Ok(SampleSpace {
            len_min: self.sampling.len_scale_min * scale,
            len_max: self.sampling.len_scale_max * scale,
            angle_min: self.sampling.angle_min,
            angle_max: self.sampling.angle_max,
            relax_max_steps: self.sampling.relax_max_steps,
            relax_g_tol: self.sampling.relax_g_tol,
        })
    }

    /// The default ten-composition benchmark suite over a two-species
    /// potential with contrasting pair interactions.
    pub fn default_suite() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            compositions: vec![
                "A".into(),
                "A2".into(),
                "A3".into(),
                "A4".into(),
                "AB".into(),
                "AB2".into(),
                "A2B2".into(),
                "AB3".into(),
                "A3B".into(),
                "A2B4".into(),
            ],
            potential: PotentialSection {
                n_species: 2,
                cutoff: 2.5,
                pairs: vec![
                    PairEntry { s1: 0, s2: 0, sigma: 1.0, epsilon: 1.0 },
                    PairEntry { s1: 1, s2: 1, sigma: 0.8, epsilon: 0.6 },
                    PairEntry { s1: 0, s2: 1, sigma: 0.9, epsilon: 1.3 },
                ],
            },
            sampling: SamplingSection::default(),
            dataset: DatasetSection::default(),
            vae: VaeConfig {
                d_z: 16,
                encoder_hidden: vec![128],
                head_hidden: vec![64],
                score_hidden: vec![128, 128],
                epochs: 600,
                score_steps: 40_000,
                dec_draws: 2,
                batch_size: 4,
                ..VaeConfig::default()
            },
            surrogate: SurrogateSection::default(),
            optimizer: OptimizerSection::default(),
            benchmark: BenchmarkSection::default(),
        }
    }
}
