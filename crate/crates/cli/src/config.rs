//! Run configuration: a TOML file with every key optional, unknown keys
//! rejected, and SI inputs converted to dimensionless units here and nowhere
//! else.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mbcool_core::physics::{
    thermal_populations_capped, ThermalSpec, DEFAULT_CUTOFF_CAP, DEFAULT_TAIL_TOL,
};
use mbcool_core::ppo::PpoConfig;
use mbcool_core::search::Metric;
use mbcool_core::{Error, ModelParams, PopulationState};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub physics: Physics,
    pub run: Run,
    pub search: Search,
    pub scan: Scan,
    pub reproduce: Reproduce,
    pub ppo: PpoConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Physics {
    /// Detector transition frequency, rad/s.
    pub omega_a: f64,
    /// Resonator temperature in kelvin. Mutually exclusive with `x`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// Dimensionless `hbar omega_a / (k_B T)`. Mutually exclusive with `temperature`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    /// Coupling in units of `omega_a`.
    pub g: f64,
    /// Detuning in units of `omega_a`.
    pub delta: f64,
    pub tail_tol: f64,
    pub cutoff_cap: usize,
}

impl Default for Physics {
    fn default() -> Self {
        let reference = ModelParams::reference();
        Self {
            omega_a: reference.omega_a,
            temperature: None,
            x: None,
            g: reference.g,
            delta: reference.delta,
            tail_tol: DEFAULT_TAIL_TOL,
            cutoff_cap: DEFAULT_CUTOFF_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Run {
    /// Rounds per sequence.
    pub n: usize,
    pub seed: u64,
    /// Populations fed to the policy networks.
    pub observation_size: usize,
}

impl Default for Run {
    fn default() -> Self {
        Self {
            n: 16,
            seed: 0,
            observation_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Search {
    pub metric: Metric,
    pub top_k: usize,
    pub allow_large: bool,
}

impl Default for Search {
    fn default() -> Self {
        Self {
            metric: Metric::FinalC,
            top_k: 20,
            allow_large: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scan {
    /// Kelvin.
    pub temperatures: Vec<f64>,
    pub tau_max: f64,
    pub points: usize,
}

impl Default for Scan {
    fn default() -> Self {
        Self {
            temperatures: vec![0.01, 0.1, 1.0, 10.0],
            tau_max: 40.0,
            points: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Reproduce {
    /// Kelvin, for the temperature study.
    pub temperatures: Vec<f64>,
}

impl Default for Reproduce {
    fn default() -> Self {
        Self {
            temperatures: vec![0.05, 0.1, 0.2, 0.3],
        }
    }
}

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.physics.temperature.is_some() && self.physics.x.is_some() {
            bail!("both physics.temperature and physics.x are set; give only one");
        }
        self.model_params()?;
        if self.run.n == 0 {
            bail!("run.n must be >= 1");
        }
        if self.run.observation_size == 0 {
            bail!("run.observation_size must be >= 1");
        }
        if !(self.physics.tail_tol > 0.0 && self.physics.tail_tol < 1.0) {
            bail!("physics.tail_tol must lie in (0, 1)");
        }
        self.ppo.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn model_params(&self) -> Result<ModelParams> {
        let p = &self.physics;
        Ok(ModelParams::new(p.g, p.delta, p.omega_a)?)
    }

    pub fn thermal_spec(&self) -> Result<ThermalSpec> {
        match (self.physics.temperature, self.physics.x) {
            (Some(_), Some(_)) => bail!("both temperature and x are set; give only one"),
            (_, Some(x)) => Ok(ThermalSpec::from_x(x)?),
            (t, None) => self.spec_at(t.unwrap_or(DEFAULT_TEMPERATURE)),
        }
    }

    pub fn spec_at(&self, kelvin: f64) -> Result<ThermalSpec> {
        Ok(ThermalSpec::from_kelvin(kelvin, self.physics.omega_a)?)
    }

    pub fn initial_state(&self) -> Result<PopulationState> {
        self.state_for(&self.thermal_spec()?)
    }

    pub fn state_for(&self, spec: &ThermalSpec) -> Result<PopulationState> {
        thermal_populations_capped(spec, self.physics.tail_tol, self.physics.cutoff_cap).map_err(
            |e| match e {
                Error::CutoffCapExceeded { required, cap } => anyhow::anyhow!(
                    "this temperature needs a Fock cutoff of {required} but physics.cutoff_cap is {cap}; \
                     set physics.cutoff_cap >= {required} in the config, raise physics.tail_tol, or lower the temperature"
                ),
                other => other.into(),
            },
        )
    }
}
