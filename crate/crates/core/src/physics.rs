//! Model parameters, thermal initial state and scalar observables of a
//! Fock-diagonal resonator state.
//!
//! All frequencies are in units of the resonator frequency `omega_a` and all
//! times in units of `1/omega_a`. Temperature only enters through the
//! dimensionless inverse temperature `x = hbar * omega_a / (k_B * T)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduced Planck constant in J s.
pub const HBAR: f64 = 1.054_571_817_65e-34;
/// Boltzmann constant in J/K.
pub const K_B: f64 = 1.380_649_000_00e-23;

pub const DEFAULT_TAIL_TOL: f64 = 1e-12;
pub const DEFAULT_CUTOFF_CAP: usize = 65_536;

/// Tolerance on the normalisation of a population vector.
pub const NORM_TOL: f64 = 1e-12;

/// Jaynes-Cummings parameters, dimensionless except for `omega_a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Qubit-resonator coupling in units of `omega_a`.
    pub g: f64,
    /// Detuning `omega_e - omega_a` in units of `omega_a`.
    pub delta: f64,
    /// Absolute resonator angular frequency in rad/s. Only used for unit conversion.
    pub omega_a: f64,
}

impl ModelParams {
    pub fn new(g: f64, delta: f64, omega_a: f64) -> Result<Self> {
        if !(g > 0.0 && g.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "coupling g must be > 0, got {g}"
            )));
        }
        if !delta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "detuning must be finite, got {delta}"
            )));
        }
        if !(omega_a > 0.0 && omega_a.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "omega_a must be > 0, got {omega_a}"
            )));
        }
        Ok(Self { g, delta, omega_a })
    }

    /// `g = 0.04`, `delta = 0.01`, `omega_a = 1.4e9 rad/s`.
    pub fn reference() -> Self {
        Self {
            g: 0.04,
            delta: 0.01,
            omega_a: 1.4e9,
        }
    }

    pub fn resonant(self) -> Self {
        Self { delta: 0.0, ..self }
    }

    /// `Delta^2 / 4`.
    #[inline]
    pub(crate) fn detuning_term(&self) -> f64 {
        0.25 * self.delta * self.delta
    }
}

/// Dimensionless inverse temperature of a thermal resonator state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalSpec {
    pub x: f64,
    /// Set when the spec was built from an absolute temperature.
    pub temperature_kelvin: Option<f64>,
}

impl ThermalSpec {
    pub fn from_x(x: f64) -> Result<Self> {
        if !(x > 0.0) || x.is_nan() {
            return Err(Error::InvalidParameter(format!(
                "inverse temperature x must be > 0, got {x}"
            )));
        }
        Ok(Self {
            x,
            temperature_kelvin: None,
        })
    }

    /// `x = hbar * omega_a / (k_B * T)` with `omega_a` in rad/s.
    pub fn from_kelvin(temperature: f64, omega_a: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be > 0 K, got {temperature}"
            )));
        }
        if !(omega_a > 0.0 && omega_a.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "omega_a must be > 0, got {omega_a}"
            )));
        }
        let x = HBAR * omega_a / (K_B * temperature);
        Ok(Self {
            x,
            temperature_kelvin: Some(temperature),
        })
    }

    /// Thermal occupation `1 / (e^x - 1)` of the untruncated distribution.
    pub fn occupation(&self) -> f64 {
        1.0 / self.x.exp_m1()
    }
}

/// Diagonal resonator state in the Fock basis together with the cumulative
/// success probability of all conditional rounds applied so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationState {
    populations: Vec<f64>,
    survival: f64,
    /// Inverse temperature when the state is an untouched thermal state.
    thermal_x: Option<f64>,
}

impl PopulationState {
    /// Validates a population vector (`p_n >= 0`, sum 1 within [`NORM_TOL`])
    /// and attaches unit survival.
    pub fn new(populations: Vec<f64>) -> Result<Self> {
        Self::with_survival(populations, 1.0)
    }

    pub fn with_survival(populations: Vec<f64>, survival: f64) -> Result<Self> {
        if populations.is_empty() {
            return Err(Error::InvalidParameter("population vector is empty".into()));
        }
        if let Some((n, p)) = populations
            .iter()
            .enumerate()
            .find(|(_, p)| !(**p >= 0.0) || !p.is_finite())
        {
            return Err(Error::InvalidParameter(format!(
                "population p_{n} = {p} is invalid"
            )));
        }
        let total: f64 = populations.iter().sum();
        if (total - 1.0).abs() > NORM_TOL {
            return Err(Error::InvalidParameter(format!(
                "populations sum to {total}, expected 1"
            )));
        }
        if !(survival > 0.0 && survival <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "survival probability must lie in (0, 1], got {survival}"
            )));
        }
        Ok(Self {
            populations,
            survival,
            thermal_x: None,
        })
    }

    /// The pure Fock state `|n>` on a cutoff of `n_cutoff` (at least `n`).
    pub fn fock(n: usize, n_cutoff: usize) -> Self {
        let mut populations = vec![0.0; n_cutoff.max(n) + 1];
        populations[n] = 1.0;
        Self {
            populations,
            survival: 1.0,
            thermal_x: None,
        }
    }

    pub(crate) fn from_parts(populations: Vec<f64>, survival: f64) -> Self {
        Self {
            populations,
            survival,
            thermal_x: None,
        }
    }

    pub fn populations(&self) -> &[f64] {
        &self.populations
    }

    pub fn survival(&self) -> f64 {
        self.survival
    }

    pub fn n_cutoff(&self) -> usize {
        self.populations.len() - 1
    }

    pub fn thermal_x(&self) -> Option<f64> {
        self.thermal_x
    }

    pub fn is_thermal(&self) -> bool {
        self.thermal_x.is_some()
    }

    /// Same state on a larger cutoff, padded with empty levels.
    pub fn extended(&self, n_cutoff: usize) -> Self {
        let mut populations = self.populations.clone();
        if n_cutoff > self.n_cutoff() {
            populations.resize(n_cutoff + 1, 0.0);
        }
        Self {
            populations,
            ..self.clone()
        }
    }
}

/// Geometric populations `p_n ∝ e^{-n x}` truncated at the smallest cutoff
/// whose discarded tail mass is below `tail_tol`, then renormalised.
pub fn thermal_populations(spec: &ThermalSpec, tail_tol: f64) -> Result<PopulationState> {
    thermal_populations_capped(spec, tail_tol, DEFAULT_CUTOFF_CAP)
}

pub fn thermal_populations_capped(
    spec: &ThermalSpec,
    tail_tol: f64,
    cutoff_cap: usize,
) -> Result<PopulationState> {
    let x = spec.x;
    if !(x > 0.0) || x.is_nan() {
        return Err(Error::InvalidParameter(format!(
            "inverse temperature x must be > 0, got {x}"
        )));
    }
    if !(tail_tol > 0.0 && tail_tol < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "tail tolerance must lie in (0, 1), got {tail_tol}"
        )));
    }
    let n_cutoff = thermal_cutoff(x, tail_tol);
    if n_cutoff > cutoff_cap {
        return Err(Error::CutoffCapExceeded {
            required: n_cutoff,
            cap: cutoff_cap,
        });
    }

    let weight = -x.exp_m1();
    let mut populations: Vec<f64> = (0..=n_cutoff)
        .map(|n| weight * (-(n as f64) * x).exp())
        .collect();
    let total: f64 = populations.iter().sum();
    populations.iter_mut().for_each(|p| *p /= total);

    Ok(PopulationState {
        populations,
        survival: 1.0,
        thermal_x: Some(x),
    })
}

/// Smallest `n_c` with `e^{-(n_c + 1) x} < tail_tol`, the mass above `n_c`
/// of the normalised geometric distribution.
fn thermal_cutoff(x: f64, tail_tol: f64) -> usize {
    let log_tol = tail_tol.ln();
    let tail = |n_c: usize| -((n_c + 1) as f64) * x;
    let mut n_c = ((-log_tol / x).floor() as usize).saturating_sub(1);
    while n_c > 0 && tail(n_c - 1) < log_tol {
        n_c -= 1;
    }
    while tail(n_c) >= log_tol {
        n_c += 1;
    }
    n_c
}

/// `Omega_n = sqrt(g^2 n + Delta^2 / 4)`. `n` may be fractional, which is how
/// the dominant frequencies at a continuous dominant index are evaluated.
pub fn rabi_frequency(n: f64, params: &ModelParams) -> Result<f64> {
    if !(n >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "Fock index must be non-negative, got {n}"
        )));
    }
    Ok(rabi(n, params))
}

#[inline]
pub(crate) fn rabi(n: f64, params: &ModelParams) -> f64 {
    (params.g * params.g * n + params.detuning_term()).sqrt()
}

/// Mean excitation number `sum_n n p_n`.
pub fn avg_population(state: &PopulationState) -> f64 {
    state
        .populations
        .iter()
        .enumerate()
        .map(|(n, p)| n as f64 * p)
        .sum()
}

/// Ground-state fidelity `p_0`.
pub fn ground_fidelity(state: &PopulationState) -> f64 {
    state.populations[0]
}

/// Continuous dominant Fock index `n_d = 1 / ln(1 + 1/nbar)`: the inverse
/// effective temperature of the thermal state with the same mean occupation.
pub fn dominant_index(state: &PopulationState) -> Result<f64> {
    dominant_index_of(avg_population(state))
}

pub(crate) fn dominant_index_of(nbar: f64) -> Result<f64> {
    if !(nbar > 0.0) {
        return Err(Error::DegenerateState(format!(
            "dominant index needs nbar > 0, got {nbar}"
        )));
    }
    Ok(1.0 / (1.0 / nbar).ln_1p())
}

/// Effective inverse temperature `x_eff = ln(1 + 1/nbar)`.
pub fn effective_x(state: &PopulationState) -> Result<f64> {
    dominant_index(state).map(f64::recip)
}
