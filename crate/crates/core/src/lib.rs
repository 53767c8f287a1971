//! Simulation and optimisation of measurement-based cooling of a thermal
//! bosonic resonator by a qubit detector.
//!
//! * [`physics`]: model parameters, thermal states, Rabi frequencies, observables.
//! * [`measurement`]: conditional and unconditional measurement maps and their
//!   optimal intervals.
//! * [`sequence`]: hybrid sequences, traces and the cooperative performance `C`.
//! * [`search`]: exhaustive and greedy sequence optimisers.
//! * [`ppo`]: the reinforcement-learning optimiser.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod measurement;
pub mod physics;
pub mod ppo;
pub mod search;
pub mod sequence;

pub use error::{Error, Result};
pub use measurement::{
    alpha_sq, apply_cm, apply_cm_with_survival, apply_um, approx_nbar_um, beta_sq,
    numeric_tau_opt_um, tau_opt_cm, tau_opt_um, IntervalMethod, IntervalResult, Strategy, TauGrid,
};
pub use physics::{
    avg_population, dominant_index, ground_fidelity, rabi_frequency, thermal_populations,
    ModelParams, PopulationState, ThermalSpec,
};
pub use search::{exhaustive_best, greedy_baseline, ExhaustiveOptions, Metric, SearchReport};
pub use sequence::{
    cooperative_performance, make_pattern, run_sequence, CoolingTrace, MeasurementSequence, Pattern,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
