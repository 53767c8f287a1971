//! Hybrid UM/CM measurement sequences: execution with per-round optimal
//! intervals, per-step traces and the cooperative cooling performance.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::measurement::{apply, tau_opt, Strategy};
use crate::physics::{avg_population, ground_fidelity, ModelParams, PopulationState};

/// Floor applied to mean populations before taking the logarithm.
pub const NBAR_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MeasurementSequence {
    steps: Vec<Strategy>,
}

impl MeasurementSequence {
    pub fn new(steps: Vec<Strategy>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidParameter(
                "measurement sequence is empty".into(),
            ));
        }
        Ok(Self { steps })
    }

    /// Decodes the low `len` bits of `bits`, first step in the most
    /// significant position. Numeric order of `bits` equals lexicographic
    /// order of the 0/1 string.
    pub fn from_bits(bits: u64, len: usize) -> Self {
        let steps = (0..len)
            .map(|i| {
                if (bits >> (len - 1 - i)) & 1 == 1 {
                    Strategy::Cm
                } else {
                    Strategy::Um
                }
            })
            .collect();
        Self { steps }
    }

    pub fn steps(&self) -> &[Strategy] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn um_fraction(&self) -> f64 {
        self.steps.iter().filter(|s| **s == Strategy::Um).count() as f64 / self.len() as f64
    }
}

impl fmt::Display for MeasurementSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.steps {
            write!(f, "{}", s.as_char())?;
        }
        Ok(())
    }
}

impl FromStr for MeasurementSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let steps = s
            .trim()
            .chars()
            .enumerate()
            .map(|(position, c)| match c {
                '0' => Ok(Strategy::Um),
                '1' => Ok(Strategy::Cm),
                other => Err(Error::Parse {
                    position,
                    message: format!("expected '0' or '1', found {other:?}"),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(steps)
    }
}

impl Serialize for MeasurementSequence {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for MeasurementSequence {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Named sequence families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    /// `S_u`: every round unconditional.
    AllUm,
    /// `S_c`: every round conditional.
    AllCm,
    /// `S_k`: blocks of `k` conditional rounds each followed by one
    /// unconditional round; a trailing partial block is kept.
    Block(usize),
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let tail = lower
            .strip_prefix("s_")
            .or_else(|| lower.strip_prefix('s'))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown pattern {s:?}")))?;
        match tail {
            "u" => Ok(Pattern::AllUm),
            "c" => Ok(Pattern::AllCm),
            k => k
                .parse::<usize>()
                .map(Pattern::Block)
                .map_err(|_| Error::InvalidParameter(format!("unknown pattern {s:?}"))),
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pattern::AllUm => f.write_str("S_u"),
            Pattern::AllCm => f.write_str("S_c"),
            Pattern::Block(k) => write!(f, "S_{k}"),
        }
    }
}

pub fn make_pattern(kind: Pattern, len: usize) -> Result<MeasurementSequence> {
    if len == 0 {
        return Err(Error::InvalidParameter(
            "sequence length must be >= 1".into(),
        ));
    }
    let steps = match kind {
        Pattern::AllUm => vec![Strategy::Um; len],
        Pattern::AllCm => vec![Strategy::Cm; len],
        Pattern::Block(0) => {
            return Err(Error::InvalidParameter(
                "block length k must be >= 1".into(),
            ))
        }
        Pattern::Block(k) => (0..len)
            .map(|i| {
                if i % (k + 1) == k {
                    Strategy::Um
                } else {
                    Strategy::Cm
                }
            })
            .collect(),
    };
    MeasurementSequence::new(steps)
}

/// Cooperative cooling performance `F * P_g * log10(nbar_th / nbar)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Performance {
    pub value: f64,
    /// A non-positive population was floored at [`NBAR_FLOOR`].
    pub clamped: bool,
}

pub fn cooperative_performance(
    nbar_th: f64,
    nbar: f64,
    fidelity: f64,
    survival: f64,
) -> Performance {
    let clamped = !(nbar > 0.0 && nbar_th > 0.0);
    let nbar = nbar.max(NBAR_FLOOR);
    let nbar_th = nbar_th.max(NBAR_FLOOR);
    Performance {
        value: fidelity * survival * (nbar_th / nbar).log10(),
        clamped,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// 1-based round index.
    pub step: usize,
    pub strategy: Strategy,
    /// Free-evolution interval of this round, units of `1/omega_a`.
    pub tau: f64,
    /// Start time of this round, `sum_{j < i} tau_j`.
    pub t: f64,
    pub nbar: f64,
    #[serde(rename = "F")]
    pub fidelity: f64,
    #[serde(rename = "Pg")]
    pub survival: f64,
    #[serde(rename = "C")]
    pub performance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoolingTrace {
    pub nbar_th: f64,
    pub steps: Vec<TraceStep>,
    /// Steps whose performance needed the population floor.
    pub clamped_steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub sequence: MeasurementSequence,
    pub final_nbar: f64,
    #[serde(rename = "final_F")]
    pub final_fidelity: f64,
    #[serde(rename = "final_Pg")]
    pub final_survival: f64,
    #[serde(rename = "final_C")]
    pub final_performance: f64,
    pub nbar_th: f64,
    #[serde(rename = "summed_C")]
    pub summed_performance: f64,
    pub taus: Vec<f64>,
}

impl CoolingTrace {
    pub fn last(&self) -> &TraceStep {
        self.steps.last().expect("trace has at least one step")
    }

    pub fn final_performance(&self) -> f64 {
        self.last().performance
    }

    pub fn summed_performance(&self) -> f64 {
        self.steps.iter().map(|s| s.performance).sum()
    }

    pub fn sequence(&self) -> MeasurementSequence {
        MeasurementSequence {
            steps: self.steps.iter().map(|s| s.strategy).collect(),
        }
    }

    pub fn taus(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.tau).collect()
    }

    pub fn summary(&self) -> TraceSummary {
        let last = self.last();
        TraceSummary {
            sequence: self.sequence(),
            final_nbar: last.nbar,
            final_fidelity: last.fidelity,
            final_survival: last.survival,
            final_performance: last.performance,
            nbar_th: self.nbar_th,
            summed_performance: self.summed_performance(),
            taus: self.taus(),
        }
    }

    /// Columns `step,strategy,tau,t,nbar,F,Pg,C`; strategy as 0/1.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["step", "strategy", "tau", "t", "nbar", "F", "Pg", "C"])?;
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.strategy.code().to_string(),
                s.tau.to_string(),
                s.t.to_string(),
                s.nbar.to_string(),
                s.fidelity.to_string(),
                s.survival.to_string(),
                s.performance.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One round: interval from the current state, then the chosen map.
pub fn advance(
    state: &PopulationState,
    strategy: Strategy,
    params: &ModelParams,
) -> Result<(PopulationState, f64)> {
    let tau = tau_opt(strategy, state, params)?.tau;
    let next = apply(strategy, state, tau, params)?;
    Ok((next, tau))
}

pub fn run_sequence(
    initial: &PopulationState,
    seq: &MeasurementSequence,
    params: &ModelParams,
) -> Result<CoolingTrace> {
    run_inner(initial, seq, params, None)
}

/// Intervals of every round, computed from the population dynamics alone.
pub fn precompute_intervals(
    initial: &PopulationState,
    seq: &MeasurementSequence,
    params: &ModelParams,
) -> Result<Vec<f64>> {
    let mut state = initial.clone();
    let mut taus = Vec::with_capacity(seq.len());
    for (i, &strategy) in seq.steps().iter().enumerate() {
        let (next, tau) = advance(&state, strategy, params).map_err(|e| e.at_step(i + 1))?;
        taus.push(tau);
        state = next;
    }
    Ok(taus)
}

/// Executes a sequence with externally supplied intervals.
pub fn replay_sequence(
    initial: &PopulationState,
    seq: &MeasurementSequence,
    taus: &[f64],
    params: &ModelParams,
) -> Result<CoolingTrace> {
    if taus.len() != seq.len() {
        return Err(Error::InvalidParameter(format!(
            "{} intervals for a sequence of {} rounds",
            taus.len(),
            seq.len()
        )));
    }
    run_inner(initial, seq, params, Some(taus))
}

fn run_inner(
    initial: &PopulationState,
    seq: &MeasurementSequence,
    params: &ModelParams,
    taus: Option<&[f64]>,
) -> Result<CoolingTrace> {
    let nbar_th = avg_population(initial);
    let mut state = initial.clone();
    let mut steps = Vec::with_capacity(seq.len());
    let mut clamped_steps = Vec::new();
    let mut t = 0.0;
    for (i, &strategy) in seq.steps().iter().enumerate() {
        let step = i + 1;
        let (next, tau) = match taus {
            None => advance(&state, strategy, params),
            Some(taus) => apply(strategy, &state, taus[i], params).map(|s| (s, taus[i])),
        }
        .map_err(|e| e.at_step(step))?;
        state = next;
        let nbar = avg_population(&state);
        let fidelity = ground_fidelity(&state);
        let survival = state.survival();
        let perf = cooperative_performance(nbar_th, nbar, fidelity, survival);
        if perf.clamped {
            clamped_steps.push(step);
        }
        steps.push(TraceStep {
            step,
            strategy,
            tau,
            t,
            nbar,
            fidelity,
            survival,
            performance: perf.value,
        });
        t += tau;
    }
    Ok(CoolingTrace {
        nbar_th,
        steps,
        clamped_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{thermal_populations, ThermalSpec};

    fn reference_state() -> PopulationState {
        let p = ModelParams::reference();
        thermal_populations(&ThermalSpec::from_kelvin(0.1, p.omega_a).unwrap(), 1e-12).unwrap()
    }

    #[test]
    fn performance_examples() {
        let c = cooperative_performance(8.0, 0.8, 1.0, 1.0);
        assert!((c.value - 1.0).abs() < 1e-15 && !c.clamped);
        assert_eq!(cooperative_performance(3.0, 3.0, 0.7, 0.2).value, 0.0);
        assert!(cooperative_performance(1.0, 2.0, 1.0, 1.0).value < 0.0);
        let c = cooperative_performance(1.0, 0.0, 1.0, 1.0);
        assert!(c.clamped && (c.value - 300.0).abs() < 1e-9);
    }

    #[test]
    fn pattern_examples() {
        assert_eq!(
            make_pattern(Pattern::Block(1), 6).unwrap().to_string(),
            "101010"
        );
        assert_eq!(make_pattern(Pattern::AllUm, 3).unwrap().to_string(), "000");
        assert_eq!(
            make_pattern(Pattern::Block(4), 10).unwrap().to_string(),
            "1111011110"
        );
        assert_eq!(
            make_pattern(Pattern::Block(2), 16).unwrap().to_string(),
            "1101101101101101"
        );
        assert_eq!(make_pattern(Pattern::AllCm, 2).unwrap().to_string(), "11");
        assert!(make_pattern(Pattern::Block(0), 4).is_err());
        assert!(make_pattern(Pattern::AllCm, 0).is_err());
    }

    #[test]
    fn pattern_names() {
        assert_eq!("S_u".parse::<Pattern>().unwrap(), Pattern::AllUm);
        assert_eq!("S_c".parse::<Pattern>().unwrap(), Pattern::AllCm);
        assert_eq!("s_4".parse::<Pattern>().unwrap(), Pattern::Block(4));
        assert_eq!("S2".parse::<Pattern>().unwrap(), Pattern::Block(2));
        assert!("T_2".parse::<Pattern>().is_err());
        assert_eq!(Pattern::Block(2).to_string(), "S_2");
    }

    #[test]
    fn sequence_parsing_reports_position() {
        let seq: MeasurementSequence = "0101".parse().unwrap();
        assert_eq!(
            seq.steps(),
            &[Strategy::Um, Strategy::Cm, Strategy::Um, Strategy::Cm]
        );
        match "01x1".parse::<MeasurementSequence>() {
            Err(Error::Parse { position, .. }) => assert_eq!(position, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!("".parse::<MeasurementSequence>().is_err());
        assert_eq!(
            MeasurementSequence::from_bits(0b1011, 4).to_string(),
            "1011"
        );
        assert_eq!(MeasurementSequence::from_bits(0b1, 3).to_string(), "001");
    }

    #[test]
    fn all_cm_run() {
        let p = ModelParams::reference();
        let trace = run_sequence(
            &reference_state(),
            &make_pattern(Pattern::AllCm, 16).unwrap(),
            &p,
        )
        .unwrap();
        let last = trace.last();
        assert!(last.fidelity > 0.9999);
        assert!(last.nbar / trace.nbar_th < 1e-4);
        // Survival settles just above ten percent.
        assert!((last.survival - 0.1014).abs() < 5e-4);
    }

    #[test]
    fn all_um_run() {
        let p = ModelParams::reference();
        let trace = run_sequence(
            &reference_state(),
            &make_pattern(Pattern::AllUm, 16).unwrap(),
            &p,
        )
        .unwrap();
        let last = trace.last();
        assert!((last.nbar - 3.36).abs() < 0.05);
        assert!((last.fidelity - 0.78).abs() < 0.01);
        assert_eq!(last.survival, 1.0);
        assert!(trace.steps.iter().all(|s| s.survival == 1.0));
    }

    #[test]
    fn trace_times_accumulate() {
        let p = ModelParams::reference();
        let seq: MeasurementSequence = "1101001".parse().unwrap();
        let trace = run_sequence(&reference_state(), &seq, &p).unwrap();
        assert_eq!(trace.steps[0].t, 0.0);
        let mut t = 0.0;
        for s in &trace.steps {
            assert_eq!(s.t, t);
            t += s.tau;
        }
    }

    #[test]
    fn precomputed_intervals_replay_identically() {
        let p = ModelParams::reference();
        let seq: MeasurementSequence = "1001101011100010".parse().unwrap();
        let s0 = reference_state();
        let trace = run_sequence(&s0, &seq, &p).unwrap();
        let taus = precompute_intervals(&s0, &seq, &p).unwrap();
        assert_eq!(taus, trace.taus());
        assert_eq!(replay_sequence(&s0, &seq, &taus, &p).unwrap(), trace);
        assert!(replay_sequence(&s0, &seq, &taus[1..], &p).is_err());
    }

    #[test]
    fn ground_state_start_is_degenerate() {
        let p = ModelParams::reference();
        let err = run_sequence(
            &PopulationState::fock(0, 5),
            &make_pattern(Pattern::AllUm, 4).unwrap(),
            &p,
        )
        .unwrap_err();
        assert!(matches!(err, Error::AtStep { step: 1, .. }));
        assert!(matches!(err.root(), Error::DegenerateState(_)));
    }

    #[test]
    fn csv_header_and_rows() {
        let p = ModelParams::reference();
        let trace = run_sequence(&reference_state(), &"10".parse().unwrap(), &p).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,strategy,tau,t,nbar,F,Pg,C");
        assert!(lines.next().unwrap().starts_with("1,1,"));
        assert!(lines.next().unwrap().starts_with("2,0,"));
    }

    #[test]
    fn summary_json_fields() {
        let p = ModelParams::reference();
        let trace = run_sequence(&reference_state(), &"110".parse().unwrap(), &p).unwrap();
        let v = serde_json::to_value(trace.summary()).unwrap();
        for key in [
            "sequence",
            "final_nbar",
            "final_F",
            "final_Pg",
            "final_C",
            "nbar_th",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(v["sequence"], "110");
    }
}
