//! Reference optimizers over the space of 0/1 measurement sequences.
//!
//! The exhaustive search walks the binary tree of sequences depth first so
//! that shared prefixes are simulated once; every leaf is the exact state
//! `run_sequence` would produce for that sequence. Subtrees are distributed
//! over threads by prefix and merged with a total order (metric descending,
//! then 0/1 string ascending), so the report does not depend on scheduling.

use std::cmp::Ordering;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::Strategy;
use crate::physics::{avg_population, ground_fidelity, ModelParams, PopulationState};
use crate::sequence::{advance, cooperative_performance, MeasurementSequence};

pub const EXHAUSTIVE_GUARD: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// `C` after the last round.
    #[default]
    FinalC,
    /// `C` summed over all rounds.
    SummedC,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final-c" | "final" => Ok(Metric::FinalC),
            "summed-c" | "summed" => Ok(Metric::SummedC),
            other => Err(Error::InvalidParameter(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchEntry {
    pub sequence: MeasurementSequence,
    #[serde(rename = "final_C")]
    pub final_performance: f64,
    #[serde(rename = "summed_C")]
    pub summed_performance: f64,
    pub final_nbar: f64,
    #[serde(rename = "F")]
    pub fidelity: f64,
    #[serde(rename = "Pg")]
    pub survival: f64,
}

impl SearchEntry {
    pub fn score(&self, metric: Metric) -> f64 {
        match metric {
            Metric::FinalC => self.final_performance,
            Metric::SummedC => self.summed_performance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    Exhaustive,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub mode: SearchMode,
    pub metric: Metric,
    pub best_sequence: MeasurementSequence,
    /// Best score under `metric`.
    #[serde(rename = "best_C")]
    pub best_score: f64,
    pub top: Vec<SearchEntry>,
    pub evaluations: u64,
    /// Sequences dropped because a conditional round annihilated the state.
    pub excluded: u64,
    pub wall_seconds: f64,
}

impl SearchReport {
    pub fn best(&self) -> &SearchEntry {
        &self.top[0]
    }

    /// Columns `rank,sequence,final_C,summed_C,final_nbar,F,Pg`.
    pub fn write_top_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "rank",
            "sequence",
            "final_C",
            "summed_C",
            "final_nbar",
            "F",
            "Pg",
        ])?;
        for (rank, e) in self.top.iter().enumerate() {
            w.write_record([
                (rank + 1).to_string(),
                e.sequence.to_string(),
                e.final_performance.to_string(),
                e.summed_performance.to_string(),
                e.final_nbar.to_string(),
                e.fidelity.to_string(),
                e.survival.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExhaustiveOptions {
    pub metric: Metric,
    pub top_k: usize,
    /// Required for lengths above [`EXHAUSTIVE_GUARD`].
    pub allow_large: bool,
    /// Spread prefixes over the rayon pool.
    pub parallel: bool,
}

impl Default for ExhaustiveOptions {
    fn default() -> Self {
        Self {
            metric: Metric::FinalC,
            top_k: 20,
            allow_large: false,
            parallel: true,
        }
    }
}

/// Metric descending, then sequence ascending.
fn rank_order(metric: Metric) -> impl Fn(&SearchEntry, &SearchEntry) -> Ordering + Copy {
    move |a, b| {
        b.score(metric)
            .total_cmp(&a.score(metric))
            .then_with(|| a.sequence.cmp(&b.sequence))
    }
}

#[derive(Debug, Default)]
struct Partial {
    top: Vec<SearchEntry>,
    evaluations: u64,
    excluded: u64,
}

impl Partial {
    fn merge(mut self, other: Partial, metric: Metric, top_k: usize) -> Partial {
        self.top.extend(other.top);
        self.top.sort_by(rank_order(metric));
        self.top.truncate(top_k);
        self.evaluations += other.evaluations;
        self.excluded += other.excluded;
        self
    }

    fn offer(&mut self, entry: SearchEntry, metric: Metric, top_k: usize) {
        let order = rank_order(metric);
        if self.top.len() == top_k {
            match self.top.last() {
                Some(worst) if order(&entry, worst) == Ordering::Less => {
                    self.top.pop();
                }
                _ => return,
            }
        }
        let at = self
            .top
            .binary_search_by(|probe| order(probe, &entry))
            .unwrap_or_else(|i| i);
        self.top.insert(at, entry);
    }
}

struct Walker<'a> {
    params: &'a ModelParams,
    nbar_th: f64,
    len: usize,
    metric: Metric,
    top_k: usize,
}

impl Walker<'_> {
    fn walk(
        &self,
        state: &PopulationState,
        prefix: &mut Vec<Strategy>,
        summed: f64,
        out: &mut Partial,
    ) -> Result<()> {
        if prefix.len() == self.len {
            out.evaluations += 1;
            let nbar = avg_population(state);
            let fidelity = ground_fidelity(state);
            let perf = cooperative_performance(self.nbar_th, nbar, fidelity, state.survival());
            let entry = SearchEntry {
                sequence: MeasurementSequence::new(prefix.clone())?,
                final_performance: perf.value,
                summed_performance: summed,
                final_nbar: nbar,
                fidelity,
                survival: state.survival(),
            };
            out.offer(entry, self.metric, self.top_k);
            return Ok(());
        }
        for strategy in Strategy::ALL {
            match advance(state, strategy, self.params) {
                Ok((next, _)) => {
                    let c = self.performance(&next);
                    prefix.push(strategy);
                    self.walk(&next, prefix, summed + c, out)?;
                    prefix.pop();
                }
                Err(Error::MeasurementAnnihilation { .. }) => {
                    let dropped = 1u64 << (self.len - prefix.len() - 1);
                    out.evaluations += dropped;
                    out.excluded += dropped;
                }
                Err(e) => return Err(e.at_step(prefix.len() + 1)),
            }
        }
        Ok(())
    }

    fn performance(&self, state: &PopulationState) -> f64 {
        cooperative_performance(
            self.nbar_th,
            avg_population(state),
            ground_fidelity(state),
            state.survival(),
        )
        .value
    }

    /// Advances along a fixed prefix, accumulating the summed metric.
    fn descend(
        &self,
        initial: &PopulationState,
        prefix: &[Strategy],
    ) -> Result<Option<(PopulationState, f64)>> {
        let mut state = initial.clone();
        let mut summed = 0.0;
        for (i, &s) in prefix.iter().enumerate() {
            match advance(&state, s, self.params) {
                Ok((next, _)) => {
                    summed += self.performance(&next);
                    state = next;
                }
                Err(Error::MeasurementAnnihilation { .. }) => return Ok(None),
                Err(e) => return Err(e.at_step(i + 1)),
            }
        }
        Ok(Some((state, summed)))
    }
}

/// Scores all `2^len` sequences and ranks them by `options.metric`.
pub fn exhaustive_best(
    initial: &PopulationState,
    len: usize,
    params: &ModelParams,
    options: &ExhaustiveOptions,
) -> Result<SearchReport> {
    if len == 0 {
        return Err(Error::InvalidParameter(
            "sequence length must be >= 1".into(),
        ));
    }
    if len > EXHAUSTIVE_GUARD && !options.allow_large {
        return Err(Error::InvalidParameter(format!(
            "exhaustive search over 2^{len} sequences exceeds the guard of 2^{EXHAUSTIVE_GUARD}; pass the override flag"
        )));
    }
    if len > 40 {
        return Err(Error::InvalidParameter(format!(
            "sequence length {len} is too large"
        )));
    }
    let top_k = options.top_k.max(1);
    let started = Instant::now();
    let walker = Walker {
        params,
        nbar_th: avg_population(initial),
        len,
        metric: options.metric,
        top_k,
    };

    let split = if options.parallel { len.min(6) } else { 0 };
    let run_prefix = |bits: u64| -> Result<Partial> {
        let prefix = MeasurementSequence::from_bits(bits, split);
        let mut out = Partial::default();
        match walker.descend(initial, prefix.steps())? {
            Some((state, summed)) => {
                let mut steps = prefix.steps().to_vec();
                walker.walk(&state, &mut steps, summed, &mut out)?;
            }
            None => {
                out.evaluations = 1 << (len - split);
                out.excluded = out.evaluations;
            }
        }
        Ok(out)
    };

    let merged = if split == 0 {
        let mut out = Partial::default();
        walker.walk(initial, &mut Vec::with_capacity(len), 0.0, &mut out)?;
        out
    } else {
        (0..1u64 << split)
            .into_par_iter()
            .map(run_prefix)
            .try_reduce(Partial::default, |a, b| {
                Ok(a.merge(b, options.metric, top_k))
            })?
    };

    finish(SearchMode::Exhaustive, options.metric, merged, started)
}

fn finish(
    mode: SearchMode,
    metric: Metric,
    partial: Partial,
    started: Instant,
) -> Result<SearchReport> {
    let best = partial.top.first().cloned().ok_or_else(|| {
        Error::InvalidParameter("every sequence annihilated the state; nothing to rank".into())
    })?;
    Ok(SearchReport {
        mode,
        metric,
        best_score: best.score(metric),
        best_sequence: best.sequence,
        top: partial.top,
        evaluations: partial.evaluations,
        excluded: partial.excluded,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Picks, round by round, the strategy with the larger immediate `C`;
/// ties go to UM. A strategy that annihilates the state is never picked.
pub fn greedy_baseline(
    initial: &PopulationState,
    len: usize,
    params: &ModelParams,
) -> Result<SearchReport> {
    if len == 0 {
        return Err(Error::InvalidParameter(
            "sequence length must be >= 1".into(),
        ));
    }
    let started = Instant::now();
    let walker = Walker {
        params,
        nbar_th: avg_population(initial),
        len,
        metric: Metric::FinalC,
        top_k: 1,
    };
    let mut state = initial.clone();
    let mut steps = Vec::with_capacity(len);
    let mut summed = 0.0;
    let mut evaluations = 0u64;
    for i in 0..len {
        let mut best: Option<(f64, Strategy, PopulationState)> = None;
        let mut last_err = None;
        for strategy in Strategy::ALL {
            evaluations += 1;
            match advance(&state, strategy, params) {
                Ok((next, _)) => {
                    let c = walker.performance(&next);
                    if best.as_ref().is_none_or(|(b, _, _)| c > *b) {
                        best = Some((c, strategy, next));
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        let (c, strategy, next) = match best {
            Some(b) => b,
            None => return Err(last_err.expect("both strategies failed").at_step(i + 1)),
        };
        summed += c;
        steps.push(strategy);
        state = next;
    }
    let nbar = avg_population(&state);
    let fidelity = ground_fidelity(&state);
    let entry = SearchEntry {
        sequence: MeasurementSequence::new(steps)?,
        final_performance: walker.performance(&state),
        summed_performance: summed,
        final_nbar: nbar,
        fidelity,
        survival: state.survival(),
    };
    let partial = Partial {
        top: vec![entry],
        evaluations,
        excluded: 0,
    };
    finish(SearchMode::Greedy, Metric::FinalC, partial, started)
}
