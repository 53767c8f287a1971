use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mbcool_core::measurement::{numeric_tau_opt_um, scan_um, TauGrid};
use mbcool_core::physics::ThermalSpec;
use mbcool_core::ppo::checkpoint::{read_checkpoint, write_checkpoint};
use mbcool_core::ppo::{generate_sequence, EnvConfig, PolicyParams};
use mbcool_core::search::Metric;
use mbcool_core::sequence::TraceSummary;
use mbcool_core::{
    apply_um, avg_population, exhaustive_best, greedy_baseline, make_pattern, run_sequence,
    tau_opt_um, CoolingTrace, ExhaustiveOptions, MeasurementSequence, Pattern, PopulationState,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::Output;
use crate::{
    ExhaustiveArgs, Figure, GenerateArgs, Global, ReproduceArgs, ScanTauArgs, SimulateArgs,
};

fn kelvin_label(t: f64) -> String {
    format!("T{t}K")
}

/// One point of the scan list: a label and its thermal spec.
fn scan_targets(
    config: &RunConfig,
    global: &Global,
    args: &ScanTauArgs,
) -> Result<Vec<(String, ThermalSpec)>> {
    if args.temperatures.is_some() && (global.temperature.is_some() || global.x.is_some()) {
        bail!("--temperatures cannot be combined with --temperature or --x; give one source of temperatures");
    }
    let single = global.temperature.is_some() || global.x.is_some();
    if single {
        let spec = config.thermal_spec()?;
        let label = match spec.temperature_kelvin {
            Some(t) => kelvin_label(t),
            None => format!("x{}", spec.x),
        };
        return Ok(vec![(label, spec)]);
    }
    let temps = args
        .temperatures
        .clone()
        .unwrap_or_else(|| config.scan.temperatures.clone());
    if temps.is_empty() {
        bail!("the temperature list is empty");
    }
    temps
        .iter()
        .map(|&t| Ok((kelvin_label(t), config.spec_at(t)?)))
        .collect()
}

#[derive(Serialize)]
struct ScanMarker {
    label: String,
    temperature_kelvin: Option<f64>,
    x: f64,
    n_cutoff: usize,
    nbar_th: f64,
    tau_analytic: f64,
    nbar_at_analytic: f64,
    tau_grid: f64,
    nbar_grid_min: f64,
    file: String,
}

fn write_scan(
    config: &RunConfig,
    targets: &[(String, ThermalSpec)],
    grid: &TauGrid,
    out: &Output,
) -> Result<()> {
    let params = config.model_params()?;
    let mut markers = Vec::new();
    for (label, spec) in targets {
        let state = config
            .state_for(spec)
            .with_context(|| format!("at {label}"))?;
        let rows = scan_um(&state, &params, grid)?;
        let file = format!("scan_{label}.csv");
        let mut w = csv_writer(out, &file)?;
        w.write_record(["tau", "nbar"])?;
        for (tau, nbar) in &rows {
            w.write_record([tau.to_string(), nbar.to_string()])?;
        }
        w.flush()?;

        let analytic = tau_opt_um(&state, &params)?.tau;
        let numeric = numeric_tau_opt_um(&state, &params, grid)?.tau;
        markers.push(ScanMarker {
            label: label.clone(),
            temperature_kelvin: spec.temperature_kelvin,
            x: spec.x,
            n_cutoff: state.n_cutoff(),
            nbar_th: avg_population(&state),
            tau_analytic: analytic,
            nbar_at_analytic: avg_population(&apply_um(&state, analytic, &params)?),
            tau_grid: numeric,
            nbar_grid_min: avg_population(&apply_um(&state, numeric, &params)?),
            file,
        });
    }
    out.json("markers.json", &markers)?;
    out.config_file()
}

fn csv_writer(out: &Output, name: &str) -> Result<csv::Writer<std::io::BufWriter<File>>> {
    Ok(csv::WriterBuilder::new().from_writer(out.csv(name)?))
}

pub fn scan_tau(config: &RunConfig, global: &Global, args: &ScanTauArgs, dir: &Path) -> Result<()> {
    let mut config = config.clone();
    if let Some(t) = &args.temperatures {
        config.scan.temperatures = t.clone();
    }
    if let Some(m) = args.tau_max {
        config.scan.tau_max = m;
    }
    if let Some(p) = args.points {
        config.scan.points = p;
    }
    let targets = scan_targets(&config, global, args)?;
    let grid = TauGrid {
        tau_max: config.scan.tau_max,
        points: config.scan.points,
    };
    let out = Output::new(dir, "scan-tau", &config)?;
    write_scan(&config, &targets, &grid, &out)?;
    println!("wrote {} scans to {}", targets.len(), dir.display());
    Ok(())
}

fn write_trace(out: &Output, name: &str, trace: &CoolingTrace) -> Result<()> {
    let w = out.csv(name)?;
    trace.write_csv(w)?;
    Ok(())
}

fn load_policy(path: &Path) -> Result<PolicyParams> {
    let file =
        File::open(path).with_context(|| format!("missing checkpoint {}", path.display()))?;
    read_checkpoint(BufReader::new(file))
        .with_context(|| format!("reading checkpoint {}", path.display()))
}

fn save_policy(out: &Output, name: &str, policy: &PolicyParams) -> Result<PathBuf> {
    let w = out.file(name)?;
    write_checkpoint(policy, &out.header_lines(), w)?;
    Ok(out.path(name))
}

#[derive(Serialize)]
struct SimulateResult<'a> {
    source: String,
    summary: TraceSummary,
    clamped_steps: &'a [usize],
}

pub fn simulate(config: &RunConfig, args: &SimulateArgs, dir: &Path) -> Result<()> {
    let params = config.model_params()?;
    let initial = config.initial_state()?;
    let n = config.run.n;
    let (source, trace) = if let Some(p) = &args.source.pattern {
        let pattern: Pattern = p.parse()?;
        let seq = make_pattern(pattern, n)?;
        (pattern.to_string(), run_sequence(&initial, &seq, &params)?)
    } else if let Some(s) = &args.source.sequence {
        let seq: MeasurementSequence = s.parse().with_context(|| format!("in --sequence {s:?}"))?;
        (s.clone(), run_sequence(&initial, &seq, &params)?)
    } else if let Some(path) = &args.source.checkpoint {
        let policy = load_policy(path)?;
        let generated = generate_sequence(&policy, &initial, &params, n)?;
        (format!("checkpoint {}", path.display()), generated.trace)
    } else {
        bail!("give one of --pattern, --sequence or --checkpoint");
    };
    let out = Output::new(dir, "simulate", config)?;
    write_trace(&out, "trace.csv", &trace)?;
    let summary = trace.summary();
    out.json(
        "summary.json",
        SimulateResult {
            source,
            summary: summary.clone(),
            clamped_steps: &trace.clamped_steps,
        },
    )?;
    out.config_file()?;
    println!(
        "{}: nbar {:.6e}, F {:.6}, Pg {:.6}, C {:.6}",
        summary.sequence,
        summary.final_nbar,
        summary.final_fidelity,
        summary.final_survival,
        summary.final_performance
    );
    Ok(())
}

pub fn exhaustive(config: &RunConfig, args: &ExhaustiveArgs, dir: &Path) -> Result<()> {
    let mut config = config.clone();
    if let Some(m) = &args.metric {
        config.search.metric = m.parse::<Metric>()?;
    }
    if let Some(k) = args.top_k {
        config.search.top_k = k;
    }
    config.search.allow_large |= args.allow_large;
    let params = config.model_params()?;
    let initial = config.initial_state()?;
    let options = ExhaustiveOptions {
        metric: config.search.metric,
        top_k: config.search.top_k,
        allow_large: config.search.allow_large,
        parallel: !args.single_core,
    };
    let report = exhaustive_best(&initial, config.run.n, &params, &options)?;
    let out = Output::new(dir, "exhaustive", &config)?;
    report.write_top_csv(out.csv("top.csv")?)?;
    out.json("report.json", &report)?;
    out.config_file()?;
    println!(
        "best {} with score {:.6} over {} sequences ({} excluded) in {:.2} s",
        report.best_sequence,
        report.best_score,
        report.evaluations,
        report.excluded,
        report.wall_seconds
    );
    Ok(())
}

pub fn greedy(config: &RunConfig, dir: &Path) -> Result<()> {
    let params = config.model_params()?;
    let initial = config.initial_state()?;
    let report = greedy_baseline(&initial, config.run.n, &params)?;
    let out = Output::new(dir, "greedy", config)?;
    report.write_top_csv(out.csv("top.csv")?)?;
    out.json("report.json", &report)?;
    out.config_file()?;
    println!(
        "greedy {} with final C {:.6}",
        report.best_sequence,
        report.best().final_performance
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainResult {
    converged: bool,
    warning: Option<String>,
    iterations: usize,
    rolled_back_updates: usize,
    checkpoint: String,
    summary: TraceSummary,
}

fn env_for(config: &RunConfig, initial: PopulationState) -> Result<EnvConfig> {
    Ok(EnvConfig {
        params: config.model_params()?,
        initial,
        horizon: config.run.n,
        observation_size: config.run.observation_size,
    })
}

/// Trains one policy into `out` and returns it with its greedy trace.
fn train_into(
    config: &RunConfig,
    initial: &PopulationState,
    out: &Output,
) -> Result<(PolicyParams, CoolingTrace)> {
    let env = env_for(config, initial.clone())?;
    let outcome = mbcool_core::ppo::train(&env, &config.ppo, config.run.seed)?;
    if let Some(w) = &outcome.warning {
        eprintln!("warning: {w}");
    }
    let path = save_policy(out, "policy.ckpt", &outcome.policy)?;
    outcome.write_curve_csv(out.csv("curve.csv")?)?;
    let generated = generate_sequence(&outcome.policy, initial, &env.params, config.run.n)?;
    write_trace(out, "trace.csv", &generated.trace)?;
    out.json(
        "train.json",
        TrainResult {
            converged: outcome.converged,
            warning: outcome.warning.clone(),
            iterations: outcome.curve.len(),
            rolled_back_updates: outcome.rolled_back_updates,
            checkpoint: path.display().to_string(),
            summary: generated.trace.summary(),
        },
    )?;
    Ok((outcome.policy, generated.trace))
}

pub fn train(config: &RunConfig, dir: &Path) -> Result<()> {
    let initial = config.initial_state()?;
    let out = Output::new(dir, "train", config)?;
    let (_, trace) = train_into(config, &initial, &out)?;
    out.config_file()?;
    let last = trace.last();
    println!(
        "policy sequence {}: nbar {:.6e}, F {:.6}, Pg {:.6}, C {:.6}",
        trace.sequence(),
        last.nbar,
        last.fidelity,
        last.survival,
        last.performance
    );
    Ok(())
}

#[derive(Serialize)]
struct GenerateResult {
    checkpoint: String,
    sequence: MeasurementSequence,
    taus: Vec<f64>,
    summary: TraceSummary,
}

pub fn generate(config: &RunConfig, args: &GenerateArgs, dir: &Path) -> Result<()> {
    let params = config.model_params()?;
    let initial = config.initial_state()?;
    let policy = load_policy(&args.checkpoint)?;
    let generated = generate_sequence(&policy, &initial, &params, config.run.n)?;
    let out = Output::new(dir, "generate", config)?;
    write_trace(&out, "trace.csv", &generated.trace)?;
    out.json(
        "sequence.json",
        GenerateResult {
            checkpoint: args.checkpoint.display().to_string(),
            sequence: generated.sequence.clone(),
            taus: generated.taus.clone(),
            summary: generated.trace.summary(),
        },
    )?;
    out.config_file()?;
    println!("{}", generated.sequence);
    Ok(())
}

pub fn reproduce(config: &RunConfig, args: &ReproduceArgs, dir: &Path) -> Result<()> {
    match args.figure {
        Figure::Fig1 => {
            let out = Output::new(&dir.join("fig1"), "reproduce fig1", config)?;
            let targets = config
                .scan
                .temperatures
                .iter()
                .map(|&t| Ok((kelvin_label(t), config.spec_at(t)?)))
                .collect::<Result<Vec<_>>>()?;
            let grid = TauGrid {
                tau_max: config.scan.tau_max,
                points: config.scan.points,
            };
            write_scan(config, &targets, &grid, &out)?;
            println!("wrote {}", dir.join("fig1").display());
            Ok(())
        }
        Figure::Fig3 => fig3(config, args.checkpoint.as_deref(), dir),
        Figure::Fig4 => fig4(config, args.load_dir.as_deref(), dir),
    }
}

#[derive(Serialize)]
struct NamedSummary {
    name: String,
    file: String,
    summary: TraceSummary,
}

fn fig3(config: &RunConfig, checkpoint: Option<&Path>, dir: &Path) -> Result<()> {
    let params = config.model_params()?;
    let initial = config.initial_state()?;
    let out = Output::new(&dir.join("fig3"), "reproduce fig3", config)?;
    let mut rows = Vec::new();
    for pattern in [
        Pattern::AllUm,
        Pattern::AllCm,
        Pattern::Block(1),
        Pattern::Block(2),
        Pattern::Block(4),
    ] {
        let trace = run_sequence(&initial, &make_pattern(pattern, config.run.n)?, &params)?;
        let file = format!("trace_{pattern}.csv");
        write_trace(&out, &file, &trace)?;
        rows.push(NamedSummary {
            name: pattern.to_string(),
            file,
            summary: trace.summary(),
        });
    }
    let opt = match checkpoint {
        Some(path) => {
            generate_sequence(&load_policy(path)?, &initial, &params, config.run.n)?.trace
        }
        None => train_into(config, &initial, &out.subdir("policy")?)?.1,
    };
    write_trace(&out, "trace_S_opt.csv", &opt)?;
    rows.push(NamedSummary {
        name: "S_opt".into(),
        file: "trace_S_opt.csv".into(),
        summary: opt.summary(),
    });
    out.json("summary.json", &rows)?;
    out.config_file()?;
    for r in &rows {
        println!(
            "{:>5} {} C {:.4}",
            r.name, r.summary.sequence, r.summary.final_performance
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct TemperatureRow {
    temperature_kelvin: f64,
    sequence: MeasurementSequence,
    um_fraction: f64,
    #[serde(rename = "final_C")]
    final_c: f64,
    final_nbar: f64,
    #[serde(rename = "final_Pg")]
    final_pg: f64,
    dir: String,
}

#[derive(Serialize)]
struct TrendSummary {
    rows: Vec<TemperatureRow>,
    #[serde(rename = "final_C_decreasing")]
    final_c_decreasing: bool,
    um_fraction_increasing: bool,
}

fn fig4(config: &RunConfig, load_dir: Option<&Path>, dir: &Path) -> Result<()> {
    let params = config.model_params()?;
    let out = Output::new(&dir.join("fig4"), "reproduce fig4", config)?;
    let mut rows = Vec::new();
    for &t in &config.reproduce.temperatures {
        let label = kelvin_label(t);
        let initial = config
            .state_for(&config.spec_at(t)?)
            .with_context(|| format!("at {label}"))?;
        let sub = out.subdir(&label)?;
        let trace = match load_dir {
            Some(root) => {
                let policy = load_policy(&root.join(&label).join("policy.ckpt"))?;
                let trace = generate_sequence(&policy, &initial, &params, config.run.n)?.trace;
                write_trace(&sub, "trace.csv", &trace)?;
                trace
            }
            None => train_into(config, &initial, &sub)?.1,
        };
        let seq = trace.sequence();
        let last = trace.last();
        rows.push(TemperatureRow {
            temperature_kelvin: t,
            um_fraction: seq.um_fraction(),
            sequence: seq,
            final_c: last.performance,
            final_nbar: last.nbar,
            final_pg: last.survival,
            dir: label,
        });
    }
    let mut by_t: Vec<&TemperatureRow> = rows.iter().collect();
    by_t.sort_by(|a, b| a.temperature_kelvin.total_cmp(&b.temperature_kelvin));
    let final_c_decreasing = by_t.windows(2).all(|w| w[1].final_c < w[0].final_c);
    let um_fraction_increasing = by_t.windows(2).all(|w| w[1].um_fraction > w[0].um_fraction);
    for r in &by_t {
        println!(
            "{:>6} K {} UM {:.3} C {:.4}",
            r.temperature_kelvin, r.sequence, r.um_fraction, r.final_c
        );
    }
    println!("final C decreasing with T: {final_c_decreasing}; UM fraction increasing with T: {um_fraction_increasing}");
    if !final_c_decreasing {
        eprintln!("warning: final C is not monotonically decreasing with temperature");
    }
    out.json(
        "summary.json",
        TrendSummary {
            rows,
            final_c_decreasing,
            um_fraction_increasing,
        },
    )?;
    out.config_file()
}
