//! Command-line front end. Every subcommand writes plot-ready CSV.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::chart::{run_standalone, ChartConfig, IncrementModel, Signals};
use crate::error::{Error, Result};
use crate::fdr::Procedure;
use crate::monitor::{Monitor, MonitorDecision, StreamSpec};
use crate::nulldist::{build_transition, null_sequence, InControlModel};
use crate::simlab::{self, RegimeConfig, RegimeMatrix, Scenario};

#[derive(Debug, Parser)]
#[command(name = "cusum-fdr", version, about = "Bounded non-restarting CUSUM charts with pointwise FDR control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dump the exact in-control chart distribution for t = 0..=horizon.
    Nulldist(NulldistArgs),
    /// Monitor streams read from a `stream_id,t,value` CSV.
    Monitor(MonitorArgs),
    /// Monte-Carlo FDR estimates and the stochastic-order check.
    Simulate(SimulateArgs),
    /// One stream through bounded, unbounded and restarting charts.
    Figure1(Figure1Args),
    /// FDR and m0 curves for the three procedures (same flags as `simulate`).
    Figure2(SimulateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ChartArgs {
    /// Upper boundary of the chart.
    #[arg(long, default_value_t = 10.0)]
    pub h: f64,
    /// Total number of chart states (M + 1).
    #[arg(long, default_value_t = 100)]
    pub states: usize,
    /// Out-of-control mean shift; in-control increments are N(-delta/2, 1).
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
}

impl ChartArgs {
    fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::Config(format!("--h must be finite and positive, got {}", self.h)));
        }
        if self.states < 2 {
            return Err(Error::Config(format!("--states must be at least 2, got {}", self.states)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("--delta must be finite and positive, got {}", self.delta)));
        }
        Ok(())
    }

    fn chart(&self) -> Result<ChartConfig<f64>> {
        ChartConfig::bounded(self.h, self.states - 1)
    }

    fn model(&self) -> InControlModel<f64> {
        InControlModel::mean_shift(self.delta)
    }
}

#[derive(Debug, Clone, Args)]
pub struct NulldistArgs {
    #[command(flatten)]
    pub chart: ChartArgs,
    #[arg(long, default_value_t = 100)]
    pub horizon: usize,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IncrementArg {
    /// Z = X - delta/2.
    MeanShift,
    /// Values already are chart increments.
    Identity,
}

#[derive(Debug, Clone, Args)]
pub struct MonitorArgs {
    /// Observations CSV with header `stream_id,t,value`.
    #[arg(long)]
    pub input: PathBuf,
    /// Decisions CSV; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub chart: ChartArgs,
    #[arg(long, default_value_t = 0.05)]
    pub q_star: f64,
    /// bh, two-step or adaptive.
    #[arg(long, default_value = "bh")]
    pub procedure: String,
    #[arg(long, value_enum, default_value_t = IncrementArg::MeanShift)]
    pub increment: IncrementArg,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 100)]
    pub n_streams: usize,
    #[arg(long, default_value_t = 100)]
    pub horizon: usize,
    /// P(out -> in) per step.
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    /// P(in -> out) per step.
    #[arg(long, default_value_t = 0.07)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
    #[arg(long, default_value_t = 10.0)]
    pub h: f64,
    /// Total number of chart states (M + 1).
    #[arg(long, default_value_t = 100)]
    pub states: usize,
    #[arg(long, default_value_t = 0.05)]
    pub q_star: f64,
    /// Replications; 10000 reproduces the full-size study.
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[arg(long, env = "CUSUM_FDR_SEED", default_value_t = 20_140_101)]
    pub seed: u64,
    /// Comma-separated subset of bh,two-step,adaptive.
    #[arg(long, default_value = "bh,two-step,adaptive")]
    pub procedures: String,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    /// Single-stream paths for the stochastic-order check; 0 skips it.
    #[arg(long, default_value_t = 3_000_000)]
    pub stoch_paths: usize,
    /// Comma-separated times for the stochastic-order check.
    #[arg(long, default_value = "25,50,75")]
    pub stoch_times: String,
    /// Minimum conditioned samples per checked time.
    #[arg(long, default_value_t = 100_000)]
    pub stoch_min: usize,
}

impl SimulateArgs {
    pub fn scenario(&self) -> Result<Scenario> {
        let s = Scenario {
            n_streams: self.n_streams,
            horizon: self.horizon,
            regime: RegimeConfig {
                alpha: self.alpha,
                beta: self.beta,
                delta: self.delta,
            },
            h: self.h,
            states: self.states,
            q_star: self.q_star,
        };
        s.validate()?;
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::Config(format!("--h must be finite and positive, got {}", self.h)));
        }
        Ok(s)
    }

    pub fn procedure_list(&self) -> Result<Vec<Procedure<f64>>> {
        let procs = self
            .procedures
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        if procs.is_empty() {
            return Err(Error::Config("--procedures is empty".into()));
        }
        Ok(procs)
    }

    pub fn stoch_time_list(&self) -> Result<Vec<usize>> {
        self.stoch_times
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Config(format!("bad --stoch-times entry '{s}': {e}")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Args)]
pub struct Figure1Args {
    #[arg(long, env = "CUSUM_FDR_SEED", default_value_t = 20_140_101)]
    pub seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Nulldist(a) => {
            a.chart.validate()?;
            write_nulldist(&a.chart.chart()?, &a.chart.model(), a.horizon, sink(a.out.as_deref())?)
        }
        Command::Monitor(a) => {
            a.chart.validate()?;
            if !(a.q_star > 0.0 && a.q_star < 1.0) {
                return Err(Error::Config(format!("--q-star must lie in (0, 1), got {}", a.q_star)));
            }
            let procedure: Procedure<f64> = a.procedure.parse()?;
            let increment = match a.increment {
                IncrementArg::MeanShift => IncrementModel::MeanShift { delta: a.chart.delta },
                IncrementArg::Identity => IncrementModel::Identity,
            };
            let config = MonitorConfig {
                chart: a.chart.chart()?.with_increment(increment)?,
                model: a.chart.model(),
                procedure,
                q_star: a.q_star,
            };
            let input = File::open(&a.input)?;
            monitor_csv(input, &config, sink(a.output.as_deref())?)
        }
        Command::Simulate(a) | Command::Figure2(a) => run_figure2(&a),
        Command::Figure1(a) => run_figure1(a.seed, sink(a.out.as_deref())?),
    }
}

pub fn write_nulldist<W: Write>(
    chart: &ChartConfig<f64>,
    model: &InControlModel<f64>,
    horizon: usize,
    out: W,
) -> Result<()> {
    let kernel = build_transition(chart, model)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "state", "prob", "tail"])?;
    for d in null_sequence(&kernel, horizon) {
        for (k, v) in d.grid().iter().enumerate() {
            w.write_record([
                d.t().to_string(),
                v.to_string(),
                d.probs()[k].to_string(),
                d.tail_values()[k].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Everything `monitor` needs besides the data.
#[derive(Debug, Clone)]
pub struct MonitorConfig {
    pub chart: ChartConfig<f64>,
    pub model: InControlModel<f64>,
    pub procedure: Procedure<f64>,
    pub q_star: f64,
}

/// Observations grouped by stream, in order of first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTable {
    pub ids: Vec<String>,
    /// `values[i][t - 1]`; `None` where the value field was empty.
    pub values: Vec<Vec<Option<f64>>>,
}

impl ObservationTable {
    pub fn horizon(&self) -> usize {
        self.values.iter().map(Vec::len).max().unwrap_or(0)
    }

    fn padded(&self) -> Vec<Vec<Option<f64>>> {
        let h = self.horizon();
        self.values
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.resize(h, None);
                r
            })
            .collect()
    }
}

pub fn read_observations<R: Read>(input: R) -> Result<ObservationTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != ["stream_id", "t", "value"] {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header stream_id,t,value, found {}", header.join(",")),
        });
    }
    let mut ids: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut cells: Vec<HashMap<usize, Option<f64>>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |msg: String| Error::Parse { line, msg };
        let id = rec.get(0).filter(|s| !s.is_empty()).ok_or_else(|| bad("missing stream_id".into()))?;
        let t: usize = rec
            .get(1)
            .unwrap_or("")
            .parse()
            .map_err(|e| bad(format!("bad t '{}': {e}", rec.get(1).unwrap_or(""))))?;
        if t == 0 {
            return Err(bad("t starts at 1".into()));
        }
        let raw = rec.get(2).unwrap_or("");
        let value = if raw.is_empty() {
            None
        } else {
            let v: f64 = raw.parse().map_err(|e| bad(format!("bad value '{raw}': {e}")))?;
            if !v.is_finite() {
                return Err(bad(format!("value '{raw}' is not finite")));
            }
            Some(v)
        };
        let slot = *index.entry(id.to_owned()).or_insert_with(|| {
            ids.push(id.to_owned());
            cells.push(HashMap::new());
            ids.len() - 1
        });
        if cells[slot].insert(t, value).is_some() {
            return Err(Error::Integrity(format!("stream '{id}' has t = {t} twice (line {line})")));
        }
    }
    let values = ids
        .iter()
        .zip(cells)
        .map(|(id, mut c)| {
            let n = c.len();
            (1..=n)
                .map(|t| {
                    c.remove(&t).ok_or_else(|| {
                        Error::Integrity(format!("stream '{id}' is missing t = {t}; times must run 1..={n}"))
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ObservationTable { ids, values })
}

pub fn write_observations<W: Write>(ids: &[String], values: &[Vec<f64>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["stream_id", "t", "value"])?;
    for (id, row) in ids.iter().zip(values) {
        for (t, v) in row.iter().enumerate() {
            w.write_record([id.clone(), (t + 1).to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn monitor_observations(
    table: &ObservationTable,
    config: &MonitorConfig,
) -> Result<(Monitor<f64>, Vec<MonitorDecision<f64>>)> {
    let specs = table
        .ids
        .iter()
        .map(|id| StreamSpec::new(id.clone(), config.chart.clone(), config.model))
        .collect();
    let monitor = Monitor::new(specs, table.horizon())?;
    let decisions = monitor.run_sparse(&table.padded(), &config.procedure, config.q_star)?;
    Ok((monitor, decisions))
}

pub fn write_decisions<W: Write>(
    monitor: &Monitor<f64>,
    decisions: &[MonitorDecision<f64>],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "stream_id", "chart_value", "p_value", "rejected"])?;
    for d in decisions {
        for r in &d.records {
            w.write_record([
                d.t.to_string(),
                monitor.specs()[r.stream].id.clone(),
                r.chart_value.to_string(),
                r.p_value.to_string(),
                r.rejected.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn monitor_csv<R: Read, W: Write>(input: R, config: &MonitorConfig, out: W) -> Result<()> {
    let table = read_observations(input)?;
    let (monitor, decisions) = monitor_observations(&table, config)?;
    write_decisions(&monitor, &decisions, out)
}

pub fn run_figure2(args: &SimulateArgs) -> Result<()> {
    let scenario = args.scenario()?;
    let procedures = args.procedure_list()?;
    let times: Vec<usize> = args
        .stoch_time_list()?
        .into_iter()
        .filter(|&t| t <= scenario.horizon)
        .collect();
    fs::create_dir_all(&args.out_dir)?;
    let est = simlab::estimate_fdr(&scenario, &procedures, args.reps, args.seed)?;
    simlab::write_fdr_by_time(&est, BufWriter::new(File::create(args.out_dir.join("fdr_by_time.csv"))?))?;
    simlab::write_m0_quantiles(&est, BufWriter::new(File::create(args.out_dir.join("m0_quantiles.csv"))?))?;
    if args.stoch_paths > 0 && !times.is_empty() {
        let report = simlab::check_stoch_order(&scenario, &times, args.stoch_paths, args.stoch_min, args.seed)?;
        simlab::write_stoch_order(&report, BufWriter::new(File::create(args.out_dir.join("stoch_order.csv"))?))?;
    }
    Ok(())
}

pub const FIGURE1_HORIZON: usize = 100;
pub const FIGURE1_WINDOW: (usize, usize) = (20, 60);
pub const FIGURE1_H: f64 = 10.0;
pub const FIGURE1_ZETA: f64 = 5.0;

/// One stream observed under three chart variants.
#[derive(Debug, Clone)]
pub struct Figure1Run {
    pub observations: Vec<f64>,
    pub truth: Vec<bool>,
    pub bounded: Vec<f64>,
    pub unbounded: Vec<f64>,
    /// Reset times of the restarting chart.
    pub restarting_signals: Vec<usize>,
    pub bounded_signals: Signals,
    pub unbounded_signals: Signals,
}

/// `N(1/2, 1)` increments on the out-of-control window, `N(-1/2, 1)` elsewhere.
pub fn figure1_run(seed: u64) -> Result<Figure1Run> {
    let (lo, hi) = FIGURE1_WINDOW;
    let truth: Vec<bool> = (1..=FIGURE1_HORIZON).map(|t| (lo..=hi).contains(&t)).collect();
    let regimes = RegimeMatrix::from_rows(std::slice::from_ref(&truth))?;
    let observations = simlab::generate_observations(&regimes, 1.0, seed)?.remove(0);
    // phi(x) = x for all three charts
    let bounded = run_standalone(&observations, &ChartConfig::bounded_continuous(FIGURE1_H)?, FIGURE1_ZETA)?;
    let unbounded = run_standalone(&observations, &ChartConfig::unbounded(), FIGURE1_ZETA)?;
    let restarting = run_standalone(&observations, &ChartConfig::restarting(FIGURE1_ZETA)?, FIGURE1_ZETA)?;
    let restarting_signals = match restarting.signals {
        Signals::Events(e) => e,
        Signals::Intervals(_) => unreachable!("restarting chart signals as events"),
    };
    Ok(Figure1Run {
        observations,
        truth,
        bounded: bounded.path.iter().map(|s| s.value).collect(),
        unbounded: unbounded.path.iter().map(|s| s.value).collect(),
        restarting_signals,
        bounded_signals: bounded.signals,
        unbounded_signals: unbounded.signals,
    })
}

pub fn run_figure1<W: Write>(seed: u64, out: W) -> Result<()> {
    let run = figure1_run(seed)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "obs", "bounded", "unbounded", "restarting_signal", "truth"])?;
    for t in 1..=FIGURE1_HORIZON {
        let i = t - 1;
        w.write_record([
            t.to_string(),
            run.observations[i].to_string(),
            run.bounded[i].to_string(),
            run.unbounded[i].to_string(),
            u8::from(run.restarting_signals.contains(&t)).to_string(),
            u8::from(run.truth[i]).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
