//! Regime-switching simulation with known ground truth, and the accounting of
//! false discoveries under three competing definitions.
//!
//! Each stream flips between in control and out of control by a two-state
//! Markov chain (`P(out -> in) = alpha`, `P(in -> out) = beta`), starting in
//! control. In-control increments are `N(-delta/2, 1)`, out-of-control ones
//! `N(delta/2, 1)`. A rejected stream counts as a false discovery at `t` when
//!
//! * `H`: it has been in control at every `0 < nu <= t`;
//! * `H~`: it has been in control on `(tau, t]` for some `tau <= t` with chart value 0 at `tau`;
//! * `INST`: it is in control at `t` (reported only; not controlled).
//!
//! Replications draw from counter-derived substreams of one master seed, so
//! any single replication can be rerun on its own and parallel execution
//! gives bit-identical results.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::chart::ChartConfig;
use crate::error::{Error, Result};
use crate::fdr::Procedure;
use crate::monitor::{Monitor, MonitorDecision, StreamSpec};
use crate::nulldist::{build_transition, null_sequence, InControlModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeConfig {
    /// `P(out -> in)` per step.
    pub alpha: f64,
    /// `P(in -> out)` per step.
    pub beta: f64,
    /// Out-of-control mean shift of the increments.
    pub delta: f64,
}

impl RegimeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta must be finite and non-negative, got {}", self.delta)));
        }
        Ok(())
    }
}

impl Default for RegimeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.07,
            delta: 1.0,
        }
    }
}

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic child seed of `master` for the key path `keys`.
pub fn substream_seed(master: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(mix(master), |acc, &k| mix(acc ^ mix(k)))
}

fn rng_for(master: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(master, keys))
}

/// Out-of-control flags for `N` streams at `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegimeMatrix {
    n: usize,
    horizon: usize,
    out: Vec<bool>,
}

impl RegimeMatrix {
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let horizon = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != horizon) {
            return Err(Error::Integrity("regime rows differ in length".into()));
        }
        Ok(Self {
            n: rows.len(),
            horizon,
            out: rows.concat(),
        })
    }

    pub fn streams(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Whether stream `i` is out of control at time `t` (`1 <= t <= T`).
    pub fn is_out(&self, i: usize, t: usize) -> bool {
        self.out[i * self.horizon + t - 1]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.out[i * self.horizon..(i + 1) * self.horizon]
    }
}

fn step_regime(out: bool, cfg: &RegimeConfig, rng: &mut impl Rng) -> bool {
    let u: f64 = rng.random();
    if out {
        u >= cfg.alpha
    } else {
        u < cfg.beta
    }
}

pub fn simulate_regimes(n: usize, horizon: usize, cfg: &RegimeConfig, seed: u64) -> Result<RegimeMatrix> {
    if n == 0 || horizon == 0 {
        return Err(Error::Config("need at least one stream and one time point".into()));
    }
    cfg.validate()?;
    let mut out = Vec::with_capacity(n * horizon);
    for i in 0..n {
        let mut rng = rng_for(seed, &[i as u64]);
        let mut state = false;
        for _ in 0..horizon {
            state = step_regime(state, cfg, &mut rng);
            out.push(state);
        }
    }
    Ok(RegimeMatrix { n, horizon, out })
}

/// Increments: `N(-delta/2, 1)` in control, `N(delta/2, 1)` out of control.
pub fn generate_observations(regimes: &RegimeMatrix, delta: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::Config(format!("delta must be finite and non-negative, got {delta}")));
    }
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let half = delta / 2.0;
    Ok((0..regimes.n)
        .map(|i| {
            let mut rng = rng_for(seed, &[i as u64]);
            regimes
                .row(i)
                .iter()
                .map(|&out| noise.sample(&mut rng) + if out { half } else { -half })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NullDefinition {
    /// In control since the start.
    SinceStart,
    /// In control since the chart was last at 0.
    SinceLastZero,
    /// In control at the current time.
    Instantaneous,
}

impl NullDefinition {
    pub const ALL: [NullDefinition; 3] = [
        NullDefinition::SinceStart,
        NullDefinition::SinceLastZero,
        NullDefinition::Instantaneous,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NullDefinition::SinceStart => "H",
            NullDefinition::SinceLastZero => "H_tilde",
            NullDefinition::Instantaneous => "INST",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for NullDefinition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-`(stream, t)` truth of each null definition.
#[derive(Debug, Clone)]
pub struct GroundTruthLog {
    n: usize,
    horizon: usize,
    flags: [Vec<bool>; 3],
    last_zero: Vec<usize>,
}

impl GroundTruthLog {
    /// `chart_zero[i][t - 1]` says whether stream `i`'s chart was 0 at `t`.
    pub fn new(regimes: &RegimeMatrix, chart_zero: &[Vec<bool>]) -> Result<Self> {
        let (n, horizon) = (regimes.n, regimes.horizon);
        if chart_zero.len() != n || chart_zero.iter().any(|r| r.len() != horizon) {
            return Err(Error::Integrity("chart path does not match the regime matrix".into()));
        }
        let size = n * horizon;
        let mut flags = [vec![false; size], vec![false; size], vec![false; size]];
        let mut last_zero = vec![0; size];
        for i in 0..n {
            let (mut since_start, mut lz, mut last_out) = (true, 0usize, 0usize);
            for t in 1..=horizon {
                let out = regimes.is_out(i, t);
                if out {
                    since_start = false;
                    last_out = t;
                }
                if chart_zero[i][t - 1] {
                    lz = t;
                }
                let ix = i * horizon + t - 1;
                flags[0][ix] = since_start;
                flags[1][ix] = last_out <= lz;
                flags[2][ix] = !out;
                last_zero[ix] = lz;
            }
        }
        Ok(Self {
            n,
            horizon,
            flags,
            last_zero,
        })
    }

    /// Truth built from the chart values the monitor reported.
    pub fn from_decisions(regimes: &RegimeMatrix, decisions: &[MonitorDecision<f64>]) -> Result<Self> {
        if decisions.len() != regimes.horizon {
            return Err(Error::Integrity(format!(
                "{} decisions for horizon {}",
                decisions.len(),
                regimes.horizon
            )));
        }
        let mut zero = vec![vec![false; regimes.horizon]; regimes.n];
        for (ti, d) in decisions.iter().enumerate() {
            if d.t != ti + 1 || d.records.len() != regimes.n {
                return Err(Error::Integrity(format!("decision at index {ti} is not aligned with the regimes")));
            }
            for r in &d.records {
                zero[r.stream][ti] = r.chart_value == 0.0;
            }
        }
        Self::new(regimes, &zero)
    }

    pub fn streams(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn holds(&self, def: NullDefinition, i: usize, t: usize) -> bool {
        self.flags[def.index()][i * self.horizon + t - 1]
    }

    pub fn last_zero(&self, i: usize, t: usize) -> usize {
        self.last_zero[i * self.horizon + t - 1]
    }

    /// Number of true nulls at `t`.
    pub fn m0(&self, def: NullDefinition, t: usize) -> usize {
        (0..self.n).filter(|&i| self.holds(def, i, t)).count()
    }
}

/// Discoveries at one time point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accounting {
    pub t: usize,
    pub r: usize,
    v: [usize; 3],
}

impl Accounting {
    pub fn v(&self, def: NullDefinition) -> usize {
        self.v[def.index()]
    }

    /// `V / R` with `0 / 0 = 0`.
    pub fn q(&self, def: NullDefinition) -> f64 {
        if self.r == 0 {
            0.0
        } else {
            self.v(def) as f64 / self.r as f64
        }
    }
}

pub fn account(decisions: &[MonitorDecision<f64>], truth: &GroundTruthLog) -> Result<Vec<Accounting>> {
    if decisions.len() != truth.horizon {
        return Err(Error::Integrity(format!(
            "{} decisions for horizon {}",
            decisions.len(),
            truth.horizon
        )));
    }
    decisions
        .iter()
        .enumerate()
        .map(|(ti, d)| {
            if d.t != ti + 1 {
                return Err(Error::Integrity(format!("decision {ti} carries t = {}", d.t)));
            }
            let mut acc = Accounting { t: d.t, r: 0, v: [0; 3] };
            for s in d.rejected() {
                if s >= truth.n {
                    return Err(Error::Integrity(format!("stream {s} is not in the ground truth")));
                }
                acc.r += 1;
                for def in NullDefinition::ALL {
                    acc.v[def.index()] += usize::from(truth.holds(def, s, d.t));
                }
            }
            Ok(acc)
        })
        .collect()
}

/// The simulation design: streams, horizon, regime process, chart and level.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub n_streams: usize,
    pub horizon: usize,
    pub regime: RegimeConfig,
    pub h: f64,
    /// Total number of chart states, `M + 1`.
    pub states: usize,
    pub q_star: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            n_streams: 100,
            horizon: 100,
            regime: RegimeConfig::default(),
            h: 10.0,
            states: 100,
            q_star: 0.05,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.n_streams == 0 || self.horizon == 0 {
            return Err(Error::Config("need at least one stream and one time point".into()));
        }
        if self.states < 2 {
            return Err(Error::Config(format!("need at least 2 chart states, got {}", self.states)));
        }
        if !(self.q_star > 0.0 && self.q_star < 1.0) {
            return Err(Error::Config(format!("q* must lie in (0, 1), got {}", self.q_star)));
        }
        self.regime.validate()
    }

    pub fn chart(&self) -> Result<ChartConfig<f64>> {
        ChartConfig::bounded(self.h, self.states - 1)
    }

    pub fn model(&self) -> InControlModel<f64> {
        InControlModel::mean_shift(self.regime.delta)
    }

    pub fn monitor(&self) -> Result<Monitor<f64>> {
        let specs = StreamSpec::homogeneous(self.n_streams, &self.chart()?, &self.model());
        Monitor::new(specs, self.horizon)
    }
}

const REGIME_KEY: u64 = 0;
const OBS_KEY: u64 = 1;
const STOCH_KEY: u64 = 2;

/// One replication of simulate -> generate -> monitor.
#[derive(Debug, Clone)]
pub struct Replication {
    pub regimes: RegimeMatrix,
    pub observations: Vec<Vec<f64>>,
    pub truth: GroundTruthLog,
    /// Decisions per procedure, in the order given.
    pub decisions: Vec<Vec<MonitorDecision<f64>>>,
}

/// Reruns replication `rep` of a master seed in isolation.
pub fn replicate(
    scenario: &Scenario,
    monitor: &Monitor<f64>,
    procedures: &[Procedure<f64>],
    rep: u64,
    seed: u64,
) -> Result<Replication> {
    let regimes = simulate_regimes(
        scenario.n_streams,
        scenario.horizon,
        &scenario.regime,
        substream_seed(seed, &[rep, REGIME_KEY]),
    )?;
    let observations = generate_observations(&regimes, scenario.regime.delta, substream_seed(seed, &[rep, OBS_KEY]))?;
    let decisions = procedures
        .iter()
        .map(|p| monitor.run(&observations, p, scenario.q_star))
        .collect::<Result<Vec<_>>>()?;
    let truth = match decisions.first() {
        Some(d) => GroundTruthLog::from_decisions(&regimes, d)?,
        None => {
            let d = monitor.run(&observations, &Procedure::Bh, scenario.q_star)?;
            GroundTruthLog::from_decisions(&regimes, &d)?
        }
    };
    Ok(Replication {
        regimes,
        observations,
        truth,
        decisions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantiles {
    pub q50: f64,
    pub q25: f64,
    pub q75: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Linear-interpolation sample quantile of sorted data (Hyndman–Fan type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Quantiles {
    pub fn of(values: &[usize]) -> Self {
        let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
        v.sort_by(f64::total_cmp);
        Self {
            q50: quantile_sorted(&v, 0.5),
            q25: quantile_sorted(&v, 0.25),
            q75: quantile_sorted(&v, 0.75),
            q025: quantile_sorted(&v, 0.025),
            q975: quantile_sorted(&v, 0.975),
        }
    }
}

/// Monte-Carlo averages over replications.
#[derive(Debug, Clone, PartialEq)]
pub struct FdrEstimate {
    pub horizon: usize,
    pub reps: usize,
    pub procedures: Vec<Procedure<f64>>,
    /// `[t-1][procedure][null]` sums of Q, V and R.
    q_sum: Vec<Vec<[f64; 3]>>,
    v_sum: Vec<Vec<[usize; 3]>>,
    r_sum: Vec<Vec<usize>>,
    /// `[t-1][null]` m0 of every replication, in replication order.
    m0: Vec<[Vec<usize>; 3]>,
}

impl FdrEstimate {
    pub fn fdr(&self, t: usize, procedure: usize, def: NullDefinition) -> f64 {
        self.q_sum[t - 1][procedure][def.index()] / self.reps as f64
    }

    pub fn v_mean(&self, t: usize, procedure: usize, def: NullDefinition) -> f64 {
        self.v_sum[t - 1][procedure][def.index()] as f64 / self.reps as f64
    }

    pub fn r_mean(&self, t: usize, procedure: usize) -> f64 {
        self.r_sum[t - 1][procedure] as f64 / self.reps as f64
    }

    pub fn m0_samples(&self, t: usize, def: NullDefinition) -> &[usize] {
        &self.m0[t - 1][def.index()]
    }

    pub fn m0_mean(&self, t: usize, def: NullDefinition) -> f64 {
        let s = self.m0_samples(t, def);
        s.iter().sum::<usize>() as f64 / s.len() as f64
    }

    /// Standard error of [`Self::m0_mean`].
    pub fn m0_se(&self, t: usize, def: NullDefinition) -> f64 {
        let s = self.m0_samples(t, def);
        let mean = self.m0_mean(t, def);
        let n = s.len() as f64;
        if s.len() < 2 {
            return f64::NAN;
        }
        let var = s.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    }

    pub fn m0_quantiles(&self, t: usize, def: NullDefinition) -> Quantiles {
        Quantiles::of(self.m0_samples(t, def))
    }

    pub fn procedure_index(&self, name: &str) -> Option<usize> {
        self.procedures.iter().position(|p| p.name() == name)
    }
}

struct RepOutcome {
    acc: Vec<Vec<Accounting>>,
    m0: Vec<[usize; 3]>,
}

pub fn estimate_fdr(
    scenario: &Scenario,
    procedures: &[Procedure<f64>],
    reps: usize,
    seed: u64,
) -> Result<FdrEstimate> {
    scenario.validate()?;
    if reps == 0 {
        return Err(Error::Config("need at least one replication".into()));
    }
    if procedures.is_empty() {
        return Err(Error::Config("need at least one procedure".into()));
    }
    let monitor = scenario.monitor()?;
    let outcomes = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let r = replicate(scenario, &monitor, procedures, rep, seed)?;
            let acc = r
                .decisions
                .iter()
                .map(|d| account(d, &r.truth))
                .collect::<Result<Vec<_>>>()?;
            let m0 = (1..=scenario.horizon)
                .map(|t| NullDefinition::ALL.map(|def| r.truth.m0(def, t)))
                .collect();
            Ok(RepOutcome { acc, m0 })
        })
        .collect::<Result<Vec<_>>>()?;

    let (tn, pn) = (scenario.horizon, procedures.len());
    let mut est = FdrEstimate {
        horizon: tn,
        reps,
        procedures: procedures.to_vec(),
        q_sum: vec![vec![[0.0; 3]; pn]; tn],
        v_sum: vec![vec![[0; 3]; pn]; tn],
        r_sum: vec![vec![0; pn]; tn],
        m0: vec![[Vec::with_capacity(reps), Vec::with_capacity(reps), Vec::with_capacity(reps)]; tn],
    };
    for o in &outcomes {
        for (pi, accs) in o.acc.iter().enumerate() {
            for a in accs {
                let ti = a.t - 1;
                est.r_sum[ti][pi] += a.r;
                for def in NullDefinition::ALL {
                    est.q_sum[ti][pi][def.index()] += a.q(def);
                    est.v_sum[ti][pi][def.index()] += a.v(def);
                }
            }
        }
        for (ti, m) in o.m0.iter().enumerate() {
            for d in 0..3 {
                est.m0[ti][d].push(m[d]);
            }
        }
    }
    Ok(est)
}

/// Conditioned-versus-exact comparison at one time point.
#[derive(Debug, Clone)]
pub struct StochOrderRow {
    pub t: usize,
    pub samples: usize,
    /// 99% Dvoretzky–Kiefer–Wolfowitz half-width.
    pub dkw_eps: f64,
    pub grid: Vec<f64>,
    pub exact_cdf: Vec<f64>,
    pub conditioned_cdf: Vec<f64>,
    /// p-value atoms `P(v_k)` and the conditioned frequency of `P_t <= P(v_k)`.
    pub p_atoms: Vec<f64>,
    pub p_frac: Vec<f64>,
}

impl StochOrderRow {
    /// `max_x [F*(x) - G(x)]`; dominance means this is at most sampling error.
    pub fn max_gap(&self) -> f64 {
        self.exact_cdf
            .iter()
            .zip(&self.conditioned_cdf)
            .map(|(f, g)| f - g)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max_k [Prob(P_t <= x_k | H~) - x_k]`.
    pub fn max_pvalue_excess(&self) -> f64 {
        self.p_frac
            .iter()
            .zip(&self.p_atoms)
            .map(|(f, x)| f - x)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn dominates(&self) -> bool {
        self.max_gap() <= self.dkw_eps
    }

    pub fn superuniform(&self) -> bool {
        self.max_pvalue_excess() <= self.dkw_eps
    }
}

#[derive(Debug, Clone)]
pub struct StochOrderReport {
    pub paths: usize,
    pub rows: Vec<StochOrderRow>,
}

impl StochOrderReport {
    pub fn passes(&self) -> bool {
        self.rows.iter().all(|r| r.dominates() && r.superuniform())
    }
}

pub fn dkw_epsilon(n: usize, confidence: f64) -> f64 {
    ((2.0 / (1.0 - confidence)).ln() / (2.0 * n as f64)).sqrt()
}

/// Simulates `paths` independent single-stream chart paths, keeps at each
/// `t` in `times` those where `H~` holds, and compares the kept chart values
/// with the exact in-control law of `S_t*`.
pub fn check_stoch_order(
    scenario: &Scenario,
    times: &[usize],
    paths: usize,
    min_samples: usize,
    seed: u64,
) -> Result<StochOrderReport> {
    scenario.validate()?;
    if let Some(&t) = times.iter().find(|&&t| t == 0 || t > scenario.horizon) {
        return Err(Error::Config(format!("time {t} is outside 1..={}", scenario.horizon)));
    }
    let chart = scenario.chart()?;
    let kernel = build_transition(&chart, &scenario.model())?;
    let t_max = times.iter().copied().max().unwrap_or(0);
    let nulls = null_sequence(&kernel, t_max);
    let states = kernel.states();
    let cfg = scenario.regime;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let half = cfg.delta / 2.0;

    const CHUNK: usize = 20_000;
    let chunks = paths.div_ceil(CHUNK);
    let partial = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut counts = vec![vec![0usize; states]; times.len()];
            for p in c * CHUNK..((c + 1) * CHUNK).min(paths) {
                let mut rng = rng_for(seed, &[STOCH_KEY, p as u64]);
                let mut s = chart.initial_state();
                let (mut out, mut last_out) = (false, 0usize);
                for t in 1..=t_max {
                    out = step_regime(out, &cfg, &mut rng);
                    if out {
                        last_out = t;
                    }
                    let z = noise.sample(&mut rng) + if out { half } else { -half };
                    s = chart.update(&s, z);
                    if last_out <= s.last_zero {
                        for (j, _) in times.iter().enumerate().filter(|(_, &tt)| tt == t) {
                            counts[j][s.level.expect("discretized")] += 1;
                        }
                    }
                }
            }
            counts
        })
        .collect::<Vec<_>>();

    let mut rows = Vec::with_capacity(times.len());
    for (j, &t) in times.iter().enumerate() {
        let mut counts = vec![0usize; states];
        for part in &partial {
            for (acc, c) in counts.iter_mut().zip(&part[j]) {
                *acc += c;
            }
        }
        let n: usize = counts.iter().sum();
        if n < min_samples.max(1) {
            return Err(Error::Insufficient {
                t,
                got: n,
                needed: min_samples.max(1),
            });
        }
        let null = &nulls[t];
        let mut acc = 0usize;
        let conditioned_cdf = counts
            .iter()
            .map(|&c| {
                acc += c;
                acc as f64 / n as f64
            })
            .collect();
        let tails = null.tail_values();
        let p_frac = tails
            .iter()
            .map(|x| {
                let hit: usize = tails.iter().zip(&counts).filter(|(tv, _)| *tv <= x).map(|(_, c)| c).sum();
                hit as f64 / n as f64
            })
            .collect();
        rows.push(StochOrderRow {
            t,
            samples: n,
            dkw_eps: dkw_epsilon(n, 0.99),
            grid: null.grid().to_vec(),
            exact_cdf: null.cdf_values(),
            conditioned_cdf,
            p_atoms: tails.to_vec(),
            p_frac,
        });
    }
    Ok(StochOrderReport { paths, rows })
}

pub fn write_fdr_by_time<W: Write>(est: &FdrEstimate, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "procedure", "null_def", "fdr", "V_mean", "R_mean"])?;
    for t in 1..=est.horizon {
        for (pi, proc) in est.procedures.iter().enumerate() {
            for def in NullDefinition::ALL {
                w.write_record([
                    t.to_string(),
                    proc.name().to_string(),
                    def.name().to_string(),
                    est.fdr(t, pi, def).to_string(),
                    est.v_mean(t, pi, def).to_string(),
                    est.r_mean(t, pi).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Pointwise central intervals of m0: median, 50% and 95%.
pub fn write_m0_quantiles<W: Write>(est: &FdrEstimate, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "null_def", "q50", "q25", "q75", "q025", "q975"])?;
    for t in 1..=est.horizon {
        for def in NullDefinition::ALL {
            let q = est.m0_quantiles(t, def);
            w.write_record([
                t.to_string(),
                def.name().to_string(),
                q.q50.to_string(),
                q.q25.to_string(),
                q.q75.to_string(),
                q.q025.to_string(),
                q.q975.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_stoch_order<W: Write>(report: &StochOrderReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "t",
        "state",
        "exact_cdf",
        "conditioned_cdf",
        "p_atom",
        "p_frac",
        "samples",
        "dkw_eps",
    ])?;
    for r in &report.rows {
        for k in 0..r.grid.len() {
            w.write_record([
                r.t.to_string(),
                r.grid[k].to_string(),
                r.exact_cdf[k].to_string(),
                r.conditioned_cdf[k].to_string(),
                r.p_atoms[k].to_string(),
                r.p_frac[k].to_string(),
                r.samples.to_string(),
                r.dkw_eps.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Scenario {
        Scenario {
            n_streams: 20,
            horizon: 30,
            ..Scenario::default()
        }
    }

    #[test]
    fn regimes_degenerate_cases() {
        let stay = RegimeConfig { alpha: 0.0, beta: 0.0, delta: 1.0 };
        let r = simulate_regimes(10, 50, &stay, 1).unwrap();
        assert!((0..10).all(|i| r.row(i).iter().all(|&o| !o)));
        let leave = RegimeConfig { alpha: 0.0, beta: 1.0, delta: 1.0 };
        let r = simulate_regimes(10, 50, &leave, 1).unwrap();
        assert!((0..10).all(|i| r.row(i).iter().all(|&o| o)));
        assert!(simulate_regimes(0, 5, &stay, 1).is_err());
        assert!(simulate_regimes(5, 5, &RegimeConfig { alpha: 1.5, ..stay }, 1).is_err());
    }

    #[test]
    fn in_control_since_start_matches_closed_form() {
        let cfg = RegimeConfig::default();
        let (n, t, reps) = (100usize, 10usize, 2000u64);
        let counts: Vec<f64> = (0..reps)
            .map(|rep| {
                let r = simulate_regimes(n, t, &cfg, substream_seed(99, &[rep])).unwrap();
                (0..n).filter(|&i| r.row(i).iter().all(|&o| !o)).count() as f64
            })
            .collect();
        let mean = counts.iter().sum::<f64>() / reps as f64;
        let sd = (counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (reps as f64 - 1.0)).sqrt();
        let expect = 100.0 * 0.93f64.powi(10);
        assert!((expect - 48.398).abs() < 1e-3);
        assert!((mean - expect).abs() < 3.0 * sd / (reps as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn observation_means() {
        let n = 1_000_000;
        let inside = RegimeMatrix { n: 1, horizon: n, out: vec![false; n] };
        let outside = RegimeMatrix { n: 1, horizon: n, out: vec![true; n] };
        let m_in = generate_observations(&inside, 1.0, 3).unwrap()[0].iter().sum::<f64>() / n as f64;
        let m_out = generate_observations(&outside, 1.0, 3).unwrap()[0].iter().sum::<f64>() / n as f64;
        assert!((m_in + 0.5).abs() < 0.003, "{m_in}");
        assert!((m_out - 0.5).abs() < 0.003, "{m_out}");
        let a = generate_observations(&inside, 0.0, 8).unwrap();
        let b = generate_observations(&outside, 0.0, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truth_flags_follow_definitions() {
        // out at t=2 only; chart zero at t=1 and t=4
        let regimes = RegimeMatrix::from_rows(&[vec![false, true, false, false, false]]).unwrap();
        let zero = vec![vec![true, false, false, true, false]];
        let g = GroundTruthLog::new(&regimes, &zero).unwrap();
        let h: Vec<bool> = (1..=5).map(|t| g.holds(NullDefinition::SinceStart, 0, t)).collect();
        let ht: Vec<bool> = (1..=5).map(|t| g.holds(NullDefinition::SinceLastZero, 0, t)).collect();
        let inst: Vec<bool> = (1..=5).map(|t| g.holds(NullDefinition::Instantaneous, 0, t)).collect();
        assert_eq!(h, [true, false, false, false, false]);
        assert_eq!(ht, [true, false, false, true, true]);
        assert_eq!(inst, [true, false, true, true, true]);
        assert_eq!(g.last_zero(0, 3), 1);
    }

    #[test]
    fn out_of_control_at_zero_is_a_vacuous_tilde_null() {
        let regimes = RegimeMatrix::from_rows(&[vec![true, true]]).unwrap();
        let g = GroundTruthLog::new(&regimes, &[vec![false, true]]).unwrap();
        assert!(!g.holds(NullDefinition::SinceLastZero, 0, 1));
        assert!(g.holds(NullDefinition::SinceLastZero, 0, 2));
        assert!(!g.holds(NullDefinition::Instantaneous, 0, 2));
    }

    #[test]
    fn flag_nesting_on_simulated_paths() {
        let s = small();
        let m = s.monitor().unwrap();
        for rep in 0..20 {
            let r = replicate(&s, &m, &[Procedure::Bh], rep, 7).unwrap();
            for i in 0..s.n_streams {
                for t in 1..=s.horizon {
                    let h = r.truth.holds(NullDefinition::SinceStart, i, t);
                    let ht = r.truth.holds(NullDefinition::SinceLastZero, i, t);
                    let inst = r.truth.holds(NullDefinition::Instantaneous, i, t);
                    let at_zero = r.truth.last_zero(i, t) == t;
                    assert!(!h || ht);
                    assert!(!ht || inst || at_zero);
                }
            }
        }
    }

    #[test]
    fn accounting_conventions() {
        let s = small();
        let m = s.monitor().unwrap();
        let r = replicate(&s, &m, &Procedure::all(), 3, 11).unwrap();
        for d in &r.decisions {
            for a in account(d, &r.truth).unwrap() {
                let (vh, vt, vi) = (
                    a.v(NullDefinition::SinceStart),
                    a.v(NullDefinition::SinceLastZero),
                    a.v(NullDefinition::Instantaneous),
                );
                assert!(vh <= vt && vt <= vi && vi <= a.r);
                if a.r == 0 {
                    assert!(NullDefinition::ALL.iter().all(|&d| a.q(d) == 0.0));
                }
            }
        }
    }

    #[test]
    fn all_in_control_rejections_are_all_false() {
        let s = Scenario {
            n_streams: 30,
            horizon: 40,
            regime: RegimeConfig { alpha: 0.0, beta: 0.0, delta: 1.0 },
            q_star: 0.4,
            ..Scenario::default()
        };
        let m = s.monitor().unwrap();
        let mut seen = false;
        for rep in 0..10 {
            let r = replicate(&s, &m, &[Procedure::Bh], rep, 1).unwrap();
            for a in account(&r.decisions[0], &r.truth).unwrap() {
                if a.r > 0 {
                    seen = true;
                    assert!(NullDefinition::ALL.iter().all(|&d| a.q(d) == 1.0));
                }
            }
        }
        assert!(seen, "expected at least one false rejection at q* = 0.4");
    }

    #[test]
    fn misaligned_inputs_are_integrity_errors() {
        let s = small();
        let m = s.monitor().unwrap();
        let r = replicate(&s, &m, &[Procedure::Bh], 0, 0).unwrap();
        assert!(matches!(account(&r.decisions[0][1..], &r.truth), Err(Error::Integrity(_))));
        let other = simulate_regimes(5, s.horizon, &s.regime, 0).unwrap();
        assert!(GroundTruthLog::from_decisions(&other, &r.decisions[0]).is_err());
    }

    #[test]
    fn single_rep_estimate_is_single_run_q() {
        let s = Scenario {
            n_streams: 25,
            horizon: 20,
            regime: RegimeConfig { alpha: 0.0, beta: 0.07, delta: 0.0 },
            ..Scenario::default()
        };
        let est = estimate_fdr(&s, &[Procedure::Bh], 1, 42).unwrap();
        let m = s.monitor().unwrap();
        let r = replicate(&s, &m, &[Procedure::Bh], 0, 42).unwrap();
        for a in account(&r.decisions[0], &r.truth).unwrap() {
            for def in NullDefinition::ALL {
                assert_eq!(est.fdr(a.t, 0, def), a.q(def));
            }
        }
    }

    #[test]
    fn estimate_is_reproducible_and_replications_rerun() {
        let s = small();
        let a = estimate_fdr(&s, &Procedure::all(), 12, 5).unwrap();
        let b = estimate_fdr(&s, &Procedure::all(), 12, 5).unwrap();
        assert_eq!(a, b);
        let m = s.monitor().unwrap();
        let r7 = replicate(&s, &m, &[Procedure::Bh], 7, 5).unwrap();
        assert_eq!(a.m0_samples(10, NullDefinition::SinceStart)[7], r7.truth.m0(NullDefinition::SinceStart, 10));
    }

    #[test]
    fn quantiles_type7() {
        let q = Quantiles::of(&[1, 2, 3, 4, 5]);
        assert_eq!((q.q50, q.q25, q.q75), (3.0, 2.0, 4.0));
        assert!((q.q025 - 1.1).abs() < 1e-12);
        assert!((q.q975 - 4.9).abs() < 1e-12);
    }

    #[test]
    fn stoch_order_vacuous_when_streams_stay_in_control() {
        let s = Scenario {
            regime: RegimeConfig { alpha: 0.0, beta: 0.0, delta: 1.0 },
            states: 10,
            ..Scenario::default()
        };
        let rep = check_stoch_order(&s, &[5, 20], 50_000, 10_000, 3).unwrap();
        for row in &rep.rows {
            assert_eq!(row.samples, 50_000);
            let sup = row
                .exact_cdf
                .iter()
                .zip(&row.conditioned_cdf)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(sup <= row.dkw_eps, "t={} sup={sup}", row.t);
        }
        assert!(rep.passes());
    }

    #[test]
    fn stoch_order_reports_insufficient_samples() {
        let s = Scenario::default();
        match check_stoch_order(&s, &[50], 100, 1_000, 1) {
            Err(Error::Insufficient { t: 50, got, needed: 1_000 }) => assert!(got < 1_000),
            other => panic!("{other:?}"),
        }
        assert!(check_stoch_order(&s, &[0], 100, 1, 1).is_err());
    }

    #[test]
    fn csv_headers() {
        let s = Scenario {
            n_streams: 5,
            horizon: 3,
            ..Scenario::default()
        };
        let est = estimate_fdr(&s, &[Procedure::Bh], 2, 1).unwrap();
        let mut buf = Vec::new();
        write_fdr_by_time(&est, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,procedure,null_def,fdr,V_mean,R_mean\n"));
        assert_eq!(text.lines().count(), 1 + 3 * 3);
        let mut buf = Vec::new();
        write_m0_quantiles(&est, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,null_def,q50,q25,q75,q025,q975\n"));
    }
}
