//! CUSUM recursions: the bounded, non-restarting chart with optional grid
//! rounding, plus the unbounded and restarting charts it is compared against.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Probability density used by the loglikelihood increment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Density<T> {
    Gaussian { mean: T, sd: T },
    Exponential { rate: T },
}

impl<T: Scalar> Density<T> {
    pub fn ln_pdf(&self, x: T) -> Result<T> {
        match *self {
            Density::Gaussian { mean, sd } => {
                if !(sd > T::zero()) {
                    return Err(Error::Domain(format!("gaussian sd must be positive, got {sd}")));
                }
                let u = (x - mean) / sd;
                let half_ln_two_pi = T::lit(0.5 * (2.0 * std::f64::consts::PI).ln());
                Ok(-T::lit(0.5) * u * u - sd.ln() - half_ln_two_pi)
            }
            Density::Exponential { rate } => {
                if !(rate > T::zero()) {
                    return Err(Error::Domain(format!("exponential rate must be positive, got {rate}")));
                }
                if x < T::zero() {
                    return Err(Error::Domain(format!("exponential density is zero at {x}")));
                }
                Ok(rate.ln() - rate * x)
            }
        }
    }
}

/// Maps a raw observation `X_t` to the chart increment `Z_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IncrementModel<T> {
    /// `Z = X - delta / 2`, the classic CUSUM for a mean shift of `delta`.
    MeanShift { delta: T },
    /// `Z = ln f1(X) - ln f0(X)`.
    LogLikelihood { f0: Density<T>, f1: Density<T> },
    /// Observations already are increments.
    Identity,
}

impl<T: Scalar> IncrementModel<T> {
    pub fn validate(&self) -> Result<()> {
        match *self {
            IncrementModel::MeanShift { delta } if !(delta > T::zero()) => Err(Error::Config(
                format!("mean-shift delta must be positive, got {delta}"),
            )),
            _ => Ok(()),
        }
    }

    pub fn increment(&self, x: T) -> Result<T> {
        match *self {
            IncrementModel::MeanShift { delta } => {
                self.validate()?;
                Ok(x - delta / T::lit(2.0))
            }
            IncrementModel::LogLikelihood { f0, f1 } => Ok(f1.ln_pdf(x)? - f0.ln_pdf(x)?),
            IncrementModel::Identity => Ok(x),
        }
    }
}

/// Free-function form of [`IncrementModel::increment`].
pub fn increment<T: Scalar>(x: T, model: &IncrementModel<T>) -> Result<T> {
    model.increment(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant<T> {
    /// Clamped to `[0, h]` and never reset; signals while above a threshold.
    NonRestartingBounded,
    /// `max(S + Z, 0)` with no upper clamp.
    Unbounded,
    /// Unbounded chart that signals and resets to 0 whenever it reaches `zeta`.
    Restarting { zeta: T },
}

/// The `M + 1` rounding targets of `phi` on `[0, h]` and the `M` cut points
/// `w_j = (h / M)(j - 1/2)` separating them.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    m: usize,
    values: Vec<T>,
    cuts: Vec<T>,
}

impl<T: Scalar> Grid<T> {
    pub fn new(h: T, m: usize) -> Result<Self> {
        if m < 1 {
            return Err(Error::Domain("grid parameter M must be at least 1".into()));
        }
        if !(h > T::zero()) || !h.is_finite() {
            return Err(Error::Domain(format!("upper boundary h must be finite and positive, got {h}")));
        }
        let mt = T::from_index(m);
        let values = (0..=m)
            .map(|k| match k {
                0 => T::zero(),
                k if k == m => h,
                k => h * T::from_index(k) / mt,
            })
            .collect();
        let cuts = (1..=m)
            .map(|j| h / mt * (T::from_index(j) - T::lit(0.5)))
            .collect();
        Ok(Self { m, values, cuts })
    }

    /// `M`; the grid has `M + 1` states.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn value(&self, k: usize) -> T {
        self.values[k]
    }

    /// `w_1, ..., w_M`.
    pub fn cuts(&self) -> &[T] {
        &self.cuts
    }

    /// Index of `phi(x)`: the number of cut points `w_j <= x`.
    pub fn level_of(&self, x: T) -> usize {
        self.cuts.partition_point(|w| *w <= x)
    }

    /// Index of the smallest grid value `>= s`.
    pub fn first_at_least(&self, s: T) -> usize {
        self.values.partition_point(|v| *v < s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChartConfig<T> {
    h: T,
    variant: Variant<T>,
    grid: Option<Grid<T>>,
    increment: IncrementModel<T>,
}

impl<T: Scalar> ChartConfig<T> {
    /// Non-restarting chart clamped to `[0, h]` and rounded onto `M + 1` states.
    pub fn bounded(h: T, m: usize) -> Result<Self> {
        let grid = Grid::new(h, m)?;
        Ok(Self {
            h,
            variant: Variant::NonRestartingBounded,
            grid: Some(grid),
            increment: IncrementModel::Identity,
        })
    }

    /// Non-restarting chart clamped to `[0, h]` with `phi(x) = x`.
    pub fn bounded_continuous(h: T) -> Result<Self> {
        if !(h > T::zero()) || !h.is_finite() {
            return Err(Error::Config(format!("upper boundary h must be finite and positive, got {h}")));
        }
        Ok(Self {
            h,
            variant: Variant::NonRestartingBounded,
            grid: None,
            increment: IncrementModel::Identity,
        })
    }

    pub fn unbounded() -> Self {
        Self {
            h: T::infinity(),
            variant: Variant::Unbounded,
            grid: None,
            increment: IncrementModel::Identity,
        }
    }

    pub fn restarting(zeta: T) -> Result<Self> {
        if !(zeta > T::zero()) || !zeta.is_finite() {
            return Err(Error::Config(format!("restart threshold must be finite and positive, got {zeta}")));
        }
        Ok(Self {
            h: T::infinity(),
            variant: Variant::Restarting { zeta },
            grid: None,
            increment: IncrementModel::Identity,
        })
    }

    pub fn with_increment(mut self, increment: IncrementModel<T>) -> Result<Self> {
        increment.validate()?;
        self.increment = increment;
        Ok(self)
    }

    pub fn h(&self) -> T {
        self.h
    }

    pub fn variant(&self) -> Variant<T> {
        self.variant
    }

    pub fn grid(&self) -> Option<&Grid<T>> {
        self.grid.as_ref()
    }

    pub fn increment_model(&self) -> &IncrementModel<T> {
        &self.increment
    }

    pub fn initial_state(&self) -> ChartState<T> {
        ChartState {
            value: T::zero(),
            level: self.grid.as_ref().map(|_| 0),
            t: 0,
            signalling: false,
            last_zero: 0,
        }
    }

    /// Applies `phi`. Returns the grid index and grid value.
    pub fn discretize(&self, x: T) -> Result<(usize, T)> {
        let grid = self
            .grid
            .as_ref()
            .ok_or_else(|| Error::Domain("chart has no discretization grid".into()))?;
        if !(x >= T::zero() && x <= self.h) {
            return Err(Error::Domain(format!("{x} lies outside [0, {}]", self.h)));
        }
        let k = grid.level_of(x);
        Ok((k, grid.value(k)))
    }

    /// One step of the recursion with increment `z`.
    pub fn update(&self, state: &ChartState<T>, z: T) -> ChartState<T> {
        let floored = (state.value + z).max(T::zero());
        let t = state.t + 1;
        let (value, level, signalling) = match self.variant {
            Variant::NonRestartingBounded => {
                let clamped = floored.min(self.h);
                match &self.grid {
                    Some(grid) => {
                        let k = grid.level_of(clamped);
                        (grid.value(k), Some(k), false)
                    }
                    None => (clamped, None, false),
                }
            }
            Variant::Unbounded => (floored, None, false),
            Variant::Restarting { zeta } => {
                if floored >= zeta {
                    (T::zero(), None, true)
                } else {
                    (floored, None, false)
                }
            }
        };
        let last_zero = if value == T::zero() { t } else { state.last_zero };
        ChartState {
            value,
            level,
            t,
            signalling,
            last_zero,
        }
    }

    /// Feeds a raw observation through the increment model, then updates.
    pub fn observe(&self, state: &ChartState<T>, x: T) -> Result<ChartState<T>> {
        Ok(self.update(state, self.increment.increment(x)?))
    }
}

/// Free-function form of [`ChartConfig::discretize`], returning the grid value.
pub fn discretize<T: Scalar>(x: T, config: &ChartConfig<T>) -> Result<T> {
    config.discretize(x).map(|(_, v)| v)
}

/// Free-function form of [`ChartConfig::update`].
pub fn update<T: Scalar>(state: &ChartState<T>, z: T, config: &ChartConfig<T>) -> ChartState<T> {
    config.update(state, z)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChartState<T> {
    /// Current chart value `S_t`.
    pub value: T,
    /// Grid index of `value` for discretized charts.
    pub level: Option<usize>,
    pub t: usize,
    /// Set by the restarting chart on the step where it crossed its threshold.
    pub signalling: bool,
    /// Most recent time at which the chart was 0.
    pub last_zero: usize,
}

/// Closed interval of consecutive signalling times.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignalInterval {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Signals {
    /// Non-restarting charts: maximal runs with `S_t >= zeta`.
    Intervals(Vec<SignalInterval>),
    /// Restarting chart: the reset times.
    Events(Vec<usize>),
}

impl Signals {
    /// Last signalling time, if any.
    pub fn last_signal(&self) -> Option<usize> {
        match self {
            Signals::Intervals(iv) => iv.last().map(|i| i.end),
            Signals::Events(ev) => ev.last().copied(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct StandaloneRun<T> {
    /// States at `t = 1..=T`.
    pub path: Vec<ChartState<T>>,
    pub signals: Signals,
}

/// Runs a single chart over `observations` with fixed threshold `zeta`.
pub fn run_standalone<T: Scalar>(
    observations: &[T],
    config: &ChartConfig<T>,
    zeta: T,
) -> Result<StandaloneRun<T>> {
    if observations.is_empty() {
        return Err(Error::Domain("observation sequence is empty".into()));
    }
    if !(zeta > T::zero()) {
        return Err(Error::Config(format!("threshold must be positive, got {zeta}")));
    }
    let mut state = config.initial_state();
    let mut path = Vec::with_capacity(observations.len());
    for &x in observations {
        state = config.observe(&state, x)?;
        path.push(state);
    }
    let signals = match config.variant() {
        Variant::Restarting { .. } => {
            Signals::Events(path.iter().filter(|s| s.signalling).map(|s| s.t).collect())
        }
        _ => Signals::Intervals(threshold_runs(&path, zeta)),
    };
    Ok(StandaloneRun { path, signals })
}

fn threshold_runs<T: Scalar>(path: &[ChartState<T>], zeta: T) -> Vec<SignalInterval> {
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    for s in path {
        match (s.value >= zeta, open) {
            (true, None) => open = Some(s.t),
            (false, Some(start)) => {
                out.push(SignalInterval { start, end: s.t - 1 });
                open = None;
            }
            _ => {}
        }
    }
    if let (Some(start), Some(last)) = (open, path.last()) {
        out.push(SignalInterval { start, end: last.t });
    }
    out
}
