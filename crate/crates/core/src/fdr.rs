//! Step-up multiple testing: Benjamini–Hochberg and two adaptive variants
//! that estimate the number of true nulls first and rerun BH at a raised level.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// p-values for `N` hypotheses; hypothesis `i` is stream id `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PValueSet<T> {
    values: Vec<T>,
}

impl<T: Scalar> PValueSet<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("p-value set is empty".into()));
        }
        if let Some((i, p)) = values
            .iter()
            .enumerate()
            .find(|(_, p)| !(**p >= T::zero() && **p <= T::one()))
        {
            return Err(Error::Domain(format!("p-value {i} = {p} is outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Ids ordered by p-value, ties by id.
    fn order(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.values.len()).collect();
        ids.sort_by(|&a, &b| {
            self.values[a]
                .partial_cmp(&self.values[b])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectionSet<T> {
    /// Rejected ids in ascending p-value order.
    pub rejected: Vec<usize>,
    /// Step-up cut index; equals `rejected.len()`.
    pub k: usize,
    /// Level of the final BH pass.
    pub level_used: T,
}

impl<T: Scalar> RejectionSet<T> {
    fn none(level: T) -> Self {
        Self {
            rejected: Vec::new(),
            k: 0,
            level_used: level,
        }
    }

    pub fn contains(&self, id: usize) -> bool {
        self.rejected.contains(&id)
    }

    /// Rejection flag per id.
    pub fn mask(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &i in &self.rejected {
            m[i] = true;
        }
        m
    }
}

fn check_level<T: Scalar>(q: T) -> Result<()> {
    if q > T::zero() && q < T::one() {
        Ok(())
    } else {
        Err(Error::Config(format!("FDR level must lie in (0, 1), got {q}")))
    }
}

/// Benjamini–Hochberg: reject the `k` smallest p-values, `k` the largest `i`
/// with `P_(i) <= (i / N) q`.
pub fn bh<T: Scalar>(p: &PValueSet<T>, q: T) -> Result<RejectionSet<T>> {
    check_level(q)?;
    let n = p.len();
    let nt = T::from_index(n);
    let order = p.order();
    let k = (1..=n)
        .rev()
        .find(|&i| p.values[order[i - 1]] <= T::from_index(i) / nt * q)
        .unwrap_or(0);
    let mut rejected = order;
    rejected.truncate(k);
    Ok(RejectionSet {
        rejected,
        k,
        level_used: q,
    })
}

/// Two-stage step-up: BH at `q / (1 + q)` estimates `m0 = N - r1`, then BH
/// again at `q / (1 + q) * N / m0` (capped below 1).
pub fn two_step<T: Scalar>(p: &PValueSet<T>, q: T) -> Result<RejectionSet<T>> {
    check_level(q)?;
    let n = p.len();
    let q1 = q / (T::one() + q);
    let first = bh(p, q1)?;
    match first.k {
        0 => Ok(RejectionSet::none(q1)),
        r1 if r1 == n => Ok(first),
        r1 => {
            let m0 = n - r1;
            bh(p, capped(q1 * T::from_index(n) / T::from_index(m0)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum M0Estimator<T> {
    /// Known number of true nulls.
    Oracle(usize),
    /// `N - r1` where `r1` is the BH rejection count at `q / (1 + q)`.
    TwoStepStage1 { q: T },
    /// `min(N, ceil((N + 1 - #{p <= lambda}) / (1 - lambda)))`.
    PlugIn { lambda: T },
}

impl<T: Scalar> M0Estimator<T> {
    pub fn default_plug_in() -> Self {
        M0Estimator::PlugIn { lambda: T::lit(0.5) }
    }
}

/// Estimated number of true nulls, always in `[1, N]`.
pub fn estimate_m0<T: Scalar>(p: &PValueSet<T>, est: &M0Estimator<T>) -> Result<usize> {
    let n = p.len();
    let m0 = match *est {
        M0Estimator::Oracle(m0) => m0,
        M0Estimator::TwoStepStage1 { q } => {
            check_level(q)?;
            n - bh(p, q / (T::one() + q))?.k
        }
        M0Estimator::PlugIn { lambda } => {
            if !(lambda > T::zero() && lambda < T::one()) {
                return Err(Error::Config(format!("plug-in lambda must lie in (0, 1), got {lambda}")));
            }
            let below = p.values.iter().filter(|&&x| x <= lambda).count();
            let raw = (T::from_index(n + 1 - below) / (T::one() - lambda)).ceil();
            raw.to_usize().unwrap_or(n).min(n)
        }
    };
    Ok(m0.clamp(1, n))
}

/// BH at `q * N / m0_hat`, the level capped just below 1.
pub fn adaptive_step_up<T: Scalar>(
    p: &PValueSet<T>,
    q: T,
    est: &M0Estimator<T>,
) -> Result<RejectionSet<T>> {
    check_level(q)?;
    let m0 = estimate_m0(p, est)?;
    bh(p, capped(q * T::from_index(p.len()) / T::from_index(m0)))
}

fn capped<T: Scalar>(level: T) -> T {
    level.min(T::one() - T::epsilon())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Procedure<T> {
    Bh,
    TwoStep,
    Adaptive(M0Estimator<T>),
}

impl<T: Scalar> Procedure<T> {
    /// Adaptive step-up with the plug-in estimator at `lambda = 0.5`.
    pub fn adaptive() -> Self {
        Procedure::Adaptive(M0Estimator::default_plug_in())
    }

    /// BH, two-step, adaptive.
    pub fn all() -> Vec<Self> {
        vec![Procedure::Bh, Procedure::TwoStep, Procedure::adaptive()]
    }

    pub fn apply(&self, p: &PValueSet<T>, q: T) -> Result<RejectionSet<T>> {
        match self {
            Procedure::Bh => bh(p, q),
            Procedure::TwoStep => two_step(p, q),
            Procedure::Adaptive(est) => adaptive_step_up(p, q, est),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Procedure::Bh => "bh",
            Procedure::TwoStep => "two-step",
            Procedure::Adaptive(_) => "adaptive",
        }
    }
}

impl<T: Scalar> fmt::Display for Procedure<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl<T: Scalar> FromStr for Procedure<T> {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "bh" => Ok(Procedure::Bh),
            "two-step" => Ok(Procedure::TwoStep),
            "adaptive" => Ok(Procedure::adaptive()),
            other => Err(Error::Config(format!(
                "unknown procedure '{other}' (expected bh, two-step or adaptive)"
            ))),
        }
    }
}
