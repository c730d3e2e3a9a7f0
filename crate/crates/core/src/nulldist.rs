//! Exact in-control law of a discretized chart.
//!
//! With `phi` rounding onto `M + 1` states the in-control chart is a
//! time-homogeneous Markov chain. Its one-step kernel is read off the
//! increment CDF at the cut points, and the law of `S_t*` is the point mass at
//! 0 pushed through the kernel `t` times.

use crate::chart::ChartConfig;
use crate::error::{Error, Result};
use crate::exact::Dyadic;
use crate::scalar::{Probability, Scalar};

use num_traits::{One, Zero};

/// In-control distribution of the chart increment `Z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InControlModel<T> {
    Gaussian { mean: T, sd: T },
    /// Degenerate increment, always equal to `at`.
    PointMass { at: T },
}

impl<T: Scalar> InControlModel<T> {
    /// `N(-delta/2, 1)`: the in-control increment of the classic mean-shift chart.
    pub fn mean_shift(delta: T) -> Self {
        InControlModel::Gaussian {
            mean: -delta / T::lit(2.0),
            sd: T::one(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            InControlModel::Gaussian { mean, sd } if !(sd > T::zero()) || !mean.is_finite() => {
                Err(Error::Model(format!("invalid gaussian N({mean}, {sd}^2)")))
            }
            _ => Ok(()),
        }
    }

    /// `P(Z <= x)`.
    pub fn cdf(&self, x: T) -> T {
        match *self {
            InControlModel::Gaussian { mean, sd } => gaussian_upper(-(x - mean) / sd),
            InControlModel::PointMass { at } => indicator(x >= at),
        }
    }

    /// `P(Z < x)`. Equal to [`Self::cdf`] for continuous models.
    pub fn below(&self, x: T) -> T {
        match *self {
            InControlModel::Gaussian { .. } => self.cdf(x),
            InControlModel::PointMass { at } => indicator(x > at),
        }
    }

    /// `P(Z >= x)`, computed directly so upper tails keep their precision.
    pub fn at_or_above(&self, x: T) -> T {
        match *self {
            InControlModel::Gaussian { mean, sd } => gaussian_upper((x - mean) / sd),
            InControlModel::PointMass { at } => indicator(x <= at),
        }
    }

    fn centre(&self) -> T {
        match *self {
            InControlModel::Gaussian { mean, .. } => mean,
            InControlModel::PointMass { at } => at,
        }
    }

    /// `P(a <= Z < b)` for `a < b`, taken from whichever tail is smaller.
    fn mass_between(&self, a: T, b: T) -> T {
        if a >= self.centre() {
            self.at_or_above(a) - self.at_or_above(b)
        } else {
            self.below(b) - self.below(a)
        }
    }
}

/// `P(N(0,1) >= u)`.
fn gaussian_upper<T: Scalar>(u: T) -> T {
    let u = u.to_f64().unwrap_or(f64::NAN);
    T::lit(0.5 * libm::erfc(u / std::f64::consts::SQRT_2))
}

fn indicator<T: Scalar>(b: bool) -> T {
    if b {
        T::one()
    } else {
        T::zero()
    }
}

/// Row-stochastic kernel over the chart grid: `entry(i, k)` is the one-step
/// probability of moving from grid value `v_i` to `v_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix<T, P = T> {
    grid: Vec<T>,
    entries: Vec<P>,
}

impl<T: Scalar, P: Probability> TransitionMatrix<T, P> {
    pub fn states(&self) -> usize {
        self.grid.len()
    }

    pub fn grid(&self) -> &[T] {
        &self.grid
    }

    pub fn entry(&self, i: usize, k: usize) -> &P {
        &self.entries[i * self.grid.len() + k]
    }

    pub fn row(&self, i: usize) -> &[P] {
        let n = self.grid.len();
        &self.entries[i * n..(i + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[P]> {
        self.entries.chunks(self.grid.len())
    }

    pub fn map<Q: Probability>(&self, f: impl Fn(&P) -> Q) -> TransitionMatrix<T, Q> {
        TransitionMatrix {
            grid: self.grid.clone(),
            entries: self.entries.iter().map(f).collect(),
        }
    }

    /// One step: `dist * P`.
    pub fn propagate(&self, dist: &[P]) -> Vec<P> {
        let n = self.grid.len();
        let mut next = vec![P::zero(); n];
        for (i, mass) in dist.iter().enumerate() {
            if mass.is_zero() {
                continue;
            }
            for (slot, p) in next.iter_mut().zip(self.row(i)) {
                if !p.is_zero() {
                    *slot = slot.clone() + mass.clone() * p.clone();
                }
            }
        }
        next
    }

    /// First adjacent row pair `(i, i + 1)` and prefix `k` where the row from
    /// the higher state fails to dominate: `cum_{i+1}(k) > cum_i(k) + tol`.
    pub fn monotonicity_violation(&self, tol: &P) -> Option<(usize, usize)> {
        let n = self.grid.len();
        for i in 0..n.saturating_sub(1) {
            let (mut lo, mut hi) = (P::zero(), P::zero());
            for k in 0..n {
                lo = lo + self.entry(i, k).clone();
                hi = hi + self.entry(i + 1, k).clone();
                if hi > lo.clone() + tol.clone() {
                    return Some((i, k));
                }
            }
        }
        None
    }
}

impl<T: Scalar> TransitionMatrix<T, T> {
    /// Largest `|row sum - 1|`.
    pub fn max_row_deviation(&self) -> T {
        self.rows()
            .map(|r| (r.iter().fold(T::zero(), |a, &b| a + b) - T::one()).abs())
            .fold(T::zero(), T::max)
    }
}

impl TransitionMatrix<f64, f64> {
    /// The kernel in exact arithmetic. Entries are lifted exactly, except that
    /// the largest entry of each row absorbs the row's rounding residual so
    /// that every row sums to exactly 1.
    pub fn to_exact(&self) -> TransitionMatrix<f64, Dyadic> {
        let n = self.states();
        let mut entries = Vec::with_capacity(n * n);
        for row in self.rows() {
            let mut lifted: Vec<Dyadic> = row
                .iter()
                .map(|&p| Dyadic::from_f64(p).expect("kernel entries are finite"))
                .collect();
            let big = (0..n).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            let rest = lifted
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != big)
                .fold(Dyadic::zero(), |a, (_, p)| a + p.clone());
            lifted[big] = Dyadic::one() - rest;
            entries.extend(lifted);
        }
        TransitionMatrix {
            grid: self.grid.clone(),
            entries,
        }
    }
}

/// Builds the in-control kernel of a discretized bounded chart.
pub fn build_transition<T: Scalar>(
    config: &ChartConfig<T>,
    model: &InControlModel<T>,
) -> Result<TransitionMatrix<T>> {
    model.validate()?;
    let grid = config
        .grid()
        .ok_or_else(|| Error::Config("null distribution needs a discretized chart".into()))?;
    let n = grid.len();
    let cuts = grid.cuts();
    let mut entries = Vec::with_capacity(n * n);
    for (i, &v) in grid.values().iter().enumerate() {
        entries.push(model.below(cuts[0] - v));
        for k in 1..n - 1 {
            entries.push(model.mass_between(cuts[k - 1] - v, cuts[k] - v));
        }
        entries.push(model.at_or_above(cuts[n - 2] - v));
        for (k, p) in entries[i * n..].iter().enumerate() {
            if !(*p >= T::zero() && *p <= T::one()) {
                return Err(Error::Model(format!(
                    "transition {i}->{k} has probability {p}; the increment CDF is not monotone"
                )));
            }
        }
    }
    Ok(TransitionMatrix {
        grid: grid.values().to_vec(),
        entries,
    })
}

/// Law of `S_t*` on the grid together with its tail `P(v_k) = Prob(S_t* >= v_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NullDistribution<T, P = T> {
    t: usize,
    grid: Vec<T>,
    probs: Vec<P>,
    tail: Vec<P>,
}

impl<T: Scalar, P: Probability> NullDistribution<T, P> {
    pub fn new(t: usize, grid: Vec<T>, probs: Vec<P>) -> Result<Self> {
        if grid.len() != probs.len() || grid.is_empty() {
            return Err(Error::Integrity(format!(
                "{} grid values but {} probabilities",
                grid.len(),
                probs.len()
            )));
        }
        let mut tail = probs.clone();
        for k in (0..tail.len() - 1).rev() {
            tail[k] = tail[k].clone() + tail[k + 1].clone();
        }
        // the chart is non-negative
        tail[0] = P::one();
        Ok(Self { t, grid, probs, tail })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn grid(&self) -> &[T] {
        &self.grid
    }

    pub fn probs(&self) -> &[P] {
        &self.probs
    }

    /// `P(v_k)` for every grid index `k`.
    pub fn tail_values(&self) -> &[P] {
        &self.tail
    }

    pub fn tail_at_level(&self, k: usize) -> &P {
        &self.tail[k]
    }

    /// `Prob(S_t* >= s)` for `s` in `[0, h]`.
    pub fn tail(&self, s: T) -> Result<P> {
        let h = *self.grid.last().expect("grid is non-empty");
        if !(s >= T::zero() && s <= h) {
            return Err(Error::Domain(format!("{s} lies outside [0, {h}]")));
        }
        let k = self.grid.partition_point(|v| *v < s);
        Ok(self.tail[k].clone())
    }

    /// `Prob(S_t* <= v_k)` accumulated upwards from 0.
    pub fn cdf_values(&self) -> Vec<P> {
        let mut acc = P::zero();
        self.probs
            .iter()
            .map(|p| {
                acc = acc.clone() + p.clone();
                acc.clone()
            })
            .collect()
    }

    pub fn total_mass(&self) -> P {
        self.probs.iter().cloned().fold(P::zero(), |a, b| a + b)
    }

    /// Enumerates `Prob(P_t <= x)` at every atom `x = P(v_k)` of the p-value.
    pub fn superuniformity(&self) -> Vec<AtomCheck<P>> {
        (0..self.tail.len())
            .map(|k| {
                let x = &self.tail[k];
                let mass = self
                    .tail
                    .iter()
                    .zip(&self.probs)
                    .filter(|(tv, _)| *tv <= x)
                    .fold(P::zero(), |a, (_, p)| a + p.clone());
                let distinct = self.tail.iter().filter(|tv| *tv == x).count() == 1;
                AtomCheck {
                    level: k,
                    atom: x.clone(),
                    mass,
                    distinct,
                }
            })
            .collect()
    }
}

/// `Prob(P_t <= atom)` for one atom of the discrete p-value.
#[derive(Debug, Clone)]
pub struct AtomCheck<P> {
    pub level: usize,
    pub atom: P,
    pub mass: P,
    /// No other grid state shares this tail value.
    pub distinct: bool,
}

impl<P: Probability> AtomCheck<P> {
    pub fn holds(&self) -> bool {
        self.mass <= self.atom
    }

    pub fn is_equality(&self) -> bool {
        self.mass == self.atom
    }
}

/// Law of `S_t*`, by `t` successive vector-matrix products from the point mass at 0.
pub fn distribution_at<T: Scalar, P: Probability>(
    kernel: &TransitionMatrix<T, P>,
    t: usize,
) -> NullDistribution<T, P> {
    let mut dist = point_mass(kernel.states());
    for _ in 0..t {
        dist = kernel.propagate(&dist);
    }
    NullDistribution::new(t, kernel.grid.clone(), dist).expect("kernel and grid agree")
}

/// `S_0*, S_1*, ..., S_horizon*` in one sweep.
pub fn null_sequence<T: Scalar, P: Probability>(
    kernel: &TransitionMatrix<T, P>,
    horizon: usize,
) -> Vec<NullDistribution<T, P>> {
    let mut out = Vec::with_capacity(horizon + 1);
    let mut dist = point_mass(kernel.states());
    for t in 0..=horizon {
        if t > 0 {
            dist = kernel.propagate(&dist);
        }
        out.push(NullDistribution::new(t, kernel.grid.clone(), dist.clone()).expect("kernel and grid agree"));
    }
    out
}

/// Free-function form of [`NullDistribution::tail`].
pub fn tail<T: Scalar, P: Probability>(d: &NullDistribution<T, P>, s: T) -> Result<P> {
    d.tail(s)
}

fn point_mass<P: Probability>(n: usize) -> Vec<P> {
    let mut v = vec![P::zero(); n];
    v[0] = P::one();
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::{One, Zero};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn kernel(h: f64, m: usize, delta: f64) -> TransitionMatrix<f64> {
        let c = ChartConfig::bounded(h, m).unwrap();
        build_transition(&c, &InControlModel::mean_shift(delta)).unwrap()
    }

    fn to_rational(d: &Dyadic) -> BigRational {
        let m = BigRational::from_integer(d.mantissa().clone());
        let e = d.exponent();
        let pow = BigRational::from_integer(BigInt::one() << e.unsigned_abs() as usize);
        if e >= 0 { m * pow } else { m / pow }
    }

    #[test]
    fn single_cut_kernel() {
        let p = kernel(1.0, 1, 1.0);
        // Phi(w_1 + 1/2) with w_1 = 0.5
        assert_abs_diff_eq!(*p.entry(0, 0), 0.841_344_746_068_542_9, epsilon = 1e-15);
        // from v_1 = 1 the chart drops below w_1 iff Z < -1/2
        assert_abs_diff_eq!(*p.entry(1, 0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn single_cut_kernel_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let z = Normal::new(-0.5, 1.0).unwrap();
        let n = 400_000;
        let hits = (0..n).filter(|_| (0.0f64 + z.sample(&mut rng)).max(0.0).min(1.0) < 0.5).count();
        let p = hits as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((p - 0.841_344_746).abs() < 4.0 * se, "mc {p}");
    }

    #[test]
    fn rows_sum_to_one() {
        for (h, m) in [(10.0, 1), (10.0, 4), (10.0, 9), (10.0, 99), (3.0, 250)] {
            let p = kernel(h, m, 1.0);
            assert!(p.max_row_deviation() < 1e-12, "h={h} m={m}");
            assert!(p.rows().flatten().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn point_mass_below_floor() {
        let c = ChartConfig::bounded(10.0, 9).unwrap();
        let p = build_transition(&c, &InControlModel::PointMass { at: -10.0 }).unwrap();
        for i in 0..p.states() {
            assert_eq!(*p.entry(i, 0), 1.0);
            assert!(p.row(i)[1..].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = ChartConfig::bounded(10.0, 9).unwrap();
        let bad = InControlModel::Gaussian { mean: 0.0, sd: -1.0 };
        assert!(matches!(build_transition(&c, &bad), Err(Error::Model(_))));
        let c = ChartConfig::bounded_continuous(10.0).unwrap();
        assert!(matches!(
            build_transition(&c, &InControlModel::mean_shift(1.0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn early_times() {
        let p = kernel(10.0, 9, 1.0);
        let d0 = distribution_at(&p, 0);
        assert_eq!(d0.probs()[0], 1.0);
        assert!(d0.probs()[1..].iter().all(|&x| x == 0.0));
        assert_eq!(d0.tail(p.grid()[1]).unwrap(), 0.0);
        let d1 = distribution_at(&p, 1);
        assert_eq!(d1.probs(), p.row(0));
        for t in [0, 1, 5, 60] {
            assert_eq!(distribution_at(&p, t).tail(0.0).unwrap(), 1.0);
        }
    }

    #[test]
    fn tail_domain_and_shape() {
        let p = kernel(10.0, 9, 1.0);
        let d = distribution_at(&p, 20);
        assert!(d.tail(-0.1).is_err());
        assert!(d.tail(10.5).is_err());
        assert!(d.tail_values().windows(2).all(|w| w[0] >= w[1]));
        assert_abs_diff_eq!(d.total_mass(), 1.0, epsilon = 1e-10);
        // between grid points the tail is that of the next grid value up
        assert_eq!(d.tail(0.5).unwrap(), *d.tail_at_level(1));
        assert_eq!(d.tail(10.0).unwrap(), *d.tail_at_level(9));
    }

    #[test]
    fn sequence_matches_direct_propagation() {
        let p = kernel(10.0, 19, 1.0);
        let seq = null_sequence(&p, 30);
        for t in [0, 1, 7, 30] {
            assert_eq!(seq[t], distribution_at(&p, t));
        }
    }

    #[test]
    fn rows_stay_stochastic_at_long_horizons() {
        let p = kernel(10.0, 99, 1.0);
        let seq = null_sequence(&p, 100);
        for d in &seq {
            assert!((d.total_mass() - 1.0).abs() < 1e-9, "t={}", d.t());
        }
    }

    #[test]
    fn tail_at_top_matches_monte_carlo() {
        let (h, m, t) = (10.0, 9, 20);
        let c = ChartConfig::bounded(h, m).unwrap();
        let d = distribution_at(&build_transition(&c, &InControlModel::mean_shift(1.0)).unwrap(), t);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Normal::new(-0.5, 1.0).unwrap();
        let n = 200_000;
        let mut top = 0usize;
        let mut counts = vec![0usize; m + 1];
        for _ in 0..n {
            let mut s = c.initial_state();
            for _ in 0..t {
                s = c.update(&s, z.sample(&mut rng));
            }
            counts[s.level.unwrap()] += 1;
            top += usize::from(s.level == Some(m));
        }
        let p = *d.tail_at_level(m);
        let phat = top as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((phat - p).abs() <= 3.0 * se, "exact {p} mc {phat}");
        let mut acc = 0usize;
        for (k, cdf) in d.cdf_values().iter().enumerate() {
            acc += counts[k];
            assert!((acc as f64 / n as f64 - cdf).abs() < 0.005);
        }
    }

    #[test]
    fn kernel_is_stochastically_monotone() {
        for m in [1, 4, 9, 99] {
            let p = kernel(10.0, m, 1.0);
            assert_eq!(p.monotonicity_violation(&1e-15), None, "m={m}");
        }
    }

    #[test]
    fn exact_propagation_agrees_with_rationals_and_floats() {
        let p = kernel(10.0, 4, 1.0);
        let exact = p.to_exact();
        let rational = exact.map(to_rational);
        for t in [0, 1, 3, 8] {
            let de = distribution_at(&exact, t);
            let dr = distribution_at(&rational, t);
            let df = distribution_at(&p, t);
            for k in 0..p.states() {
                assert_eq!(to_rational(&de.probs()[k]), dr.probs()[k]);
                assert!((de.probs()[k].to_f64() - df.probs()[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn exact_kernel_rows_sum_to_exactly_one() {
        let p = kernel(10.0, 9, 1.0);
        let exact = p.to_exact();
        for (i, row) in exact.rows().enumerate() {
            let s = row.iter().cloned().fold(Dyadic::zero(), |a, b| a + b);
            assert_eq!(s, Dyadic::one());
            for (k, e) in row.iter().enumerate() {
                assert!(e.sign() != num_bigint::Sign::Minus);
                assert!((e.to_f64() - p.entry(i, k)).abs() < 1e-15);
            }
        }
        assert_eq!(distribution_at(&exact, 40).total_mass(), Dyadic::one());
    }

    #[test]
    fn exact_superuniformity_small_grid() {
        let exact = kernel(10.0, 9, 1.0).to_exact();
        for t in 0..=30 {
            for atom in distribution_at(&exact, t).superuniformity() {
                assert!(atom.holds());
                assert!(atom.is_equality());
            }
        }
    }

    #[test]
    fn ties_in_tail_are_detected() {
        // a zero-probability state duplicates the tail value below it
        let d = NullDistribution::new(3, vec![0.0, 1.0, 2.0], vec![0.5, 0.0, 0.5]).unwrap();
        let checks = d.superuniformity();
        assert!(!checks[1].distinct && !checks[2].distinct);
        assert!(checks.iter().all(|c| c.holds()));
        assert_eq!(checks[0].mass, 1.0);
        let z: Dyadic = Zero::zero();
        assert!(z.is_zero());
    }

    #[test]
    fn single_precision_kernel() {
        let c = ChartConfig::<f32>::bounded(10.0, 9).unwrap();
        let p = build_transition(&c, &InControlModel::mean_shift(1.0)).unwrap();
        assert!(p.max_row_deviation() < 1e-5);
        let d = distribution_at(&p, 20);
        let d64 = distribution_at(&kernel(10.0, 9, 1.0), 20);
        for k in 0..p.states() {
            assert!((d.probs()[k] as f64 - d64.probs()[k]).abs() < 1e-5);
        }
    }
}
