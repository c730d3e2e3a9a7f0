//! Pointwise-in-time FDR monitoring of many streams.
//!
//! At each time `t` every chart is advanced, its value is turned into a
//! p-value through the tail of the exact in-control law of `S_t*`, and a
//! step-up procedure picks the streams to flag. Null laws depend only on `t`
//! and on the stream's chart/model, so they are computed once up to the
//! horizon and shared between streams with identical settings.

use std::collections::HashSet;

use crate::chart::{ChartConfig, ChartState, Variant};
use crate::error::{Error, Result};
use crate::fdr::{PValueSet, Procedure};
use crate::nulldist::{build_transition, null_sequence, InControlModel, NullDistribution};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSpec<T> {
    pub id: String,
    pub chart: ChartConfig<T>,
    pub model: InControlModel<T>,
}

impl<T: Scalar> StreamSpec<T> {
    pub fn new(id: impl Into<String>, chart: ChartConfig<T>, model: InControlModel<T>) -> Self {
        Self {
            id: id.into(),
            chart,
            model,
        }
    }

    /// `count` streams named `0..count` sharing one chart and model.
    pub fn homogeneous(count: usize, chart: &ChartConfig<T>, model: &InControlModel<T>) -> Vec<Self> {
        (0..count)
            .map(|i| Self::new(i.to_string(), chart.clone(), *model))
            .collect()
    }

    fn same_null(&self, other: &Self) -> bool {
        self.chart.h() == other.chart.h()
            && self.chart.grid().map(|g| g.m()) == other.chart.grid().map(|g| g.m())
            && self.model == other.model
    }
}

/// One stream's contribution to a monitoring step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamRecord<T> {
    /// Index into the monitor's stream list.
    pub stream: usize,
    pub chart_value: T,
    pub p_value: T,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorDecision<T> {
    pub t: usize,
    /// Streams that reported at `t`, in stream order.
    pub records: Vec<StreamRecord<T>>,
    pub procedure: Procedure<T>,
    pub q_star: T,
    pub level_used: T,
}

impl<T: Scalar> MonitorDecision<T> {
    pub fn rejected(&self) -> impl Iterator<Item = usize> + '_ {
        self.records.iter().filter(|r| r.rejected).map(|r| r.stream)
    }

    pub fn rejection_count(&self) -> usize {
        self.records.iter().filter(|r| r.rejected).count()
    }
}

#[derive(Debug, Clone)]
pub struct Monitor<T> {
    specs: Vec<StreamSpec<T>>,
    /// Null laws for `t = 0..=horizon`, one sequence per distinct stream setting.
    tables: Vec<Vec<NullDistribution<T>>>,
    table_of: Vec<usize>,
    horizon: usize,
}

impl<T: Scalar> Monitor<T> {
    pub fn new(specs: Vec<StreamSpec<T>>, horizon: usize) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &specs {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Config(format!("duplicate stream id '{}'", s.id)));
            }
            if s.chart.variant() != Variant::NonRestartingBounded || s.chart.grid().is_none() {
                return Err(Error::Config(format!(
                    "stream '{}' must use a discretized non-restarting bounded chart",
                    s.id
                )));
            }
        }
        let mut reps: Vec<usize> = Vec::new();
        let mut tables = Vec::new();
        let mut table_of = Vec::with_capacity(specs.len());
        for (i, s) in specs.iter().enumerate() {
            match reps.iter().position(|&r| specs[r].same_null(s)) {
                Some(j) => table_of.push(j),
                None => {
                    let kernel = build_transition(&s.chart, &s.model)?;
                    tables.push(null_sequence(&kernel, horizon));
                    reps.push(i);
                    table_of.push(tables.len() - 1);
                }
            }
        }
        Ok(Self {
            specs,
            tables,
            table_of,
            horizon,
        })
    }

    pub fn specs(&self) -> &[StreamSpec<T>] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Number of distinct null sequences held.
    pub fn distinct_nulls(&self) -> usize {
        self.tables.len()
    }

    pub fn null_for(&self, stream: usize, t: usize) -> &NullDistribution<T> {
        &self.tables[self.table_of[stream]][t]
    }

    pub fn initial_states(&self) -> Vec<ChartState<T>> {
        self.specs.iter().map(|s| s.chart.initial_state()).collect()
    }

    /// Advances every reporting stream and tests all of them at time `t`.
    ///
    /// A stream with no observation keeps its chart and sits out the test,
    /// so `N` shrinks for this step. Each chart's p-value uses the null law
    /// after as many updates as that chart has actually received.
    pub fn step(
        &self,
        states: &[ChartState<T>],
        observations: &[Option<T>],
        t: usize,
        procedure: &Procedure<T>,
        q_star: T,
    ) -> Result<(Vec<ChartState<T>>, MonitorDecision<T>)> {
        if states.len() != self.len() || observations.len() != self.len() {
            return Err(Error::Integrity(format!(
                "{} streams but {} states and {} observations",
                self.len(),
                states.len(),
                observations.len()
            )));
        }
        if t > self.horizon {
            return Err(Error::Integrity(format!(
                "time {t} is past the precomputed horizon {}",
                self.horizon
            )));
        }
        let mut next = states.to_vec();
        let mut records = Vec::with_capacity(self.len());
        for (i, obs) in observations.iter().enumerate() {
            let Some(x) = obs else { continue };
            let s = self.specs[i].chart.observe(&states[i], *x)?;
            let level = s.level.expect("monitored charts are discretized");
            let p = *self.null_for(i, s.t).tail_at_level(level);
            next[i] = s;
            records.push(StreamRecord {
                stream: i,
                chart_value: s.value,
                p_value: p,
                rejected: false,
            });
        }
        let level_used = if records.is_empty() {
            q_star
        } else {
            let pv = PValueSet::new(records.iter().map(|r| r.p_value).collect())?;
            let rs = procedure.apply(&pv, q_star)?;
            for j in rs.rejected {
                records[j].rejected = true;
            }
            rs.level_used
        };
        Ok((
            next,
            MonitorDecision {
                t,
                records,
                procedure: *procedure,
                q_star,
                level_used,
            },
        ))
    }

    /// Runs `t = 1..=T` over a rectangular `N x T` matrix.
    pub fn run(
        &self,
        observations: &[Vec<T>],
        procedure: &Procedure<T>,
        q_star: T,
    ) -> Result<Vec<MonitorDecision<T>>> {
        let horizon = self.check_shape(observations.iter().map(Vec::len))?;
        self.run_with(horizon, |i, t| Some(observations[i][t - 1]), procedure, q_star)
    }

    /// As [`Self::run`] but with possibly missing observations.
    pub fn run_sparse(
        &self,
        observations: &[Vec<Option<T>>],
        procedure: &Procedure<T>,
        q_star: T,
    ) -> Result<Vec<MonitorDecision<T>>> {
        let horizon = self.check_shape(observations.iter().map(Vec::len))?;
        self.run_with(horizon, |i, t| observations[i][t - 1], procedure, q_star)
    }

    fn check_shape(&self, mut lens: impl ExactSizeIterator<Item = usize>) -> Result<usize> {
        if lens.len() != self.len() {
            return Err(Error::Integrity(format!(
                "{} observation rows for {} streams",
                lens.len(),
                self.len()
            )));
        }
        let Some(first) = lens.next() else { return Ok(0) };
        if lens.any(|l| l != first) {
            return Err(Error::Integrity("observation matrix is not rectangular".into()));
        }
        Ok(first)
    }

    fn run_with(
        &self,
        horizon: usize,
        obs: impl Fn(usize, usize) -> Option<T>,
        procedure: &Procedure<T>,
        q_star: T,
    ) -> Result<Vec<MonitorDecision<T>>> {
        let mut states = self.initial_states();
        let mut out = Vec::with_capacity(horizon);
        let mut column = vec![None; self.len()];
        for t in 1..=horizon {
            for (i, slot) in column.iter_mut().enumerate() {
                *slot = obs(i, t);
            }
            let (next, decision) = self.step(&states, &column, t, procedure, q_star)?;
            states = next;
            out.push(decision);
        }
        Ok(out)
    }
}

/// Maximal runs of consecutive rejections of `stream`, as closed intervals.
pub fn signal_periods<T: Scalar>(decisions: &[MonitorDecision<T>], stream: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for d in decisions {
        let hit = d.records.iter().any(|r| r.stream == stream && r.rejected);
        open = match (hit, open) {
            (true, None) => Some((d.t, d.t)),
            (true, Some((s, e))) if e + 1 == d.t => Some((s, d.t)),
            (true, Some(iv)) => {
                out.push(iv);
                Some((d.t, d.t))
            }
            (false, Some(iv)) => {
                out.push(iv);
                None
            }
            (false, None) => None,
        };
    }
    out.extend(open);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdr::bh;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn homogeneous(n: usize, horizon: usize) -> Monitor<f64> {
        let chart = ChartConfig::bounded(10.0, 99).unwrap();
        let model = InControlModel::mean_shift(1.0);
        Monitor::new(StreamSpec::homogeneous(n, &chart, &model), horizon).unwrap()
    }

    fn noisy(n: usize, t: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(-0.5, 1.0).unwrap();
        (0..n)
            .map(|i| {
                let shift = if i % 7 == 0 { 1.0 } else { 0.0 };
                (0..t).map(|_| base.sample(&mut rng) + shift).collect()
            })
            .collect()
    }

    #[test]
    fn charts_at_zero_reject_nothing() {
        let m = homogeneous(100, 20);
        let obs = vec![vec![-10.0; 20]; 100];
        for d in m.run(&obs, &Procedure::Bh, 0.05).unwrap() {
            assert!(d.records.iter().all(|r| r.p_value == 1.0 && !r.rejected));
        }
    }

    #[test]
    fn empty_horizon() {
        let m = homogeneous(3, 10);
        let obs: Vec<Vec<f64>> = vec![vec![]; 3];
        assert!(m.run(&obs, &Procedure::Bh, 0.05).unwrap().is_empty());
    }

    #[test]
    fn single_saturated_chart() {
        let t = 60;
        let m = homogeneous(100, t);
        let mut obs = vec![vec![-10.0; t]; 100];
        obs[42] = vec![10.0; t];
        let ds = m.run(&obs, &Procedure::Bh, 0.05).unwrap();
        for d in &ds {
            let top = *m.null_for(42, d.t).tail_at_level(99);
            let expect = top <= 0.05 / 100.0;
            assert_eq!(d.rejected().collect::<Vec<_>>(), if expect { vec![42] } else { vec![] });
        }
        // the top state is hard to reach at small t, easy later
        assert_eq!(ds[0].rejection_count(), 1);
        assert_eq!(ds[t - 1].rejection_count(), 1);
    }

    #[test]
    fn decisions_match_direct_bh_on_logged_pvalues() {
        let (n, t) = (100, 50);
        let m = homogeneous(n, t);
        let ds = m.run(&noisy(n, t, 3), &Procedure::Bh, 0.05).unwrap();
        let d = &ds[t - 1];
        assert_eq!(d.t, 50);
        let p = PValueSet::new(d.records.iter().map(|r| r.p_value).collect()).unwrap();
        let mut expect = bh(&p, 0.05).unwrap().rejected;
        expect.sort_unstable();
        assert_eq!(d.rejected().collect::<Vec<_>>(), expect);
        assert!(d.rejection_count() > 0);
    }

    #[test]
    fn rejected_pvalues_respect_the_step_up_cut() {
        let (n, t) = (60, 40);
        let m = homogeneous(n, t);
        for proc in Procedure::all() {
            for d in m.run(&noisy(n, t, 9), &proc, 0.05).unwrap() {
                let k = d.rejection_count();
                let cut = k as f64 / n as f64 * d.level_used;
                let max_rej = d.records.iter().filter(|r| r.rejected).map(|r| r.p_value).fold(0.0, f64::max);
                for r in &d.records {
                    if r.rejected {
                        assert!(r.p_value <= cut);
                    } else {
                        assert!(k == 0 || r.p_value > max_rej);
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic_and_order_invariant() {
        let (n, t) = (30, 40);
        let m = homogeneous(n, t);
        let obs = noisy(n, t, 11);
        let a = m.run(&obs, &Procedure::TwoStep, 0.05).unwrap();
        let b = m.run(&obs, &Procedure::TwoStep, 0.05).unwrap();
        assert_eq!(a, b);

        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| obs[i].clone()).collect();
        let c = m.run(&shuffled, &Procedure::TwoStep, 0.05).unwrap();
        for (da, dc) in a.iter().zip(&c) {
            let mut ra: Vec<usize> = da.rejected().collect();
            let mut rc: Vec<usize> = dc.rejected().map(|j| perm[j]).collect();
            ra.sort_unstable();
            rc.sort_unstable();
            assert_eq!(ra, rc);
        }
    }

    #[test]
    fn heterogeneous_streams_use_their_own_null() {
        let a = ChartConfig::bounded(10.0, 99).unwrap();
        let b = ChartConfig::bounded(6.0, 29).unwrap();
        let model = InControlModel::mean_shift(1.0);
        let shifted = InControlModel::mean_shift(2.0);
        let specs = vec![
            StreamSpec::new("a1", a.clone(), model),
            StreamSpec::new("b1", b.clone(), model),
            StreamSpec::new("a2", a.clone(), model),
            StreamSpec::new("a3", a.clone(), shifted),
        ];
        let m = Monitor::new(specs, 10).unwrap();
        assert_eq!(m.distinct_nulls(), 3);
        assert_eq!(m.null_for(0, 7), m.null_for(2, 7));
        assert_ne!(m.null_for(0, 7), m.null_for(1, 7));
        assert_ne!(m.null_for(0, 7), m.null_for(3, 7));
    }

    #[test]
    fn shared_null_equals_per_stream_null() {
        let (n, t) = (20, 30);
        let obs = noisy(n, t, 4);
        let shared = homogeneous(n, t);
        // distinct ids and a model that compares unequal only by representation
        let chart = ChartConfig::bounded(10.0, 99).unwrap();
        let per_stream: Vec<Monitor<f64>> = (0..n)
            .map(|_| {
                Monitor::new(
                    vec![StreamSpec::new("s", chart.clone(), InControlModel::mean_shift(1.0))],
                    t,
                )
                .unwrap()
            })
            .collect();
        let ds = shared.run(&obs, &Procedure::Bh, 0.05).unwrap();
        for (i, m) in per_stream.iter().enumerate() {
            let single = m.run(&[obs[i].clone()], &Procedure::Bh, 0.05).unwrap();
            for (d, s) in ds.iter().zip(&single) {
                assert_eq!(d.records[i].p_value, s.records[0].p_value);
            }
        }
    }

    #[test]
    fn missing_observations_shrink_the_test_set() {
        let m = homogeneous(4, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs: Vec<Vec<Option<f64>>> = (0..4)
            .map(|i| (0..10).map(|t| if i == 2 && t % 3 == 0 { None } else { Some(rng.random::<f64>()) }).collect())
            .collect();
        let ds = m.run_sparse(&obs, &Procedure::Bh, 0.05).unwrap();
        assert_eq!(ds[0].records.len(), 3);
        assert_eq!(ds[1].records.len(), 4);
        // stream 2 missed t = 1, 4, 7, 10 so has seen 6 updates by the end
        let states = {
            let mut s = m.initial_states();
            for t in 1..=10 {
                let col: Vec<Option<f64>> = obs.iter().map(|r| r[t - 1]).collect();
                s = m.step(&s, &col, t, &Procedure::Bh, 0.05).unwrap().0;
            }
            s
        };
        assert_eq!(states[2].t, 6);
        assert_eq!(states[0].t, 10);
    }

    #[test]
    fn rejects_bad_configs() {
        let chart = ChartConfig::bounded(10.0, 9).unwrap();
        let model = InControlModel::mean_shift(1.0);
        let dup = vec![StreamSpec::new("x", chart.clone(), model), StreamSpec::new("x", chart, model)];
        assert!(matches!(Monitor::new(dup, 5), Err(Error::Config(_))));
        let cont = vec![StreamSpec::new("x", ChartConfig::bounded_continuous(10.0).unwrap(), model)];
        assert!(Monitor::new(cont, 5).is_err());

        let m = homogeneous(2, 3);
        assert!(matches!(m.run(&[vec![0.0; 4], vec![0.0; 4]], &Procedure::Bh, 0.05), Err(Error::Integrity(_))));
        assert!(m.run(&[vec![0.0; 3], vec![0.0; 2]], &Procedure::Bh, 0.05).is_err());
        assert!(m.run(&[vec![0.0; 3]], &Procedure::Bh, 0.05).is_err());
    }

    #[test]
    fn signal_periods_are_maximal_runs() {
        let m = homogeneous(2, 12);
        let mut obs = vec![vec![-10.0; 12]; 2];
        for t in 0..4 {
            obs[1][t] = 10.0;
        }
        for t in 7..12 {
            obs[1][t] = 10.0;
        }
        let ds = m.run(&obs, &Procedure::Bh, 0.05).unwrap();
        let periods = signal_periods(&ds, 1);
        assert_eq!(periods.first().map(|p| p.0), Some(1));
        assert!(periods.len() >= 2);
        assert!(signal_periods(&ds, 0).is_empty());
    }
}
