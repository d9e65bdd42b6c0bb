//! Model-based search loop: random initial design, then repeated
//! fit / acquire-by-LCB / evaluate / record until the budget runs out.
//!
//! All metrics are minimized.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluate::{Evaluator, TrialRecord, TrialStatus};
use crate::space::{encode_indices, Configuration, EncodedPoint, ParamSpace, SpaceError};
use crate::surrogate::{ForestParams, Prediction, SurrogateError, SurrogateModel};

/// Rejection-sampling attempts before falling back to enumeration.
const MAX_REJECTIONS: usize = 1000;
/// Largest space the exhaustion fallback is willing to enumerate.
const ENUMERATION_FALLBACK_CAP: u128 = 1 << 22;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionSettings {
    pub kappa: f64,
    pub n_initial_random: usize,
    pub n_candidates_per_ask: usize,
}

impl Default for AcquisitionSettings {
    fn default() -> Self {
        Self {
            kappa: 1.96,
            n_initial_random: 10,
            n_candidates_per_ask: 512,
        }
    }
}

impl AcquisitionSettings {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(format!("kappa must be finite and >= 0, got {}", self.kappa));
        }
        if self.n_initial_random == 0 {
            return Err("n_initial_random must be >= 1".into());
        }
        if self.n_candidates_per_ask == 0 {
            return Err("n_candidates_per_ask must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchBudget {
    pub max_evals: Option<usize>,
    pub wall_clock_limit: Option<Duration>,
}

impl SearchBudget {
    pub fn evals(n: usize) -> Self {
        Self {
            max_evals: Some(n),
            wall_clock_limit: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match (self.max_evals, self.wall_clock_limit) {
            (None, None) => Err("a search budget needs max_evals or a wall-clock limit".into()),
            (Some(0), _) => Err("max_evals must be >= 1".into()),
            _ => Ok(()),
        }
    }
}

/// Lower confidence bound `mean - kappa * std`.
pub fn lcb(p: &Prediction, kappa: f64) -> f64 {
    p.mean - kappa * p.std
}

/// Index of the prediction with the smallest LCB; the earliest wins ties.
pub fn select_by_lcb(predictions: &[Prediction], kappa: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in predictions.iter().enumerate() {
        let score = lcb(p, kappa);
        if best.is_none_or(|(_, b)| score < b) {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AskError {
    #[error("every configuration of the space has been evaluated")]
    Exhausted,
    #[error("could not draw an unevaluated configuration")]
    SamplingFailed,
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TellError {
    #[error("configuration {0} was already told")]
    Duplicate(Configuration),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEvals,
    WallClock,
    SpaceExhausted,
}

impl StopReason {
    pub fn describe(self) -> &'static str {
        match self {
            StopReason::MaxEvals => "evaluation budget reached",
            StopReason::WallClock => "wall-clock limit reached",
            StopReason::SpaceExhausted => "search space exhausted",
        }
    }
}

/// Search state: what has been evaluated, the ordered history, the random
/// stream and the current surrogate.
#[derive(Debug, Clone)]
pub struct Search {
    space: ParamSpace,
    acq: AcquisitionSettings,
    forest: ForestParams,
    rng: ChaCha8Rng,
    evaluated: HashMap<Vec<usize>, Option<f64>>,
    history: Vec<TrialRecord>,
    training: Vec<(EncodedPoint, f64)>,
    model: Option<SurrogateModel>,
    model_stale: bool,
}

impl Search {
    pub fn new(
        space: ParamSpace,
        acq: AcquisitionSettings,
        forest: ForestParams,
        seed: u64,
    ) -> Self {
        Self {
            space,
            acq,
            forest,
            rng: ChaCha8Rng::seed_from_u64(seed),
            evaluated: HashMap::new(),
            history: Vec::new(),
            training: Vec::new(),
            model: None,
            model_stale: true,
        }
    }

    pub fn space(&self) -> &ParamSpace {
        &self.space
    }

    pub fn history(&self) -> &[TrialRecord] {
        &self.history
    }

    pub fn n_evaluated(&self) -> usize {
        self.evaluated.len()
    }

    pub fn training_size(&self) -> usize {
        self.training.len()
    }

    pub fn model(&self) -> Option<&SurrogateModel> {
        self.model.as_ref()
    }

    pub fn is_evaluated(&self, c: &Configuration) -> bool {
        self.space
            .indices(c)
            .is_ok_and(|idx| self.evaluated.contains_key(&idx))
    }

    fn exhausted(&self) -> bool {
        self.evaluated.len() as u128 >= self.space.cardinality()
    }

    /// Proposes the next configuration to evaluate.
    pub fn ask(&mut self) -> Result<Configuration, AskError> {
        if self.exhausted() {
            return Err(AskError::Exhausted);
        }
        if self.evaluated.len() < self.acq.n_initial_random || self.training.is_empty() {
            return self.random_unevaluated();
        }
        if self.model_stale || self.model.is_none() {
            self.model = Some(SurrogateModel::fit(&self.training, &self.forest)?);
            self.model_stale = false;
        }
        let model = self.model.as_ref().expect("fitted above");

        let mut candidates = Vec::with_capacity(self.acq.n_candidates_per_ask);
        for _ in 0..self.acq.n_candidates_per_ask {
            let idx = self.space.sample_indices(&mut self.rng);
            if !self.evaluated.contains_key(&idx) {
                candidates.push(idx);
            }
        }
        if candidates.is_empty() {
            return self.random_unevaluated();
        }
        let predictions = candidates
            .iter()
            .map(|idx| model.predict(&encode_indices(idx)))
            .collect::<Result<Vec<_>, _>>()?;
        let pick = select_by_lcb(&predictions, self.acq.kappa).expect("non-empty slate");
        Ok(self.space.from_indices(&candidates[pick]))
    }

    fn random_unevaluated(&mut self) -> Result<Configuration, AskError> {
        for _ in 0..MAX_REJECTIONS {
            let idx = self.space.sample_indices(&mut self.rng);
            if !self.evaluated.contains_key(&idx) {
                return Ok(self.space.from_indices(&idx));
            }
        }
        if self.space.cardinality() > ENUMERATION_FALLBACK_CAP {
            return Err(AskError::SamplingFailed);
        }
        let remaining: Vec<Configuration> = self
            .space
            .enumerate(ENUMERATION_FALLBACK_CAP)
            .expect("cardinality checked")
            .filter(|c| !self.is_evaluated(c))
            .collect();
        if remaining.is_empty() {
            return Err(AskError::Exhausted);
        }
        use rand::Rng;
        let i = self.rng.random_range(0..remaining.len());
        Ok(remaining[i].clone())
    }

    /// Records the outcome for `c`. Failed trials are never proposed again
    /// but do not enter the surrogate's training set.
    pub fn tell(&mut self, c: &Configuration, record: TrialRecord) -> Result<(), TellError> {
        let idx = self.space.indices(c)?;
        if self.evaluated.contains_key(&idx) {
            return Err(TellError::Duplicate(c.clone()));
        }
        let value = record.ok_value();
        self.evaluated.insert(idx.clone(), value);
        if let Some(v) = value {
            self.training.push((encode_indices(&idx), v));
            self.model_stale = true;
        }
        self.history.push(record);
        Ok(())
    }

    /// Running minimum over successful trials, one entry per success.
    pub fn best_trace(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.history
            .iter()
            .filter_map(TrialRecord::ok_value)
            .map(|v| {
                best = best.min(v);
                best
            })
            .collect()
    }

    /// Lowest successful value and its configuration; earliest on ties.
    pub fn best(&self) -> Option<(&Configuration, f64)> {
        let mut best: Option<(&Configuration, f64)> = None;
        for r in &self.history {
            if let Some(v) = r.ok_value() {
                if best.is_none_or(|(_, b)| v < b) {
                    best = Some((&r.configuration, v));
                }
            }
        }
        best
    }
}

/// Runs ask, evaluate, tell serially until the budget or the space runs
/// out. `on_record` sees every record, in order, before it is told.
///
/// An evaluator hard fault is recorded as a failed trial, passed to
/// `on_record`, and then returned as the error.
pub fn run_search<E, F>(
    search: &mut Search,
    budget: &SearchBudget,
    evaluator: &mut E,
    mut on_record: F,
) -> anyhow::Result<StopReason>
where
    E: Evaluator + ?Sized,
    F: FnMut(&TrialRecord) -> anyhow::Result<()>,
{
    budget.validate().map_err(anyhow::Error::msg)?;
    let start = Instant::now();
    loop {
        if budget
            .max_evals
            .is_some_and(|n| search.history.len() >= n)
        {
            return Ok(StopReason::MaxEvals);
        }
        if budget
            .wall_clock_limit
            .is_some_and(|limit| start.elapsed() >= limit)
        {
            return Ok(StopReason::WallClock);
        }
        let c = match search.ask() {
            Ok(c) => c,
            Err(AskError::Exhausted) => return Ok(StopReason::SpaceExhausted),
            Err(e) => return Err(e.into()),
        };
        let trial_index = search.history.len();
        let (mut record, fault) = match evaluator.evaluate(trial_index, &c) {
            Ok(r) => (r, None),
            Err(e) => (
                TrialRecord::failed(
                    c.clone(),
                    evaluator.metric(),
                    TrialStatus::RunFailed,
                    format!("evaluator fault: {e:#}"),
                ),
                Some(e),
            ),
        };
        record.trial_index = trial_index;
        record.configuration = c.clone();
        record.finished_s = start.elapsed().as_secs_f64();
        on_record(&record)?;
        search.tell(&c, record)?;
        if let Some(e) = fault {
            return Err(e.context(format!("trial {trial_index} aborted the search")));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::{simulated_minimizer, MetricKind, SimulatedEvaluator};
    use crate::space::Parameter;

    fn space_5x3x2() -> ParamSpace {
        ParamSpace::new(
            vec![
                Parameter::ordinal("a", ["1", "2", "3", "4", "5"], "1").unwrap(),
                Parameter::ordinal("b", ["x", "y", "z"], "x").unwrap(),
                Parameter::categorical("c", ["on", "off"], "on").unwrap(),
            ],
            0,
        )
        .unwrap()
    }

    fn ok(c: &Configuration, v: f64) -> TrialRecord {
        TrialRecord::ok(c.clone(), MetricKind::RuntimeS, v)
    }

    fn pred(mean: f64, std: f64) -> Prediction {
        Prediction { mean, std }
    }

    #[test]
    fn lcb_examples() {
        assert_eq!(lcb(&pred(5.0, 0.0), 3.0), 5.0);
        assert!((lcb(&pred(2.0, 1.0), 1.96) - 0.04).abs() < 1e-12);
        for p in [pred(1.0, 2.0), pred(-3.0, 0.5)] {
            assert_eq!(lcb(&p, 0.0), p.mean);
        }
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_by_lcb(&[pred(1.0, 0.0), pred(2.0, 0.0)], 0.0), Some(0));
        assert_eq!(select_by_lcb(&[pred(1.0, 0.0), pred(2.0, 1.0)], 1.96), Some(1));
        assert_eq!(select_by_lcb(&[pred(1.0, 0.0), pred(1.0, 0.0)], 1.0), Some(0));
        assert_eq!(select_by_lcb(&[], 1.0), None);
    }

    #[test]
    fn first_ask_is_first_seeded_sample() {
        let space = space_5x3x2();
        let mut s = Search::new(space.clone(), Default::default(), Default::default(), 77);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        assert_eq!(s.ask().unwrap(), space.sample(&mut rng));
    }

    #[test]
    fn duplicate_tell_rejected() {
        let space = space_5x3x2();
        let mut s = Search::new(space.clone(), Default::default(), Default::default(), 1);
        let c = space.default_configuration();
        s.tell(&c, ok(&c, 1.0)).unwrap();
        assert!(matches!(s.tell(&c, ok(&c, 2.0)), Err(TellError::Duplicate(_))));
    }

    #[test]
    fn failures_do_not_train() {
        let space = space_5x3x2();
        let mut s = Search::new(space.clone(), Default::default(), Default::default(), 1);
        let c = space.default_configuration();
        let failed = TrialRecord::failed(c.clone(), MetricKind::RuntimeS, TrialStatus::Timeout, "t");
        s.tell(&c, failed).unwrap();
        assert_eq!(s.training_size(), 0);
        assert_eq!(s.n_evaluated(), 1);
        assert!(s.is_evaluated(&c));
    }

    #[test]
    fn best_trace_is_running_minimum() {
        let space = space_5x3x2();
        let mut s = Search::new(space.clone(), Default::default(), Default::default(), 1);
        let all: Vec<_> = space.enumerate(30).unwrap().collect();
        for (c, v) in all.iter().zip([5.0, 3.0, 4.0]) {
            s.tell(c, ok(c, v)).unwrap();
        }
        assert_eq!(s.best_trace(), [5.0, 3.0, 3.0]);
        assert_eq!(s.best().unwrap().1, 3.0);
    }

    #[test]
    fn exhausts_small_space_without_repeats() {
        let space = space_5x3x2();
        let mut s = Search::new(
            space.clone(),
            AcquisitionSettings {
                n_initial_random: 3,
                ..Default::default()
            },
            ForestParams::default(),
            5,
        );
        let mut ev = SimulatedEvaluator::new(space.clone(), MetricKind::RuntimeS);
        let stop = run_search(&mut s, &SearchBudget::evals(100), &mut ev, |_| Ok(())).unwrap();
        assert_eq!(stop, StopReason::SpaceExhausted);
        assert_eq!(s.history().len(), 30);
        assert_eq!(s.best().unwrap().0, &simulated_minimizer(&space));
        assert_eq!(s.ask(), Err(AskError::Exhausted));
    }

    #[test]
    fn one_eval_budget() {
        let space = space_5x3x2();
        let mut s = Search::new(space.clone(), Default::default(), Default::default(), 5);
        let mut ev = SimulatedEvaluator::new(space, MetricKind::RuntimeS);
        let stop = run_search(&mut s, &SearchBudget::evals(1), &mut ev, |_| Ok(())).unwrap();
        assert_eq!(stop, StopReason::MaxEvals);
        assert_eq!(s.history().len(), 1);
    }

    #[test]
    fn wall_clock_budget_stops() {
        let space = space_5x3x2();
        let mut s = Search::new(space.clone(), Default::default(), Default::default(), 5);
        let mut ev = SimulatedEvaluator::new(space, MetricKind::RuntimeS);
        let budget = SearchBudget {
            max_evals: None,
            wall_clock_limit: Some(Duration::ZERO),
        };
        let stop = run_search(&mut s, &budget, &mut ev, |_| Ok(())).unwrap();
        assert_eq!(stop, StopReason::WallClock);
        assert!(s.history().is_empty());
        assert!(SearchBudget {
            max_evals: None,
            wall_clock_limit: None
        }
        .validate()
        .is_err());
    }

    struct Faulty;

    impl Evaluator for Faulty {
        fn metric(&self) -> MetricKind {
            MetricKind::RuntimeS
        }

        fn evaluate(&mut self, _: usize, _: &Configuration) -> anyhow::Result<TrialRecord> {
            anyhow::bail!("node lost")
        }
    }

    #[test]
    fn hard_fault_recorded_then_propagated() {
        let space = space_5x3x2();
        let mut s = Search::new(space, Default::default(), Default::default(), 5);
        let mut seen = Vec::new();
        let err = run_search(&mut s, &SearchBudget::evals(5), &mut Faulty, |r| {
            seen.push(r.status);
            Ok(())
        })
        .unwrap_err();
        assert!(format!("{err:#}").contains("node lost"));
        assert_eq!(seen, [TrialStatus::RunFailed]);
        assert_eq!(s.history().len(), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use std::collections::HashSet;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn never_reproposes_and_trace_monotone(seed in any::<u64>(), fail_mod in 2usize..5) {
                let space = space_5x3x2();
                let acq = AcquisitionSettings { n_initial_random: 4, n_candidates_per_ask: 32, ..Default::default() };
                let forest = ForestParams { n_trees: 5, ..Default::default() };
                let mut s = Search::new(space.clone(), acq, forest, seed);
                let mut seen = HashSet::new();
                for i in 0..25 {
                    let c = s.ask().unwrap();
                    prop_assert!(seen.insert(c.clone()));
                    let rec = if i % fail_mod == 0 {
                        TrialRecord::failed(c.clone(), MetricKind::RuntimeS, TrialStatus::RunFailed, "x")
                    } else {
                        ok(&c, crate::evaluate::simulated_objective(&space, &c))
                    };
                    s.tell(&c, rec).unwrap();
                }
                let trace = s.best_trace();
                prop_assert!(trace.windows(2).all(|w| w[1] <= w[0]));
            }

            #[test]
            fn lcb_argmin_shift_invariant(
                slate in proptest::collection::vec((0.0f64..10.0, 0.0f64..3.0), 1..30),
                shift in 0.0f64..100.0,
                kappa in 0.0f64..5.0,
            ) {
                // Use exactly representable values so shifting does not reorder ties.
                let q = |v: f64| (v * 8.0).round() / 8.0;
                let base: Vec<_> = slate.iter().map(|&(m, s)| pred(q(m), q(s))).collect();
                let shifted: Vec<_> = base.iter().map(|p| pred(p.mean + q(shift), p.std)).collect();
                let k = q(kappa);
                prop_assert_eq!(select_by_lcb(&base, k), select_by_lcb(&shifted, k));
            }
        }
    }
}
