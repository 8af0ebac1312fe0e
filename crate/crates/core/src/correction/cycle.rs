use std::sync::Arc;

use super::evaluate::{sample_round, RoundScore};
use super::judge::{judge_revise, judge_score, Judge, JudgeMode};
use super::{CorrectionError, FeedbackStore, RevisionAdapter, DEFAULT_SIMILARITY_THRESHOLD};
use crate::gateway::ChatBackend;
use crate::lanes::parallel_map;
use crate::scheduler::{ActionEvent, Simulation};

/// Judge a sample of each round, ask for revisions of the low scorers, and
/// feed the accumulated revisions back through a [`RevisionAdapter`].
pub struct CorrectionLoop {
    scorer: Judge,
    reviser: Judge,
    /// Events judged per round; `usize::MAX` judges all of them.
    pub sample_per_round: usize,
    /// Events scoring strictly below this are sent for revision.
    pub revise_below: f64,
    pub similarity_threshold: f64,
    pub seed: u64,
    store: FeedbackStore,
}

impl CorrectionLoop {
    pub fn new(scorer: Judge, reviser: Judge) -> Result<Self, CorrectionError> {
        if scorer.mode != JudgeMode::Score {
            return Err(CorrectionError::WrongMode {
                expected: JudgeMode::Score,
            });
        }
        if reviser.mode != JudgeMode::Revise {
            return Err(CorrectionError::WrongMode {
                expected: JudgeMode::Revise,
            });
        }
        Ok(CorrectionLoop {
            scorer,
            reviser,
            sample_per_round: usize::MAX,
            revise_below: 10.0,
            similarity_threshold: DEFAULT_SIMILARITY_THRESHOLD,
            seed: 0,
            store: FeedbackStore::new(),
        })
    }

    pub fn feedback(&self) -> &FeedbackStore {
        &self.store
    }

    /// Score one round's events and collect revisions for those below
    /// `revise_below`. Judge or reviser failures are counted, not fatal.
    pub fn review(&self, round: u64, events: &[ActionEvent]) -> RoundScore {
        let actions: Vec<&ActionEvent> = events
            .iter()
            .filter(|e| e.round == round && e.error.is_none())
            .collect();
        let picked: Vec<&ActionEvent> = sample_round(actions.len(), self.sample_per_round, self.seed, round)
            .into_iter()
            .map(|i| actions[i])
            .collect();
        let lanes = lanes_for(self.scorer.backend.as_ref());
        let scored = parallel_map(&picked, lanes, |_, e| judge_score(e, &self.scorer));

        let mut total = 0.0;
        let mut judged = 0;
        let mut low = Vec::new();
        for (e, s) in picked.iter().zip(scored) {
            let Ok(s) = s else { continue };
            total += s.s;
            judged += 1;
            if s.s < self.revise_below {
                low.push(*e);
            }
            // Scores come from a validated constructor, so adding cannot fail.
            let _ = self.store.add_score(s);
        }
        let lanes = lanes_for(self.reviser.backend.as_ref());
        for r in parallel_map(&low, lanes, |_, e| judge_revise(e, &self.reviser))
            .into_iter()
            .flatten()
        {
            let _ = self.store.add_revision(r);
        }
        RoundScore {
            round,
            mean: if judged == 0 { f64::NAN } else { total / judged as f64 },
            judged,
            failed: picked.len() - judged,
        }
    }

    /// `inner` answered by the revisions collected so far.
    pub fn adapter(&self, inner: Arc<dyn ChatBackend>) -> RevisionAdapter {
        RevisionAdapter::with_threshold(inner, &self.store.revisions(), self.similarity_threshold)
    }
}

fn lanes_for(backend: &dyn ChatBackend) -> usize {
    backend
        .concurrency()
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(4, |n| n.get()))
}

/// Mean judge score of one round before and after correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Improvement {
    pub before: RoundScore,
    pub after: RoundScore,
}

impl Improvement {
    pub fn delta(&self) -> f64 {
        self.after.mean - self.before.mean
    }
}

/// Run the next round with `base`, review it, then rewind and run the same
/// round again with the adapted backend. `sim` ends after the replay.
pub fn replay_with_feedback(
    sim: &mut Simulation,
    base: Arc<dyn ChatBackend>,
    cycle: &CorrectionLoop,
) -> Result<Improvement, CorrectionError> {
    let snapshot = sim.snapshot();
    sim.set_backend(base.clone());
    let round = sim.round();
    let first = sim.run_round()?;
    let before = cycle.review(round, &first.events);

    let mut replay = Simulation::from_snapshot(snapshot, Arc::new(cycle.adapter(base)))?;
    let second = replay.run_round()?;
    let after = score_only(cycle, round, &second.events);
    *sim = replay;
    Ok(Improvement { before, after })
}

/// Run `rounds` rounds, reviewing each one. With `adapt` the backend is
/// rebuilt before every round from all revisions so far; without it the
/// rounds are only measured.
pub fn run_with_feedback(
    sim: &mut Simulation,
    base: Arc<dyn ChatBackend>,
    cycle: &CorrectionLoop,
    rounds: u64,
    adapt: bool,
) -> Result<Vec<RoundScore>, CorrectionError> {
    let mut scores = Vec::with_capacity(rounds as usize);
    for _ in 0..rounds {
        let backend: Arc<dyn ChatBackend> = if adapt {
            Arc::new(cycle.adapter(base.clone()))
        } else {
            base.clone()
        };
        sim.set_backend(backend);
        let round = sim.round();
        let out = sim.run_round()?;
        scores.push(if adapt {
            cycle.review(round, &out.events)
        } else {
            score_only(cycle, round, &out.events)
        });
    }
    Ok(scores)
}

fn score_only(cycle: &CorrectionLoop, round: u64, events: &[ActionEvent]) -> RoundScore {
    super::evaluate_rounds(
        &events.iter().filter(|e| e.round == round).cloned().collect::<Vec<_>>(),
        &cycle.scorer,
        cycle.sample_per_round,
        cycle.seed,
    )
    .pop()
    .unwrap_or(RoundScore {
        round,
        mean: f64::NAN,
        judged: 0,
        failed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correction::{NoisyJobBackend, OracleJudge, OracleReviser};
    use crate::gateway::BackendKind;
    use crate::SimulationConfig;

    fn cycle() -> CorrectionLoop {
        CorrectionLoop::new(
            Judge::new(Arc::new(OracleJudge::job_market()), JudgeMode::Score),
            Judge::new(Arc::new(OracleReviser), JudgeMode::Revise),
        )
        .unwrap()
    }

    fn sim(n: usize) -> Simulation {
        let mut c = SimulationConfig::new("job_market", n, 10, 5, BackendKind::MockDeterministic {
            seed: 1,
            latency: Default::default(),
        });
        c.workers = 8;
        c.scenario_params = serde_json::json!({"capacity": 1});
        Simulation::new(c).unwrap()
    }

    #[test]
    fn modes_are_checked() {
        let j = Judge::new(Arc::new(OracleReviser), JudgeMode::Revise);
        assert!(CorrectionLoop::new(j.clone(), j).is_err());
    }

    #[test]
    fn replay_fixes_the_revised_prompts() {
        let c = cycle();
        let mut s = sim(200);
        let imp = replay_with_feedback(&mut s, Arc::new(NoisyJobBackend::new(3, 0.5)), &c).unwrap();
        assert_eq!(s.round(), 1);
        assert!(imp.before.mean > 3.0 && imp.before.mean < 7.0, "{imp:?}");
        // Every invalid answer was revised, and the replay sees the same prompts.
        assert_eq!(imp.after.mean, 10.0);
        let (scores, revisions) = c.feedback().len();
        assert_eq!(scores, 200);
        assert_eq!(revisions as f64, (200.0 * (10.0 - imp.before.mean) / 10.0).round());
    }

    #[test]
    fn unadapted_rounds_only_measure() {
        let c = cycle();
        let mut s = sim(50);
        let scores = run_with_feedback(&mut s, Arc::new(NoisyJobBackend::new(3, 0.5)), &c, 2, false).unwrap();
        assert_eq!(scores.len(), 2);
        assert!(c.feedback().is_empty());
    }
}
