use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::judge::{judge_score, Judge};
use crate::lanes::parallel_map;
use crate::scheduler::ActionEvent;
use crate::text::derive_key;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundScore {
    pub round: u64,
    /// Mean judge score over the judged events; NaN when none was judged.
    pub mean: f64,
    pub judged: usize,
    /// Judge calls that failed or returned no usable score.
    pub failed: usize,
}

/// Pick up to `m` of `n` positions without replacement, seeded by
/// `(seed, round)`, in ascending order.
pub fn sample_round(n: usize, m: usize, seed: u64, round: u64) -> Vec<usize> {
    if m >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_key(&[seed, round, 0xe7a1]));
    let mut picked = rand::seq::index::sample(&mut rng, n, m).into_vec();
    picked.sort_unstable();
    picked
}

/// Judge up to `m` sampled events per round and report the mean score of
/// each round, in round order. Failed calls (events with `error`) are not
/// actions and are left out.
pub fn evaluate_rounds(events: &[ActionEvent], judge: &Judge, m: usize, seed: u64) -> Vec<RoundScore> {
    let mut by_round: BTreeMap<u64, Vec<&ActionEvent>> = BTreeMap::new();
    for e in events.iter().filter(|e| e.error.is_none()) {
        by_round.entry(e.round).or_default().push(e);
    }
    let lanes = judge
        .backend
        .concurrency()
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(4, |n| n.get()));
    by_round
        .into_iter()
        .map(|(round, evs)| {
            let picked: Vec<&ActionEvent> = sample_round(evs.len(), m, seed, round)
                .into_iter()
                .map(|i| evs[i])
                .collect();
            let scores = parallel_map(&picked, lanes, |_, e| judge_score(e, judge).ok().map(|f| f.s));
            let ok: Vec<f64> = scores.iter().flatten().copied().collect();
            RoundScore {
                round,
                mean: if ok.is_empty() {
                    f64::NAN
                } else {
                    ok.iter().sum::<f64>() / ok.len() as f64
                },
                judged: ok.len(),
                failed: scores.len() - ok.len(),
            }
        })
        .collect()
}
