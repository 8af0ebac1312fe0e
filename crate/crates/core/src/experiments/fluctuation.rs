use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::gateway::{BackendKind, RATING_GRID};
use crate::scenarios::{rating_index, RatingAction};
use crate::scheduler::{ActionEvent, Simulation, SimulationConfig};
use crate::text::derive_key;

/// Share of ratings at each grid value, ascending from 0.5 to 5.0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingDistribution {
    pub p: [f64; 10],
    /// Number of ratings behind `p`; 0 when built from shares directly.
    pub total: u64,
}

impl RatingDistribution {
    pub fn new(p: [f64; 10]) -> Result<Self, ExperimentError> {
        if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(ExperimentError::Invalid("shares must be finite and non-negative".into()));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ExperimentError::Invalid(format!("shares sum to {sum}, expected 1")));
        }
        Ok(RatingDistribution { p, total: 0 })
    }

    pub fn from_counts(counts: &[u64; 10]) -> Result<Self, ExperimentError> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(ExperimentError::Invalid("no ratings".into()));
        }
        let mut p = [0.0; 10];
        for (x, c) in p.iter_mut().zip(counts) {
            *x = *c as f64 / total as f64;
        }
        Ok(RatingDistribution { p, total })
    }

    pub fn from_ratings(ratings: &[f64]) -> Result<Self, ExperimentError> {
        let mut counts = [0u64; 10];
        for r in ratings {
            let i = rating_index(*r)
                .ok_or_else(|| ExperimentError::Invalid(format!("{r} is not a grid rating")))?;
            counts[i] += 1;
        }
        Self::from_counts(&counts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationResult {
    pub sample_size: u64,
    pub repeats: usize,
    pub v_sum: f64,
    pub per_rating_v: [f64; 10],
}

/// Population standard deviation of each rating's share across runs, and
/// their sum.
pub fn fluctuation(dists: &[RatingDistribution]) -> Result<FluctuationResult, ExperimentError> {
    if dists.len() < 2 {
        return Err(ExperimentError::Invalid(format!(
            "need at least 2 distributions, got {}",
            dists.len()
        )));
    }
    for d in dists {
        let sum: f64 = d.p.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || d.p.iter().any(|x| *x < 0.0) {
            return Err(ExperimentError::Invalid("distribution is not normalized".into()));
        }
    }
    let n = dists.len() as f64;
    let mut per_rating_v = [0.0; 10];
    for (r, v) in per_rating_v.iter_mut().enumerate() {
        // Shifted by the first value: identical inputs give exactly zero.
        let x0 = dists[0].p[r];
        let mean = dists.iter().map(|d| d.p[r] - x0).sum::<f64>() / n;
        let var = dists.iter().map(|d| (d.p[r] - x0 - mean).powi(2)).sum::<f64>() / n;
        *v = var.sqrt();
    }
    Ok(FluctuationResult {
        sample_size: dists[0].total,
        repeats: dists.len(),
        v_sum: per_rating_v.iter().sum(),
        per_rating_v,
    })
}

/// All ratings in event order, as parsed by the recommender.
pub fn ratings_from_events(events: &[ActionEvent]) -> Vec<f64> {
    events
        .iter()
        .filter_map(|e| e.parsed.get("ratings"))
        .filter_map(|v| serde_json::from_value::<Vec<RatingAction>>(v.clone()).ok())
        .flatten()
        .map(|a| a.rating)
        .collect()
}

const ITEMS_PER_AGENT: usize = 5;

/// For each sample size `n`, run `repeats` independent one-round recommender
/// simulations with enough agents for `n` ratings, keep the first `n`
/// ratings of each, and measure the fluctuation across repeats.
pub fn run_fluctuation_experiment(
    sample_sizes: &[usize],
    repeats: usize,
    backend: &BackendKind,
    seed: u64,
) -> Result<Vec<FluctuationResult>, ExperimentError> {
    if repeats < 2 {
        return Err(ExperimentError::Invalid("repeats must be >= 2".into()));
    }
    if sample_sizes.contains(&0) {
        return Err(ExperimentError::Invalid("sample sizes must be >= 1".into()));
    }
    let built = backend
        .build()
        .map_err(|e| ExperimentError::Invalid(e.to_string()))?;
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get());
    let mut out = Vec::with_capacity(sample_sizes.len());
    for &n in sample_sizes {
        let mut dists = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let mut config = SimulationConfig::new(
                "recommender",
                n.div_ceil(ITEMS_PER_AGENT),
                1,
                derive_key(&[seed, n as u64, r as u64]),
                backend.clone(),
            );
            config.workers = workers;
            config.scenario_params = serde_json::json!({ "items_per_agent": ITEMS_PER_AGENT });
            let mut sim = Simulation::with_backend(config, built.clone())?;
            let round = sim.run_round()?;
            let ratings = ratings_from_events(&round.events);
            if ratings.len() < n {
                return Err(ExperimentError::Invalid(format!(
                    "backend produced {} ratings, needed {n}",
                    ratings.len()
                )));
            }
            dists.push(RatingDistribution::from_ratings(&ratings[..n])?);
        }
        let mut res = fluctuation(&dists)?;
        res.sample_size = n as u64;
        tracing::debug!(n, v_sum = res.v_sum, "fluctuation");
        out.push(res);
    }
    Ok(out)
}

pub fn write_fluctuation_csv(path: &Path, results: &[FluctuationResult]) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sample_size".to_owned(), "repeat_count".to_owned(), "v_sum".to_owned()];
    header.extend(RATING_GRID.iter().map(|r| format!("v_{r:.1}")));
    w.write_record(&header)?;
    for r in results {
        let mut row = vec![r.sample_size.to_string(), r.repeats.to_string(), r.v_sum.to_string()];
        row.extend(r.per_rating_v.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// σ² = (1 / 2N²) Σ_i Σ_j (x_i − x_j)²: no mean is ever formed.
    fn pairwise_sigma(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mut acc = 0.0;
        for a in xs {
            for b in xs {
                acc += (a - b).powi(2);
            }
        }
        (acc / (2.0 * n * n)).sqrt()
    }

    fn dist(first: f64) -> RatingDistribution {
        let mut p = [0.0; 10];
        p[0] = first;
        p[1] = 1.0 - first;
        RatingDistribution::new(p).unwrap()
    }

    #[test]
    fn identical_runs_have_zero_fluctuation() {
        let d = dist(0.3);
        assert_eq!(fluctuation(&vec![d; 10]).unwrap().v_sum, 0.0);
    }

    #[test]
    fn three_runs_by_hand() {
        let res = fluctuation(&[dist(0.5), dist(0.6), dist(0.7)]).unwrap();
        // Mean 0.6; deviations ±0.1 and 0: σ = sqrt(0.02 / 3).
        let expect = (0.02f64 / 3.0).sqrt();
        assert!((res.per_rating_v[0] - expect).abs() < 1e-12);
        assert!((res.per_rating_v[1] - expect).abs() < 1e-12);
        assert!((res.v_sum - 2.0 * expect).abs() < 1e-12);
    }

    #[test]
    fn needs_two_normalized_inputs() {
        assert!(fluctuation(&[dist(0.5)]).is_err());
        let bad = RatingDistribution { p: [0.2; 10], total: 0 };
        assert!(fluctuation(&[bad, bad]).is_err());
        assert!(RatingDistribution::new([0.2; 10]).is_err());
    }

    #[test]
    fn degenerate_backend_has_no_fluctuation() {
        let mut weights = vec![0.0; 10];
        weights[0] = 1.0;
        let backend = BackendKind::MockStochastic {
            seed: 1,
            rating_weights: weights,
            latency: Default::default(),
        };
        let res = run_fluctuation_experiment(&[30, 300], 3, &backend, 4).unwrap();
        assert!(res.iter().all(|r| r.v_sum == 0.0));
        assert_eq!(res[1].sample_size, 300);
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fluctuation.csv");
        let res = fluctuation(&[dist(0.5), dist(0.7)]).unwrap();
        write_fluctuation_csv(&path, &[res]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let header = text.lines().next().unwrap();
        assert_eq!(
            header,
            "sample_size,repeat_count,v_sum,v_0.5,v_1.0,v_1.5,v_2.0,v_2.5,v_3.0,v_3.5,v_4.0,v_4.5,v_5.0"
        );
        assert_eq!(text.lines().count(), 2);
    }

    fn arb_dist() -> impl Strategy<Value = RatingDistribution> {
        proptest::array::uniform10(1u64..1000).prop_map(|c| RatingDistribution::from_counts(&c).unwrap())
    }

    proptest! {
        #[test]
        fn matches_pairwise_oracle(ds in proptest::collection::vec(arb_dist(), 2..12)) {
            let res = fluctuation(&ds).unwrap();
            let mut sum = 0.0;
            for r in 0..10 {
                let xs: Vec<f64> = ds.iter().map(|d| d.p[r]).collect();
                let o = pairwise_sigma(&xs);
                prop_assert!((res.per_rating_v[r] - o).abs() < 1e-12);
                sum += o;
            }
            prop_assert!((res.v_sum - sum).abs() < 1e-12);
        }

        #[test]
        fn invariant_under_permutation(ds in proptest::collection::vec(arb_dist(), 2..8), rot in 0usize..8) {
            let mut shuffled = ds.clone();
            shuffled.rotate_left(rot % ds.len());
            shuffled.reverse();
            let a = fluctuation(&ds).unwrap().v_sum;
            let b = fluctuation(&shuffled).unwrap().v_sum;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
