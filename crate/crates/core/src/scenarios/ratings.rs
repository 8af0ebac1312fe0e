//! The 0.5..5.0 rating grid and MovieLens-style ratings ingestion.

use std::io::Read;
use std::path::Path;

use serde::Deserialize;

use super::ScenarioError;
use crate::gateway::RATING_GRID;

/// Snap to the nearest grid value, ties rounding up; out-of-range values clamp
/// to the ends and NaN maps to the lowest rating.
pub fn clamp_rating(x: f64) -> f64 {
    if x.is_nan() {
        return RATING_GRID[0];
    }
    let snapped = (x * 2.0 + 0.5).floor() / 2.0;
    snapped.clamp(RATING_GRID[0], RATING_GRID[9])
}

/// Position of a grid value in [`RATING_GRID`].
pub fn rating_index(r: f64) -> Option<usize> {
    RATING_GRID.iter().position(|g| *g == r)
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct RatingRecord {
    #[serde(rename = "userId")]
    pub user_id: u64,
    #[serde(rename = "movieId")]
    pub movie_id: u64,
    pub rating: f64,
    pub timestamp: i64,
}

/// Parse `userId,movieId,rating,timestamp` CSV with a header row.
pub fn parse_ratings_csv(reader: impl Read) -> Result<Vec<RatingRecord>, ScenarioError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| load_err("<ratings>", e.to_string()))?
        .clone();
    let expected = ["userId", "movieId", "rating", "timestamp"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(load_err(
            "<ratings>",
            format!("expected header {}, got {:?}", expected.join(","), headers),
        ));
    }
    rdr.deserialize()
        .map(|r| r.map_err(|e| load_err("<ratings>", e.to_string())))
        .collect()
}

pub fn load_ratings_csv(path: &Path) -> Result<Vec<RatingRecord>, ScenarioError> {
    let file = std::fs::File::open(path).map_err(|e| load_err(&path.display().to_string(), e.to_string()))?;
    parse_ratings_csv(std::io::BufReader::new(file)).map_err(|e| match e {
        ScenarioError::Load { message, .. } => load_err(&path.display().to_string(), message),
        other => other,
    })
}

fn load_err(path: &str, message: String) -> ScenarioError {
    ScenarioError::Load {
        path: path.to_owned(),
        message,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp_rating(3.4), 3.5);
        assert_eq!(clamp_rating(3.5), 3.5);
        assert_eq!(clamp_rating(3.25), 3.5);
        assert_eq!(clamp_rating(3.2), 3.0);
        assert_eq!(clamp_rating(9.0), 5.0);
        assert_eq!(clamp_rating(0.0), 0.5);
        assert_eq!(clamp_rating(-3.0), 0.5);
        assert_eq!(clamp_rating(f64::NAN), 0.5);
        assert_eq!(clamp_rating(f64::INFINITY), 5.0);
    }

    #[test]
    fn clamp_is_nearest_member() {
        for i in -100..700 {
            let x = f64::from(i) / 100.0;
            let c = clamp_rating(x);
            assert!(rating_index(c).is_some());
            let best = RATING_GRID
                .iter()
                .map(|g| (g - x).abs())
                .fold(f64::INFINITY, f64::min);
            assert!(((c - x).abs() - best).abs() < 1e-9, "x={x} c={c}");
        }
    }

    #[test]
    fn csv_ingestion() {
        let data = "userId,movieId,rating,timestamp\n1,10,4.0,964982703\n1,20,3.5,964981247\n2,10,5.0,964982224\n";
        let recs = parse_ratings_csv(data.as_bytes()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[1].movie_id, 20);
        assert_eq!(recs[1].rating, 3.5);
        assert!(parse_ratings_csv("a,b\n1,2\n".as_bytes()).is_err());
    }
}
