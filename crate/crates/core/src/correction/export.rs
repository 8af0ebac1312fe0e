use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{CorrectionError, FeedbackSource, RevisionFeedback, ScoreFeedback};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftRecord {
    pub prompt: String,
    pub completion: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardRecord {
    pub prompt: String,
    pub completion: String,
    pub score: f64,
    pub source: FeedbackSource,
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<usize, CorrectionError> {
    if records.is_empty() {
        return Err(CorrectionError::EmptyExport);
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(records.len())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorrectionError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        let rec = serde_json::from_str(&line).map_err(|e| CorrectionError::Dataset {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// `{"prompt": q, "completion": a'}` per line, ordered by event sequence.
pub fn export_sft_dataset(revisions: &[RevisionFeedback], path: &Path) -> Result<usize, CorrectionError> {
    let mut sorted: Vec<&RevisionFeedback> = revisions.iter().collect();
    sorted.sort_by_key(|r| r.event_seq);
    let records: Vec<SftRecord> = sorted
        .into_iter()
        .map(|r| SftRecord {
            prompt: r.q.clone(),
            completion: r.a_prime.clone(),
        })
        .collect();
    write_jsonl(path, &records)
}

/// `{"prompt": q, "completion": a, "score": s, "source": ..}` per line,
/// ordered by event sequence.
pub fn export_reward_dataset(scores: &[ScoreFeedback], path: &Path) -> Result<usize, CorrectionError> {
    let mut sorted: Vec<&ScoreFeedback> = scores.iter().collect();
    sorted.sort_by_key(|s| s.event_seq);
    let records: Vec<RewardRecord> = sorted
        .into_iter()
        .map(|s| RewardRecord {
            prompt: s.q.clone(),
            completion: s.a.clone(),
            score: s.s,
            source: s.source,
        })
        .collect();
    write_jsonl(path, &records)
}

pub fn read_sft_dataset(path: &Path) -> Result<Vec<SftRecord>, CorrectionError> {
    read_jsonl(path)
}

pub fn read_reward_dataset(path: &Path) -> Result<Vec<RewardRecord>, CorrectionError> {
    read_jsonl(path)
}
