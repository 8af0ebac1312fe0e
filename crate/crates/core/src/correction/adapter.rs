use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use super::RevisionFeedback;
use crate::gateway::{ChatBackend, ChatRequest, ChatResponse, GatewayError};
use crate::text::{estimate_tokens, TokenSignature};

pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.8;

struct Entry {
    seq: u64,
    signature: TokenSignature,
    answer: String,
}

/// Stands in for a fine-tuned model: answers prompts that closely resemble a
/// revised prompt with the revised answer, and delegates everything else.
///
/// A prompt matches a stored one when their token Jaccard similarity is at
/// least the threshold. The most similar entry wins; ties go to the earliest
/// event.
pub struct RevisionAdapter {
    inner: Arc<dyn ChatBackend>,
    id: String,
    threshold: f64,
    exact: HashMap<String, usize>,
    entries: Vec<Entry>,
    hits: AtomicU64,
    delegated: AtomicU64,
}

impl RevisionAdapter {
    pub fn new(inner: Arc<dyn ChatBackend>, revisions: &[RevisionFeedback]) -> Self {
        Self::with_threshold(inner, revisions, DEFAULT_SIMILARITY_THRESHOLD)
    }

    pub fn with_threshold(inner: Arc<dyn ChatBackend>, revisions: &[RevisionFeedback], threshold: f64) -> Self {
        let mut sorted: Vec<&RevisionFeedback> = revisions.iter().collect();
        sorted.sort_by_key(|r| r.event_seq);
        let mut exact = HashMap::new();
        let mut entries = Vec::with_capacity(sorted.len());
        for r in sorted {
            exact.entry(r.q.clone()).or_insert(entries.len());
            entries.push(Entry {
                seq: r.event_seq,
                signature: TokenSignature::of(&r.q),
                answer: r.a_prime.clone(),
            });
        }
        RevisionAdapter {
            id: format!("adapted:{}", inner.id()),
            inner,
            threshold,
            exact,
            entries,
            hits: AtomicU64::new(0),
            delegated: AtomicU64::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn delegated(&self) -> u64 {
        self.delegated.load(Ordering::Relaxed)
    }

    /// The stored answer this adapter would replay for `prompt`, if any.
    pub fn lookup(&self, prompt: &str) -> Option<&str> {
        if let Some(i) = self.exact.get(prompt) {
            return Some(&self.entries[*i].answer);
        }
        if self.entries.is_empty() {
            return None;
        }
        let sig = TokenSignature::of(prompt);
        let mut best: Option<(f64, u64, usize)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let sim = sig.jaccard(&e.signature);
            if sim < self.threshold {
                continue;
            }
            let better = match best {
                None => true,
                Some((bs, bseq, _)) => sim > bs || (sim == bs && e.seq < bseq),
            };
            if better {
                best = Some((sim, e.seq, i));
            }
        }
        best.map(|(_, _, i)| self.entries[i].answer.as_str())
    }
}

impl ChatBackend for RevisionAdapter {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        match self.lookup(&request.prompt_text()) {
            Some(answer) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                Ok(ChatResponse {
                    token_estimate: estimate_tokens(answer),
                    content: answer.to_owned(),
                    latency: Duration::ZERO,
                    backend_id: self.id.clone(),
                })
            }
            None => {
                self.delegated.fetch_add(1, Ordering::Relaxed);
                self.inner.complete(request)
            }
        }
    }

    fn concurrency(&self) -> Option<usize> {
        self.inner.concurrency()
    }
}
