use std::sync::Arc;

use parking_lot::{Condvar, Mutex};

use super::{ChatBackend, ChatRequest, ChatResponse, GatewayError};
use crate::lanes::parallel_map;

pub struct PoolEndpoint {
    backend: Arc<dyn ChatBackend>,
    max_concurrent: usize,
}

impl PoolEndpoint {
    pub fn new(backend: Arc<dyn ChatBackend>, max_concurrent: usize) -> Self {
        PoolEndpoint {
            backend,
            max_concurrent,
        }
    }
}

/// Several endpoints behind one backend, each with its own concurrency cap.
///
/// A call goes to the endpoint with the fewest in-flight calls (ties by
/// index) that still has capacity; callers block while every endpoint is full.
pub struct EndpointPool {
    id: String,
    endpoints: Vec<PoolEndpoint>,
    in_flight: Mutex<Vec<usize>>,
    freed: Condvar,
}

impl EndpointPool {
    pub fn new(id: impl Into<String>, endpoints: Vec<PoolEndpoint>) -> Result<Self, GatewayError> {
        if endpoints.is_empty() {
            return Err(GatewayError::Invalid("endpoint pool is empty".into()));
        }
        if endpoints.iter().any(|e| e.max_concurrent == 0) {
            return Err(GatewayError::Invalid(
                "endpoint max_concurrent must be >= 1".into(),
            ));
        }
        let n = endpoints.len();
        Ok(EndpointPool {
            id: id.into(),
            endpoints,
            in_flight: Mutex::new(vec![0; n]),
            freed: Condvar::new(),
        })
    }

    pub fn total_concurrency(&self) -> usize {
        self.endpoints.iter().map(|e| e.max_concurrent).sum()
    }

    fn acquire(&self) -> usize {
        let mut in_flight = self.in_flight.lock();
        loop {
            let pick = in_flight
                .iter()
                .enumerate()
                .filter(|(i, n)| **n < self.endpoints[*i].max_concurrent)
                .min_by_key(|(i, n)| (**n, *i))
                .map(|(i, _)| i);
            if let Some(i) = pick {
                in_flight[i] += 1;
                return i;
            }
            self.freed.wait(&mut in_flight);
        }
    }

    fn release(&self, i: usize) {
        self.in_flight.lock()[i] -= 1;
        self.freed.notify_all();
    }

    /// Run a batch with up to `total_concurrency` calls in flight. Results are
    /// positional; one failure does not abort the others.
    pub fn dispatch(&self, requests: &[ChatRequest]) -> Vec<Result<ChatResponse, GatewayError>> {
        parallel_map(requests, self.total_concurrency(), |_, r| self.complete(r))
    }
}

struct Slot<'a> {
    pool: &'a EndpointPool,
    index: usize,
}

impl Drop for Slot<'_> {
    fn drop(&mut self) {
        self.pool.release(self.index);
    }
}

impl ChatBackend for EndpointPool {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let slot = Slot {
            pool: self,
            index: self.acquire(),
        };
        self.endpoints[slot.index].backend.complete(request)
    }

    fn concurrency(&self) -> Option<usize> {
        Some(self.total_concurrency())
    }
}
