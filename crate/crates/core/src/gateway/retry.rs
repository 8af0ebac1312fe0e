use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::GatewayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub budget: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            budget: 2,
            base_delay_ms: 100,
        }
    }
}

impl RetryPolicy {
    pub fn base_delay(&self) -> Duration {
        Duration::from_millis(self.base_delay_ms)
    }
}

/// Call `call(attempt)` until it succeeds, retrying retryable failures up to
/// `budget` times with delays of `base_delay * 2^attempt`.
///
/// Non-retryable errors are returned as-is. Exhausting the budget yields
/// [`GatewayError::Exhausted`] wrapping the last cause.
pub fn retry_with_backoff<T>(
    mut call: impl FnMut(u32) -> Result<T, GatewayError>,
    budget: u32,
    base_delay: Duration,
) -> Result<T, GatewayError> {
    let mut attempt = 0u32;
    loop {
        match call(attempt) {
            Ok(v) => return Ok(v),
            Err(e) if !e.is_retryable() => return Err(e),
            Err(e) if attempt >= budget => {
                return Err(GatewayError::Exhausted {
                    endpoint: e.endpoint().unwrap_or("unknown").to_owned(),
                    attempts: attempt + 1,
                    last: Box::new(e),
                })
            }
            Err(_) => {
                let delay = base_delay.saturating_mul(1u32.checked_shl(attempt).unwrap_or(u32::MAX));
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
                attempt += 1;
            }
        }
    }
}
