//! In-flight request bound and retry schedule.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use crate::error::Result;

pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    sem: &'a Semaphore,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().expect("semaphore poisoned");
        while *n == 0 {
            n = self.freed.wait(n).expect("semaphore poisoned");
        }
        *n -= 1;
        Permit { sem: self }
    }

    pub fn available(&self) -> usize {
        *self.permits.lock().expect("semaphore poisoned")
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().expect("semaphore poisoned") += 1;
        self.sem.freed.notify_one();
    }
}

/// Exponential backoff: `base`, `2·base`, … between at most `max_attempts` tries.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry)
    }

    /// Runs `op` until it succeeds, fails permanently, or attempts run out.
    /// Returns the value and the number of retries spent.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T>) -> Result<(T, u32)> {
        let mut retries = 0;
        loop {
            match op() {
                Ok(v) => return Ok((v, retries)),
                Err(e) if e.is_retryable() && retries + 1 < self.max_attempts.max(1) => {
                    log::warn!("retrying after {e} (retry {})", retries + 1);
                    std::thread::sleep(self.delay(retries));
                    retries += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
