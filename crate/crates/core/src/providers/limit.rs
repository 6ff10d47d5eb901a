//! Central concurrency limit, token-bucket rate limiting and retry policy.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use super::{
    AlignmentScore, AlignmentScorer, ChatProvider, ChatRequest, Embedder, EmbeddingVector,
    ImageArtifact, ImageGenerator, ImageParams, ProviderError,
};

pub const DEFAULT_CONCURRENCY: usize = 4;

#[derive(Debug)]
struct Bucket {
    tokens: f64,
    last: Instant,
}

/// Caps in-flight requests and, optionally, the request rate.
#[derive(Debug)]
pub struct RateLimiter {
    max_in_flight: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
    rate: Option<(f64, f64)>,
    bucket: Mutex<Bucket>,
}

pub struct Permit<'a> {
    limiter: &'a RateLimiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.in_flight.lock().expect("limiter poisoned");
        *n -= 1;
        self.limiter.freed.notify_one();
    }
}

impl RateLimiter {
    pub fn new(max_in_flight: usize) -> Self {
        Self {
            max_in_flight: max_in_flight.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            rate: None,
            bucket: Mutex::new(Bucket {
                tokens: 0.0,
                last: Instant::now(),
            }),
        }
    }

    /// Adds a token bucket refilling at `per_second` with capacity `burst`.
    pub fn with_rate(mut self, per_second: f64, burst: f64) -> Self {
        if per_second > 0.0 {
            let burst = burst.max(1.0);
            self.rate = Some((per_second, burst));
            self.bucket = Mutex::new(Bucket {
                tokens: burst,
                last: Instant::now(),
            });
        }
        self
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    pub fn in_flight(&self) -> usize {
        *self.in_flight.lock().expect("limiter poisoned")
    }

    pub fn acquire(&self) -> Permit<'_> {
        self.take_token();
        let mut n = self.in_flight.lock().expect("limiter poisoned");
        while *n >= self.max_in_flight {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        Permit { limiter: self }
    }

    fn take_token(&self) {
        let Some((rate, burst)) = self.rate else {
            return;
        };
        loop {
            let wait = {
                let mut b = self.bucket.lock().expect("limiter poisoned");
                let now = Instant::now();
                let elapsed = now.duration_since(b.last).as_secs_f64();
                b.tokens = (b.tokens + elapsed * rate).min(burst);
                b.last = now;
                if b.tokens >= 1.0 {
                    b.tokens -= 1.0;
                    return;
                }
                (1.0 - b.tokens) / rate
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

impl Default for RateLimiter {
    fn default() -> Self {
        Self::new(DEFAULT_CONCURRENCY)
    }
}

/// Up to `max_attempts` tries with exponential backoff, for retryable errors only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_attempts: 1,
            ..Self::default()
        }
    }

    pub fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff
            .mul_f64(self.multiplier.powi(attempt.saturating_sub(1) as i32))
    }

    pub fn run<T>(
        &self,
        mut op: impl FnMut(u32) -> Result<T, ProviderError>,
    ) -> Result<T, ProviderError> {
        let mut attempt = 1;
        loop {
            match op(attempt) {
                Err(e) if e.is_retryable() && attempt < self.max_attempts => {
                    std::thread::sleep(self.backoff(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Wraps any provider with a shared limiter and retry policy.
pub struct Limited<P> {
    inner: P,
    limiter: RateLimiter,
    retry: RetryPolicy,
}

impl<P> Limited<P> {
    pub fn new(inner: P, limiter: RateLimiter, retry: RetryPolicy) -> Self {
        Self {
            inner,
            limiter,
            retry,
        }
    }

    pub fn limiter(&self) -> &RateLimiter {
        &self.limiter
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    fn call<T>(&self, mut op: impl FnMut(&P) -> Result<T, ProviderError>) -> Result<T, ProviderError> {
        self.retry.run(|_| {
            let _permit = self.limiter.acquire();
            op(&self.inner)
        })
    }
}

impl<P: ChatProvider> ChatProvider for Limited<P> {
    fn complete(&self, req: &ChatRequest) -> Result<String, ProviderError> {
        self.call(|p| p.complete(req))
    }
    fn model_tag(&self) -> &str {
        self.inner.model_tag()
    }
}

impl<P: Embedder> Embedder for Limited<P> {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, ProviderError> {
        self.call(|p| p.embed(texts))
    }
    fn model_tag(&self) -> &str {
        self.inner.model_tag()
    }
}

impl<P: ImageGenerator> ImageGenerator for Limited<P> {
    fn generate(
        &self,
        instruction: &str,
        params: &ImageParams,
    ) -> Result<ImageArtifact, ProviderError> {
        self.call(|p| p.generate(instruction, params))
    }
    fn provider_tag(&self) -> &str {
        self.inner.provider_tag()
    }
}

impl<P: AlignmentScorer> AlignmentScorer for Limited<P> {
    fn score(&self, image: &ImageArtifact, text: &str) -> Result<AlignmentScore, ProviderError> {
        self.call(|p| p.score(image, text))
    }
}
