//! Token-bucket rate limiting over an injectable clock.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

/// Monotonic time source. `now` is measured from an arbitrary origin.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Clock whose `sleep` advances time instantly. Sleeps are recorded.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: Mutex<Duration>,
    sleeps: Mutex<Vec<Duration>>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, d: Duration) {
        *self.now.lock().expect("clock lock") += d;
    }

    pub fn sleeps(&self) -> Vec<Duration> {
        self.sleeps.lock().expect("clock lock").clone()
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        *self.now.lock().expect("clock lock")
    }

    fn sleep(&self, d: Duration) {
        self.sleeps.lock().expect("clock lock").push(d);
        self.advance(d);
    }
}

struct BucketState {
    tokens: f64,
    last: Duration,
}

/// Admits at most `rps` acquisitions per second on average, with a burst
/// capacity of one token: any window of length `T` admits at most
/// `1 + rps * T` acquisitions.
pub struct TokenBucket {
    rps: f64,
    capacity: f64,
    clock: Arc<dyn Clock>,
    state: Mutex<BucketState>,
}

impl TokenBucket {
    pub fn new(rps: f64, clock: Arc<dyn Clock>) -> Self {
        assert!(rps > 0.0 && rps.is_finite(), "rps must be positive");
        let last = clock.now();
        Self {
            rps,
            capacity: 1.0,
            clock,
            state: Mutex::new(BucketState { tokens: 1.0, last }),
        }
    }

    pub fn rps(&self) -> f64 {
        self.rps
    }

    /// Blocks until a token is available and takes it. Waiters queue on the
    /// bucket's lock, so admissions are serialized.
    pub fn acquire(&self) {
        let mut st = self.state.lock().expect("bucket lock");
        loop {
            let now = self.clock.now();
            let elapsed = now.saturating_sub(st.last).as_secs_f64();
            st.tokens = (st.tokens + elapsed * self.rps).min(self.capacity);
            st.last = now;
            if st.tokens >= 1.0 {
                st.tokens -= 1.0;
                return;
            }
            let wait = (1.0 - st.tokens) / self.rps;
            self.clock.sleep(Duration::from_secs_f64(wait));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn admissions_respect_rate_in_every_window() {
        let clock = Arc::new(VirtualClock::new());
        let bucket = TokenBucket::new(5.0, clock.clone());
        let mut stamps = Vec::new();
        for _ in 0..200 {
            bucket.acquire();
            stamps.push(clock.now().as_secs_f64());
        }
        let window = 10.0;
        for (i, &t0) in stamps.iter().enumerate() {
            let n = stamps[i..].iter().take_while(|&&t| t < t0 + window).count();
            assert!(n as f64 <= 5.0 * window * 1.1, "{n} admissions in window starting {t0}");
        }
        let span = stamps.last().unwrap() - stamps[0];
        assert!((span - 199.0 / 5.0).abs() < 1e-6, "{span}");
    }

    #[test]
    fn idle_time_does_not_bank_a_burst() {
        let clock = Arc::new(VirtualClock::new());
        let bucket = TokenBucket::new(2.0, clock.clone());
        clock.advance(Duration::from_secs(100));
        let t0 = clock.now();
        for _ in 0..5 {
            bucket.acquire();
        }
        assert!((clock.now() - t0).as_secs_f64() >= 2.0 - 1e-9);
    }

    #[test]
    fn real_clock_paces_threads() {
        let bucket = Arc::new(TokenBucket::new(50.0, Arc::new(SystemClock::new())));
        let start = Instant::now();
        std::thread::scope(|s| {
            for _ in 0..4 {
                let b = bucket.clone();
                s.spawn(move || {
                    for _ in 0..5 {
                        b.acquire();
                    }
                });
            }
        });
        // 20 admissions at 50/s with one initial token need at least 19/50 s.
        assert!(start.elapsed().as_secs_f64() >= 0.37);
    }
}
