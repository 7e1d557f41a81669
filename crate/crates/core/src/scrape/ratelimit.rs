use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

/// Token bucket of capacity one, shared by all fetchers.
///
/// Grants are spaced at least `1 / rate` apart, measured from the instant the
/// previous grant was actually handed out, so any one-second window holds at
/// most `ceil(rate)` grants.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    last_grant: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(requests_per_second: f64) -> Self {
        assert!(requests_per_second > 0.0 && requests_per_second.is_finite());
        Self {
            interval: Duration::from_secs_f64(1.0 / requests_per_second),
            last_grant: Mutex::new(None),
        }
    }

    pub fn interval(&self) -> Duration {
        self.interval
    }

    /// Blocks until a request may be issued.
    pub fn acquire(&self) {
        let mut last = self.last_grant.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(prev) = *last {
            let ready = prev + self.interval;
            loop {
                let now = Instant::now();
                if now >= ready {
                    break;
                }
                thread::sleep(ready - now);
            }
        }
        *last = Some(Instant::now());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spacing_is_enforced() {
        let rl = RateLimiter::new(100.0);
        let mut stamps = Vec::new();
        for _ in 0..10 {
            rl.acquire();
            stamps.push(Instant::now());
        }
        for w in stamps.windows(2) {
            assert!(w[1] - w[0] >= Duration::from_millis(10));
        }
    }

    #[test]
    fn first_grant_is_immediate() {
        let rl = RateLimiter::new(0.5);
        let t = Instant::now();
        rl.acquire();
        assert!(t.elapsed() < Duration::from_millis(100));
        assert_eq!(rl.interval(), Duration::from_secs(2));
    }
}
