//! Label-classification backends and the probing harness around them.
//!
//! A [`Backend`] turns one image into normalized [`LabelPrediction`]s.
//! [`probe_images`] drives a backend over many images with a cache
//! ([`ProbeStore`]), a token-bucket rate limit, bounded parallelism and
//! retry with exponential backoff.

pub mod limiter;
pub mod remote;
pub mod replay;
pub mod sigv4;
pub mod sim;
pub mod store;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{ImageError, ImagePlane};

pub use limiter::{Clock, SystemClock, TokenBucket, VirtualClock};
pub use replay::ReplayBackend;
pub use sim::{make_simulated_backend, BiasSimSpec, GridLookup, SimulatedBackend};
pub use store::{ProbeStore, StoreError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    /// Network-level failure; retried with backoff.
    #[error("transport error: {0}")]
    Transport(String),
    /// Quota or rate limit hit on the service side; retried with backoff.
    #[error("throttled by backend{}", retry_after.map(|d| format!(" (retry after {d:?})")).unwrap_or_default())]
    Throttled { retry_after: Option<Duration> },
    /// The service answered with something we cannot interpret.
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error("backend configuration error: {0}")]
    Config(String),
    #[error("simulator error: {0}")]
    Simulator(String),
    #[error("store error: {0}")]
    Store(String),
    #[error("retry budget exhausted after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<ProbeError> },
}

impl ProbeError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProbeError::Transport(_) | ProbeError::Throttled { .. })
    }
}

/// Lowercased, trimmed label text.
pub fn normalize_label(raw: &str) -> String {
    raw.trim().to_lowercase()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelPrediction {
    pub label: String,
    /// Label as the backend spelled it.
    pub raw_label: String,
    pub present: bool,
    /// Always set when `present`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl LabelPrediction {
    /// Builds a prediction with a normalized label. Confidence is clamped to `[0, 1]`.
    pub fn new(raw_label: &str, present: bool, confidence: Option<f64>) -> Result<Self, ProbeError> {
        if present && confidence.is_none() {
            return Err(ProbeError::Protocol(format!("label `{raw_label}` is present without a confidence")));
        }
        let confidence = match confidence {
            Some(c) if c.is_nan() => return Err(ProbeError::Protocol(format!("label `{raw_label}` has NaN confidence"))),
            Some(c) => Some(c.clamp(0.0, 1.0)),
            None => None,
        };
        let label = normalize_label(raw_label);
        if label.is_empty() {
            return Err(ProbeError::Protocol("empty label".into()));
        }
        Ok(Self {
            label,
            raw_label: raw_label.to_string(),
            present,
            confidence,
        })
    }
}

/// Merges predictions whose labels collide after normalization: present if
/// any is present, with the highest confidence. Output is sorted by label.
pub fn merge_predictions(preds: Vec<LabelPrediction>) -> Vec<LabelPrediction> {
    let mut merged: BTreeMap<String, LabelPrediction> = BTreeMap::new();
    for p in preds {
        match merged.get_mut(&p.label) {
            None => {
                merged.insert(p.label.clone(), p);
            }
            Some(m) => {
                m.present |= p.present;
                m.confidence = match (m.confidence, p.confidence) {
                    (Some(a), Some(b)) => Some(a.max(b)),
                    (a, b) => a.or(b),
                };
            }
        }
    }
    merged.into_values().collect()
}

/// One backend's answer for one image. `(image_id, backend)` keys the store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    /// [`ImagePlane::content_digest`] of the probed image.
    pub image_id: String,
    pub backend: String,
    pub predictions: Vec<LabelPrediction>,
    pub fetched_at: DateTime<Utc>,
    #[serde(default)]
    pub from_cache: bool,
}

impl ProbeRecord {
    pub fn has_label(&self, label: &str) -> bool {
        self.predictions.iter().any(|p| p.present && p.label == label)
    }
}

/// An image ready to send: encoded PNG bytes plus the content digest used as
/// cache key.
#[derive(Clone, Debug)]
pub struct ProbeInput {
    pub digest: String,
    pub png: Arc<Vec<u8>>,
}

impl ProbeInput {
    pub fn from_plane(image: &ImagePlane) -> Result<Self, ImageError> {
        Ok(Self {
            digest: image.content_digest(),
            png: Arc::new(image.encode_png()?),
        })
    }

    /// Reads an image file. The digest is taken over the decoded raster, so
    /// re-encoding an identical image still hits the cache.
    pub fn from_file(path: &Path) -> Result<Self, ImageError> {
        let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let plane = ImagePlane::decode(&bytes)?;
        Ok(Self {
            digest: plane.content_digest(),
            png: Arc::new(bytes),
        })
    }
}

/// A label-classification service, local model or simulator.
pub trait Backend: Send + Sync {
    /// Stable identifier; part of the cache key.
    fn id(&self) -> &str;

    fn classify(&self, input: &ProbeInput) -> Result<Vec<LabelPrediction>, ProbeError>;

    /// Upper bound on concurrent `classify` calls this backend tolerates
    /// (`Some(1)` serializes it). `None` means no limit of its own.
    fn max_concurrency(&self) -> Option<usize> {
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts per image, including the first.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(20),
        }
    }
}

impl RetryPolicy {
    /// Wait before attempt `attempt + 1` (attempt counts from 1). A server
    /// `Retry-After` wins when it is longer.
    pub fn delay(&self, attempt: u32, err: &ProbeError) -> Duration {
        let exp = self.base_delay.saturating_mul(1u32 << (attempt - 1).min(20));
        let backoff = exp.min(self.max_delay);
        match err {
            ProbeError::Throttled { retry_after: Some(d) } => backoff.max(*d),
            _ => backoff,
        }
    }
}

/// Calls `backend` until it succeeds, fails permanently or the attempts run
/// out. `on_attempt` fires before each call (rate limiting, accounting).
pub fn classify_with_retry(
    backend: &dyn Backend,
    input: &ProbeInput,
    policy: &RetryPolicy,
    clock: &dyn Clock,
    mut on_attempt: impl FnMut(),
) -> Result<Vec<LabelPrediction>, ProbeError> {
    let mut attempt = 0;
    loop {
        attempt += 1;
        on_attempt();
        match backend.classify(input) {
            Ok(p) => return Ok(merge_predictions(p)),
            Err(e) if e.is_retryable() && attempt < policy.max_attempts => {
                let d = policy.delay(attempt, &e);
                log::debug!("{} attempt {attempt} failed ({e}); retrying in {d:?}", backend.id());
                clock.sleep(d);
            }
            Err(e) if e.is_retryable() => {
                return Err(ProbeError::Exhausted {
                    attempts: attempt,
                    last: Box::new(e),
                })
            }
            Err(e) => return Err(e),
        }
    }
}

#[derive(Clone)]
pub struct ProbeOptions {
    /// Requests per second across all workers; `None` disables limiting.
    pub rps: Option<f64>,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub clock: Arc<dyn Clock>,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            rps: None,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            clock: Arc::new(SystemClock::new()),
        }
    }
}

#[derive(Debug, Default)]
pub struct ProbeOutcome {
    /// One record per successfully probed input, in input order.
    pub records: Vec<ProbeRecord>,
    /// Inputs that failed, with the final error; their records are absent.
    pub failures: Vec<(String, ProbeError)>,
    /// `classify` invocations, retries included.
    pub network_calls: usize,
    pub cache_hits: usize,
    /// Highest number of simultaneous `classify` calls observed.
    pub peak_in_flight: usize,
}

/// Probes every input with `backend`.
///
/// Inputs already in `store` (and repeats within `inputs`) are served from
/// cache with no backend call. Each fresh result is appended to the store
/// before this returns; a failure on one input never discards the others.
pub fn probe_images(inputs: &[ProbeInput], backend: &dyn Backend, store: &ProbeStore, opts: &ProbeOptions) -> ProbeOutcome {
    let id = backend.id().to_string();
    let mut slots: Vec<Option<ProbeRecord>> = vec![None; inputs.len()];
    let mut first_seen: BTreeMap<&str, usize> = BTreeMap::new();
    let mut todo = Vec::new();
    let mut cache_hits = 0;
    for (i, input) in inputs.iter().enumerate() {
        if let Some(mut rec) = store.get(&id, &input.digest) {
            rec.from_cache = true;
            slots[i] = Some(rec);
            cache_hits += 1;
        } else if !first_seen.contains_key(input.digest.as_str()) {
            first_seen.insert(&input.digest, i);
            todo.push(i);
        }
    }

    let workers = opts
        .max_in_flight
        .max(1)
        .min(backend.max_concurrency().unwrap_or(usize::MAX).max(1))
        .min(todo.len());
    let bucket = opts.rps.map(|rps| TokenBucket::new(rps, opts.clock.clone()));
    let next = AtomicUsize::new(0);
    let calls = AtomicUsize::new(0);
    let in_flight = AtomicUsize::new(0);
    let peak = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<ProbeRecord, ProbeError>)>> = Mutex::new(Vec::new());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = todo.get(j) else { break };
                let input = &inputs[i];
                let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                let outcome = classify_with_retry(backend, input, &opts.retry, opts.clock.as_ref(), || {
                    if let Some(b) = &bucket {
                        b.acquire();
                    }
                    calls.fetch_add(1, Ordering::SeqCst);
                })
                .and_then(|predictions| {
                    let rec = ProbeRecord {
                        image_id: input.digest.clone(),
                        backend: id.clone(),
                        predictions,
                        fetched_at: Utc::now(),
                        from_cache: false,
                    };
                    store.append(&rec).map_err(|e| ProbeError::Store(e.to_string()))?;
                    Ok(rec)
                });
                in_flight.fetch_sub(1, Ordering::SeqCst);
                results.lock().expect("results lock").push((i, outcome));
            });
        }
    });

    let mut failures = Vec::new();
    for (i, r) in results.into_inner().expect("results lock") {
        match r {
            Ok(rec) => slots[i] = Some(rec),
            Err(e) => failures.push((inputs[i].digest.clone(), e)),
        }
    }
    // Repeats of an image probed in this call share its record.
    for (i, input) in inputs.iter().enumerate() {
        if slots[i].is_none() {
            if let Some(&first) = first_seen.get(input.digest.as_str()) {
                if let Some(mut rec) = slots[first].clone() {
                    rec.from_cache = true;
                    cache_hits += 1;
                    slots[i] = Some(rec);
                }
            }
        }
    }
    failures.sort_by(|a, b| a.0.cmp(&b.0));
    ProbeOutcome {
        records: slots.into_iter().flatten().collect(),
        failures,
        network_calls: calls.into_inner(),
        cache_hits,
        peak_in_flight: peak.into_inner(),
    }
}
