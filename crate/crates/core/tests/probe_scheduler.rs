use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use cfaudit::probe::{
    probe_images, Backend, Clock, LabelPrediction, ProbeError, ProbeInput, ProbeOptions, ProbeStore, RetryPolicy, VirtualClock,
};

struct Counting {
    calls: AtomicUsize,
    fail_digest: Option<String>,
    delay: Duration,
    limit: Option<usize>,
}

impl Counting {
    fn new() -> Self {
        Self {
            calls: AtomicUsize::new(0),
            fail_digest: None,
            delay: Duration::ZERO,
            limit: None,
        }
    }
}

impl Backend for Counting {
    fn id(&self) -> &str {
        "counting"
    }

    fn classify(&self, input: &ProbeInput) -> Result<Vec<LabelPrediction>, ProbeError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        std::thread::sleep(self.delay);
        if self.fail_digest.as_deref() == Some(input.digest.as_str()) {
            return Err(ProbeError::Protocol("refused".into()));
        }
        Ok(vec![LabelPrediction::new("Doctor", true, Some(0.9))?])
    }

    fn max_concurrency(&self) -> Option<usize> {
        self.limit
    }
}

fn inputs(n: usize) -> Vec<ProbeInput> {
    (0..n)
        .map(|i| ProbeInput {
            digest: format!("img{i:02}"),
            png: Arc::new(vec![i as u8]),
        })
        .collect()
}

fn opts() -> ProbeOptions {
    ProbeOptions {
        clock: Arc::new(VirtualClock::new()),
        ..ProbeOptions::default()
    }
}

#[test]
fn empty_cache_then_full_cache() {
    let dir = tempfile::tempdir().unwrap();
    let store = ProbeStore::open(dir.path()).unwrap();
    let backend = Counting::new();
    let series = inputs(7);

    let first = probe_images(&series, &backend, &store, &opts());
    assert_eq!(first.network_calls, 7);
    assert_eq!(first.records.len(), 7);
    assert!(first.records.iter().all(|r| !r.from_cache));
    assert_eq!(store.len(), 7);

    let second = probe_images(&series, &backend, &store, &opts());
    assert_eq!(second.network_calls, 0);
    assert_eq!(second.cache_hits, 7);
    assert!(second.records.iter().all(|r| r.from_cache));
    assert_eq!(backend.calls.load(Ordering::SeqCst), 7);
    let ids: Vec<_> = second.records.iter().map(|r| r.image_id.clone()).collect();
    let want: Vec<_> = series.iter().map(|i| i.digest.clone()).collect();
    assert_eq!(ids, want);
    drop(store);

    // A reopened store still serves every record.
    let store = ProbeStore::open(dir.path()).unwrap();
    assert_eq!(probe_images(&series, &backend, &store, &opts()).network_calls, 0);
}

#[test]
fn precached_images_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let store = ProbeStore::open(dir.path()).unwrap();
    let backend = Counting::new();
    let series = inputs(7);
    probe_images(&series[2..4], &backend, &store, &opts());
    let before = backend.calls.load(Ordering::SeqCst);
    let out = probe_images(&series, &backend, &store, &opts());
    assert_eq!(out.network_calls, 5);
    assert_eq!(backend.calls.load(Ordering::SeqCst) - before, 5);
    assert_eq!(out.cache_hits, 2);
    assert_eq!(out.records.len(), 7);
}

#[test]
fn duplicate_digests_in_one_batch_cost_one_call() {
    let dir = tempfile::tempdir().unwrap();
    let store = ProbeStore::open(dir.path()).unwrap();
    let backend = Counting::new();
    let mut batch = inputs(3);
    batch.push(batch[0].clone());
    let out = probe_images(&batch, &backend, &store, &opts());
    assert_eq!(out.network_calls, 3);
    assert_eq!(out.records.len(), 4);
    assert!(out.records[3].from_cache);
    assert_eq!(store.len(), 3);
}

#[test]
fn partial_failure_keeps_completed_records() {
    let dir = tempfile::tempdir().unwrap();
    let store = ProbeStore::open(dir.path()).unwrap();
    let mut backend = Counting::new();
    backend.fail_digest = Some("img03".into());
    let series = inputs(7);
    let out = probe_images(&series, &backend, &store, &opts());
    assert_eq!(out.records.len(), 6);
    assert_eq!(out.failures.len(), 1);
    assert_eq!(out.failures[0].0, "img03");
    assert_eq!(store.len(), 6);

    // Retrying only touches the failed image.
    backend.fail_digest = None;
    let retry = probe_images(&series, &backend, &store, &opts());
    assert_eq!(retry.network_calls, 1);
    assert_eq!(retry.records.len(), 7);
}

#[test]
fn concurrency_is_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let store = ProbeStore::open(dir.path()).unwrap();
    let mut backend = Counting::new();
    backend.delay = Duration::from_millis(20);
    let mut o = opts();
    o.max_in_flight = 3;
    let out = probe_images(&inputs(12), &backend, &store, &o);
    assert!(out.peak_in_flight <= 3 && out.peak_in_flight >= 1, "{}", out.peak_in_flight);

    let dir = tempfile::tempdir().unwrap();
    let store = ProbeStore::open(dir.path()).unwrap();
    backend.limit = Some(1);
    let out = probe_images(&inputs(6), &backend, &store, &o);
    assert_eq!(out.peak_in_flight, 1);
}

struct Flaky {
    calls: AtomicUsize,
}

impl Backend for Flaky {
    fn id(&self) -> &str {
        "flaky"
    }

    fn classify(&self, _: &ProbeInput) -> Result<Vec<LabelPrediction>, ProbeError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) < 2 {
            Err(ProbeError::Throttled {
                retry_after: Some(Duration::from_secs(3)),
            })
        } else {
            Ok(vec![])
        }
    }
}

#[test]
fn throttling_is_retried_with_server_delay() {
    let dir = tempfile::tempdir().unwrap();
    let store = ProbeStore::open(dir.path()).unwrap();
    let clock = Arc::new(VirtualClock::new());
    let o = ProbeOptions {
        clock: clock.clone(),
        retry: RetryPolicy::default(),
        ..ProbeOptions::default()
    };
    let out = probe_images(&inputs(1), &Flaky { calls: AtomicUsize::new(0) }, &store, &o);
    assert_eq!(out.network_calls, 3);
    assert_eq!(out.records.len(), 1);
    assert_eq!(clock.sleeps(), vec![Duration::from_secs(3), Duration::from_secs(3)]);
}

#[test]
fn rate_limit_paces_calls() {
    let dir = tempfile::tempdir().unwrap();
    let store = ProbeStore::open(dir.path()).unwrap();
    let clock = Arc::new(VirtualClock::new());
    let o = ProbeOptions {
        rps: Some(4.0),
        clock: clock.clone(),
        ..ProbeOptions::default()
    };
    let out = probe_images(&inputs(9), &Counting::new(), &store, &o);
    assert_eq!(out.network_calls, 9);
    // Nine tokens at 4/s with a bucket of one: the last is granted at 8/4 s.
    assert!((clock.now().as_secs_f64() - 2.0).abs() < 1e-6, "{:?}", clock.now());
}
