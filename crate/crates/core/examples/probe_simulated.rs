//! Probes a batch of images against a simulated labelling service through
//! the persistent store: a second pass is served entirely from cache, and
//! a rate limit on a virtual clock spaces the calls out.
//!
//! ```text
//! cargo run --example probe_simulated
//! ```

use std::sync::Arc;

use cfaudit::image::ImagePlane;
use cfaudit::probe::{probe_images, Clock, BiasSimSpec, GridLookup, ProbeInput, ProbeOptions, ProbeStore, SimulatedBackend, VirtualClock};

fn main() {
    let dir = std::env::temp_dir().join("cfaudit-probe-simulated");
    let _ = std::fs::remove_dir_all(&dir);

    let mut lookup = GridLookup::new();
    let inputs: Vec<ProbeInput> = (0..21)
        .map(|i| {
            let img = ImagePlane::from_fn(8, 8, 3, |x, y, c| ((x * 7 + y * 3 + c + i * 11) % 251) as f32 / 250.0).unwrap();
            let input = ProbeInput::from_plane(&img).unwrap();
            lookup.insert(&input.digest, -1.0 + (i % 7) as f64 / 3.0).unwrap();
            input
        })
        .collect();
    let spec = BiasSimSpec {
        label: "Hard Hat".into(),
        beta0: -0.5,
        beta1: 1.2,
        seed: 3,
        deterministic: false,
    };
    let backend = SimulatedBackend::with_lookup("simulated", vec![spec], lookup).unwrap();

    let clock = Arc::new(VirtualClock::new());
    let opts = ProbeOptions {
        rps: Some(5.0),
        clock: clock.clone(),
        ..ProbeOptions::default()
    };
    let store = ProbeStore::open(&dir).unwrap();
    let first = probe_images(&inputs, &backend, &store, &opts);
    println!(
        "first pass: {} calls, {} cache hits, peak {} in flight, {:.2}s on the virtual clock",
        first.network_calls,
        first.cache_hits,
        first.peak_in_flight,
        clock.now().as_secs_f64()
    );
    let tagged = first.records.iter().filter(|r| r.has_label("hard hat")).count();
    println!("{tagged} of {} images tagged `hard hat`", first.records.len());

    drop(store);
    let reopened = ProbeStore::open(&dir).unwrap();
    let second = probe_images(&inputs, &backend, &reopened, &opts);
    println!(
        "second pass after reopening: {} calls, {} cache hits",
        second.network_calls, second.cache_hits
    );
    println!("store digest {}", reopened.digest().unwrap());
}
