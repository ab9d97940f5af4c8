//! Labels one image with a hosted service. Credentials come from the
//! environment; without them the adapter reports which variables it needs.
//!
//! ```text
//! GOOGLE_VISION_API_KEY=... cargo run --example probe_remote -- google [image.png]
//! ```

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use cfaudit::probe::remote::{from_env, UreqTransport, REMOTE_BACKENDS};
use cfaudit::probe::{classify_with_retry, ProbeInput, RetryPolicy, SystemClock};
use cfaudit::toy;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let name = args.first().map(String::as_str).unwrap_or("google");
    let input = match args.get(1) {
        Some(p) => ProbeInput::from_file(Path::new(p)).unwrap(),
        None => ProbeInput::from_plane(&toy::generate(128, 5, 0).image).unwrap(),
    };

    let transport = Arc::new(UreqTransport::new(Duration::from_secs(30)));
    let backend = match from_env(name, transport) {
        Ok(b) => b,
        Err(e) => {
            println!("{e}");
            println!("available services: {}", REMOTE_BACKENDS.join(", "));
            return;
        }
    };
    match classify_with_retry(backend.as_ref(), &input, &RetryPolicy::default(), &SystemClock::new(), || ()) {
        Ok(preds) => {
            for p in preds {
                println!("{:<30} present {} confidence {:?}", p.label, p.present, p.confidence);
            }
        }
        Err(e) => println!("request failed: {e}"),
    }
}
