//! Writes the report bundle for a set of precomputed slopes: the combined
//! CSV, one signed table per service with its sign legend, and metadata.
//!
//! ```text
//! cargo run --example report_fixture -- [slopes.json] [out_dir]
//! ```

use std::path::PathBuf;

use cfaudit::slopes::{load_slopes_json, report, Analysis, AnalysisOptions, ReportMetadata};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let fixture = args
        .first()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/google_female_slopes.json"));
    let out = args
        .get(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("cfaudit-report"));

    let slopes = load_slopes_json(&fixture).unwrap();
    let analysis = Analysis::from_slopes(slopes, AnalysisOptions::default());
    let meta = ReportMetadata {
        attribute: Some("gender".into()),
        endpoints: Some(["female".into(), "male".into()]),
        ..ReportMetadata::default()
    };
    let files = report(&analysis, &meta, &out).unwrap();
    print!("{}", std::fs::read_to_string(&files.slopes_csv).unwrap());
    for t in files.tables.iter().filter(|p| p.extension().is_some_and(|e| e == "txt")) {
        println!("\n{}", t.display());
        print!("{}", std::fs::read_to_string(t).unwrap());
    }
}
