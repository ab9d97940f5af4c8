//! Per-keyword attribute shares of an annotated manifest, as in a table of
//! how skewed image-search results are per occupation.
//!
//! ```text
//! cargo run --example representation_stats
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;

use cfaudit::dataset::{representation_csv, representation_stats, DatasetManifest, ImageRecord};

/// Expands `(keyword, female, male)` counts into annotated records.
fn manifest(counts: &[(&str, usize, usize)]) -> DatasetManifest {
    let mut records = Vec::new();
    for (kw, female, male) in counts {
        for i in 0..female + male {
            let gender = if i < *female { "female" } else { "male" };
            records.push(ImageRecord {
                id: format!("{kw}-{i:04}"),
                path: PathBuf::from(format!("{kw}/{i:04}.jpg")),
                keyword: kw.to_string(),
                qualifier: None,
                annotations: BTreeMap::from([("gender".to_string(), gender.to_string())]),
                face_present: Some(true),
            });
        }
    }
    DatasetManifest {
        records,
        attribute_domain: BTreeMap::from([("gender".into(), vec!["female".into(), "male".into()])]),
    }
}

fn main() {
    let m = manifest(&[
        ("nutritionist", 921, 79),
        ("flight attendant", 891, 109),
        ("pest control worker", 29, 971),
        ("handyman", 36, 964),
    ]);
    let rows = representation_stats(&m, "gender").unwrap();
    println!("{:<22} {:>5} {:>8} {:>8}", "keyword", "n", "female", "male");
    for r in &rows {
        println!(
            "{:<22} {:>5} {:>8.3} {:>8.3}",
            r.keyword, r.n, r.proportions["female"], r.proportions["male"]
        );
    }
    print!("\n{}", representation_csv(&rows, &m.attribute_domain["gender"]).unwrap());
}
