mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;

use cfaudit::dataset::{build_manifest, filter_faceless, representation_stats, DatasetManifest, ImageRecord};
use proptest::prelude::*;

#[test]
fn toy_manifest_matches_hand_tally() {
    let m = DatasetManifest::load(&common::fixture("toy_manifest.json")).unwrap();
    assert_eq!(m.records.len(), 8);
    let rows = representation_stats(&m, "gender").unwrap();
    // baker: 3 female, 1 male. pilot: 1 female, 2 male, 1 unannotated.
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].keyword.as_str(), rows[0].n), ("baker", 4));
    assert_eq!(rows[0].proportions["female"], 0.75);
    assert_eq!(rows[0].proportions["male"], 0.25);
    assert_eq!((rows[1].keyword.as_str(), rows[1].n), ("pilot", 3));
    assert_eq!(rows[1].proportions["female"], 1.0 / 3.0);
    assert_eq!(rows[1].proportions["male"], 2.0 / 3.0);

    let mouth = representation_stats(&m, "mouth").unwrap();
    assert_eq!(mouth[0].proportions["open"], 0.5);
    assert_eq!(mouth[1].proportions["closed"], 0.5);
}

#[test]
fn counts_fixture_reproduces_published_shares() {
    let rows = representation_stats(&common::counts_manifest(), "gender").unwrap();
    let share = |kw: &str, v: &str| rows.iter().find(|r| r.keyword == kw).unwrap().proportions[v];
    assert_eq!(share("nutritionist", "female"), 0.921);
    assert_eq!(share("flight attendant", "female"), 0.891);
    assert_eq!(share("pest control worker", "male"), 0.971);
    assert_eq!(share("handyman", "male"), 0.964);
}

#[test]
fn build_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    cfaudit::toy::write_dataset(dir.path(), 9, 32, 4, &["a", "b", "c"]).unwrap();
    let root = dir.path().join("images");
    let first = build_manifest(&root, &[]).unwrap().manifest.to_json().unwrap();
    let second = build_manifest(&root, &[]).unwrap().manifest.to_json().unwrap();
    assert_eq!(first, second);
}

fn record(i: usize, keyword: u8, gender: Option<bool>) -> ImageRecord {
    let mut annotations = BTreeMap::new();
    if let Some(g) = gender {
        annotations.insert("gender".to_string(), if g { "female" } else { "male" }.to_string());
    }
    ImageRecord {
        id: format!("{i:08}"),
        path: PathBuf::from(format!("k{keyword}/{i}.png")),
        keyword: format!("k{keyword}"),
        qualifier: None,
        annotations,
        face_present: None,
    }
}

fn manifest_strategy() -> impl Strategy<Value = DatasetManifest> {
    prop::collection::vec((0u8..4, prop::option::of(any::<bool>())), 1..40).prop_map(|rows| DatasetManifest {
        records: rows.into_iter().enumerate().map(|(i, (k, g))| record(i, k, g)).collect(),
        attribute_domain: BTreeMap::from([("gender".into(), vec!["female".into(), "male".into()])]),
    })
}

/// Deterministic stand-in detector: face count derived from the id.
fn faces(rec: &ImageRecord) -> Result<usize, String> {
    let n: usize = rec.id.parse().unwrap();
    match n % 5 {
        0 => Ok(0),
        4 => Err("detector failed".into()),
        k => Ok(k),
    }
}

proptest! {
    #[test]
    fn stats_ignore_record_order(m in manifest_strategy(), seed in any::<u64>()) {
        let mut shuffled = m.clone();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(shuffled.records.as_mut_slice(), &mut rng);
        prop_assert_eq!(representation_stats(&m, "gender").unwrap(), representation_stats(&shuffled, "gender").unwrap());
    }

    #[test]
    fn filter_is_idempotent(m in manifest_strategy()) {
        let once = filter_faceless(&m, faces).manifest;
        let twice = filter_faceless(&once, faces);
        prop_assert_eq!(twice.removed, 0);
        prop_assert_eq!(twice.manifest, once);
    }

    #[test]
    fn shares_sum_to_one(m in manifest_strategy()) {
        for row in representation_stats(&m, "gender").unwrap() {
            if row.n > 0 {
                let total: f64 = row.proportions.values().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            } else {
                prop_assert!(row.proportions.is_empty());
            }
        }
    }
}
