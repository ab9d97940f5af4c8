//! Builds an image manifest from a keyword-per-directory tree, attaches
//! annotations and drops images without a detectable face.
//!
//! ```text
//! cargo run --example build_manifest -- [image_root annotations.csv]
//! ```
//! Without arguments a small synthetic tree is generated first.

use std::path::PathBuf;

use cfaudit::dataset::{build_manifest, filter_faceless_with, load_annotations};
use cfaudit::facegeom::SkinToneDetector;
use cfaudit::toy;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (root, annotations) = match args.as_slice() {
        [root, ann] => (PathBuf::from(root), PathBuf::from(ann)),
        _ => {
            let dir = std::env::temp_dir().join("cfaudit-build-manifest");
            let toy = toy::write_dataset(&dir, 24, 64, 3, &["nurse", "carpenter", "librarian"]).unwrap();
            println!("generated {} images under {}", toy.manifest.records.len(), toy.root.display());
            (toy.root, toy.annotations)
        }
    };

    let built = build_manifest(&root, &[]).unwrap();
    println!("{} images, {} unreadable files skipped", built.manifest.records.len(), built.skipped.len());
    let mut manifest = built.manifest;

    let summary = load_annotations(&mut manifest, &annotations, None).unwrap();
    println!("{} annotations applied, {} rows for unknown ids", summary.applied, summary.unmatched);
    for (attr, values) in &manifest.attribute_domain {
        println!("  {attr}: {}", values.join(" / "));
    }

    let filtered = filter_faceless_with(&manifest, &SkinToneDetector::default());
    println!("face filter removed {} images ({} detector warnings)", filtered.removed, filtered.warnings.len());
    for r in filtered.manifest.records.iter().take(3) {
        println!("  {} {} {:?}", &r.id[..12], r.keyword, r.annotations);
    }

    let out = root.with_file_name("manifest.json");
    filtered.manifest.save(&out).unwrap();
    println!("wrote {}", out.display());
}
