//! Detects the primary face, segments its skin and pastes an edited crop
//! back so that only skin pixels change.
//!
//! ```text
//! cargo run --example detect_and_composite -- [out_dir]
//! ```

use std::path::PathBuf;

use cfaudit::facegeom::{composite, detect_faces, segment_skin, select_primary_face, SkinToneDetector, SkinToneSegmenter};
use cfaudit::synth::CROP_MARGIN;
use cfaudit::toy;

fn main() {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("cfaudit-composite"));
    let sample = toy::generate(96, 7, 0);
    let image = &sample.image;

    let faces = detect_faces(&SkinToneDetector::default(), image).unwrap();
    println!("{} candidate faces", faces.len());
    let face = select_primary_face(&faces, image.width(), image.height()).unwrap();
    let crop_box = face.expanded(CROP_MARGIN, image.width(), image.height());
    println!("primary face {face:?}\ncrop {crop_box:?}");

    let crop = image.crop(crop_box.x, crop_box.y, crop_box.w, crop_box.h).unwrap();
    let seg = segment_skin(&SkinToneSegmenter, &crop);
    println!("skin pixels {} of {} (fallback mask: {})", seg.mask.count(), crop_box.w * crop_box.h, seg.fallback);

    // Stand-in for a decoded crop: shift the whole crop toward blue.
    let mut edited = crop.clone();
    for y in 0..edited.height() {
        for x in 0..edited.width() {
            let p = edited.pixel_mut(x, y);
            p[0] = (p[0] - 0.15).max(0.0);
            p[2] = (p[2] + 0.15).min(1.0);
        }
    }
    let result = composite(image, &edited, &seg.mask, &crop_box).unwrap();

    let mut changed = 0;
    let mut outside_changed = 0;
    for y in 0..image.height() {
        for x in 0..image.width() {
            if result.pixel(x, y) != image.pixel(x, y) {
                changed += 1;
                let inside = crop_box.contains(x as f64, y as f64) && seg.mask.get(x - crop_box.x, y - crop_box.y);
                if !inside {
                    outside_changed += 1;
                }
            }
        }
    }
    println!("{changed} pixels changed, {outside_changed} of them outside the skin mask");

    image.save(&out.join("source.png")).unwrap();
    result.save(&out.join("composited.png")).unwrap();
    println!("wrote {}", out.display());
}
