mod common;

use cfaudit::facegeom::{composite, select_primary_face, FaceBox, SkinMask};
use cfaudit::image::ImagePlane;
use proptest::prelude::*;

/// Random image, box inside it, crop-sized mask and a crop-sized edit.
fn fixture_strategy() -> impl Strategy<Value = (ImagePlane, FaceBox, SkinMask, ImagePlane)> {
    (4usize..24, 4usize..24, prop_oneof![Just(1usize), Just(3)], any::<u64>())
        .prop_flat_map(|(w, h, c, seed)| (Just((w, h, c, seed)), 0..w, 0..h))
        .prop_flat_map(|((w, h, c, seed), x, y)| (Just((w, h, c, seed, x, y)), 1..=w - x, 1..=h - y))
        .prop_map(|((w, h, c, seed, x, y), bw, bh)| {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let mut draw = || rand::Rng::random::<f32>(&mut rng);
            let image = ImagePlane::from_fn(w, h, c, |_, _, _| draw()).unwrap();
            let edited = ImagePlane::from_fn(bw, bh, c, |_, _, _| draw()).unwrap();
            let mask = SkinMask::from_fn(bw, bh, |_, _| draw() < 0.5);
            (image, FaceBox::new(x, y, bw, bh, 1.0), mask, edited)
        })
}

fn face_strategy() -> impl Strategy<Value = FaceBox> {
    (0usize..20, 0usize..20, 1usize..12, 1usize..12, 0u8..4).prop_map(|(x, y, w, h, s)| FaceBox::new(x, y, w, h, s as f32 / 4.0))
}

proptest! {
    #[test]
    fn composite_matches_pixel_oracle((image, b, mask, edited) in fixture_strategy()) {
        let out = composite(&image, &edited, &mask, &b).unwrap();
        let oracle = common::composite_oracle(&image, &edited, &mask, &b);
        prop_assert_eq!(out.data().len(), oracle.data().len());
        for (o, e) in out.data().iter().zip(oracle.data()) {
            prop_assert_eq!(o.to_bits(), e.to_bits());
        }
    }

    #[test]
    fn unmasked_pixels_are_untouched((image, b, mask, edited) in fixture_strategy()) {
        let out = composite(&image, &edited, &mask, &b).unwrap();
        for y in 0..image.height() {
            for x in 0..image.width() {
                let inside = x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h;
                if !(inside && mask.get(x - b.x, y - b.y)) {
                    prop_assert_eq!(out.pixel(x, y), image.pixel(x, y));
                }
            }
        }
    }

    #[test]
    fn compositing_the_unedited_crop_is_identity((image, b, mask, _) in fixture_strategy()) {
        let crop = image.crop(b.x, b.y, b.w, b.h).unwrap();
        prop_assert_eq!(composite(&image, &crop, &mask, &b).unwrap(), image);
    }

    #[test]
    fn primary_face_ignores_list_order(faces in prop::collection::vec(face_strategy(), 1..8), seed in any::<u64>()) {
        let mut shuffled = faces.clone();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let a = select_primary_face(&faces, 32, 32).unwrap();
        let b = select_primary_face(&shuffled, 32, 32).unwrap();
        // Equal centre distance and area can only differ in score or exact placement.
        let key = |f: &FaceBox| ((f.center().0 - 16.0).powi(2) + (f.center().1 - 16.0).powi(2), f.area());
        prop_assert_eq!(key(&a), key(&b));
        if faces.iter().filter(|f| key(f) == key(&a)).all(|f| *f == a) {
            prop_assert_eq!(a, b);
        }
    }
}
