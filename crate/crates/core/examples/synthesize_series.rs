//! Trains a small codec on face proxies, then writes counterfactual series
//! for held-out images and checks that the edited attribute moves
//! monotonically along the grid.
//!
//! ```text
//! cargo run --release --example synthesize_series -- [steps] [out_dir]
//! ```

use std::path::PathBuf;

use cfaudit::codec::{train_on, AttributeVector, Codec, CodecConfig, TrainOptions, TrainState, TrainingSet};
use cfaudit::facegeom::{SkinToneDetector, SkinToneSegmenter};
use cfaudit::synth::{synthesize_series, write_series, AttributeGrid, FacePipeline};
use cfaudit::toy;

const SOURCE_SIZE: usize = 96;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args.first().map(|s| s.parse().unwrap()).unwrap_or(600);
    let out = args
        .get(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("cfaudit-series"));

    let config = CodecConfig {
        steps,
        ..CodecConfig::default()
    };
    let items: Vec<_> = (0..300u64)
        .map(|i| {
            let s = toy::generate(config.resolution, 1, i);
            (format!("train-{i}"), s.image.clone(), toy::labels(&s))
        })
        .collect();
    let set = TrainingSet::from_images(&config, &toy::toy_specs(), &items).unwrap();
    let state = TrainState::new(Codec::new(config, toy::toy_specs()).unwrap());
    let codec = train_on(state, &set, TrainOptions::default()).unwrap().state.codec;
    println!("trained {steps} steps");

    let grid = AttributeGrid::new(toy::SENSITIVE, 7, -2.0, 2.0).unwrap();
    let detector = SkinToneDetector::default();
    let segmenter = SkinToneSegmenter;
    let pipeline = FacePipeline {
        detector: &detector,
        segmenter: &segmenter,
    };
    for i in 0..4u64 {
        let sample = toy::generate(SOURCE_SIZE, 2, i);
        let controlled = AttributeVector::new().with(toy::CONTROLLED, sample.controlled);
        let id = format!("heldout-{i}");
        let series = synthesize_series(&id, &sample.image, &codec, &grid, &controlled, &pipeline).unwrap();
        let sidecar = write_series(&series, &out, None, &series.flags).unwrap();
        let scores: Vec<f64> = series.images.iter().map(|img| toy::attribute_score(img, &sample)).collect();
        println!(
            "{id}: scores {:?} spearman {:.3} fallback mask {}",
            scores.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>(),
            toy::spearman(grid.values(), &scores),
            sidecar.flags.fallback_mask
        );
    }
    println!("wrote {}", out.display());
}
