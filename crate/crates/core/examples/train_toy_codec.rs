//! Trains the attribute codec on procedurally generated face proxies and
//! reports reconstruction, latent invariance and attribute control.
//!
//! ```text
//! cargo run --release --example train_toy_codec -- [steps] [lambda_max] [n_train]
//! ```

use std::time::Instant;

use cfaudit::codec::{
    chance_rate, discriminator_accuracy, train_on, AttributeVector, Codec, CodecConfig, TrainOptions, TrainState,
    TrainingSet,
};
use cfaudit::synth::AttributeGrid;
use cfaudit::toy;

fn dataset(config: &CodecConfig, seed: u64, n: usize) -> (TrainingSet, Vec<toy::ToySample>) {
    let samples: Vec<_> = (0..n as u64).map(|i| toy::generate(config.resolution, seed, i)).collect();
    let items: Vec<_> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("{seed}-{i}"), s.image.clone(), toy::labels(s)))
        .collect();
    (TrainingSet::from_images(config, &toy::toy_specs(), &items).unwrap(), samples)
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args.first().map(|s| s.parse().unwrap()).unwrap_or(2000);
    let lambda: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(CodecConfig::default().lambda_max);
    let n_train: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(500);

    let config = CodecConfig {
        steps,
        lambda_max: lambda,
        ..CodecConfig::default()
    };
    let (train, _) = dataset(&config, 1, n_train);
    let (held, held_samples) = dataset(&config, 2, 200);

    let state = TrainState::new(Codec::new(config.clone(), toy::toy_specs()).unwrap());
    let initial = state.reconstruction_mse(&train);
    let started = Instant::now();
    let mut log = |l: &cfaudit::codec::StepLosses| {
        println!(
            "step {:5}  recon {:.5}  adv {:.4}  dis {:.4}  lambda {:.4}",
            l.step, l.reconstruction, l.adversarial, l.discriminator, l.lambda
        );
    };
    let outcome = train_on(
        state,
        &train,
        TrainOptions {
            log_every: 250,
            progress: Some(&mut log),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let codec = &outcome.state.codec;
    let elapsed = started.elapsed();

    let final_mse = outcome.state.reconstruction_mse(&train);
    println!(
        "reconstruction mse {initial:.5} -> {final_mse:.5} ({:.1}% drop) in {:.1}s",
        100.0 * (1.0 - final_mse / initial),
        elapsed.as_secs_f64()
    );
    let acc = discriminator_accuracy(codec, &held);
    let chance = chance_rate(&held);
    for (spec, (a, c)) in codec.specs.iter().zip(acc.iter().zip(&chance)) {
        println!("held-out discriminator accuracy {}: {a:.3} (chance {c:.3})", spec.name);
    }

    let probe = cfaudit::codec::fresh_probe_accuracy(codec, &train, &held, 1500, 7);
    for (spec, a) in codec.specs.iter().zip(&probe) {
        println!("held-out fresh probe accuracy {}: {a:.3}", spec.name);
    }

    let grid = AttributeGrid::new(toy::SENSITIVE, 7, -2.0, 2.0).unwrap();
    let mut rho_sum = 0.0;
    for s in held_samples.iter().take(20) {
        let z = codec.encode(&s.image).unwrap();
        let scores: Vec<f64> = grid
            .values()
            .iter()
            .map(|&a| {
                let attrs = AttributeVector::new().with(toy::SENSITIVE, a).with(toy::CONTROLLED, s.controlled);
                toy::attribute_score(&codec.decode(&z, &attrs).unwrap(), s)
            })
            .collect();
        rho_sum += toy::spearman(grid.values(), &scores);
    }
    println!("mean spearman over 20 held-out sweeps: {:.3}", rho_sum / 20.0);
}
