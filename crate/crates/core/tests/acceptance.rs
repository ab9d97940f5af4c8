//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Run with `cargo test --release --test acceptance`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cfaudit::cli::config::SimulateSection;
use cfaudit::cli::run_planted;
use cfaudit::codec::{
    chance_rate, discriminator_accuracy, reconstruction_loss, reconstruction_loss_and_grad, train_on, AttributeVector, Codec,
    CodecConfig, TrainOptions, TrainState, TrainingSet,
};
use cfaudit::dataset::{representation_stats, DatasetManifest};
use cfaudit::facegeom::{composite, FaceBox, SkinMask};
use cfaudit::image::ImagePlane;
use cfaudit::probe::{probe_images, BiasSimSpec, GridLookup, ProbeInput, ProbeOptions, ProbeStore, SimulatedBackend};
use cfaudit::slopes::{analyze, load_slopes_json, ols_fit, report, Analysis, AnalysisOptions, ReportMetadata};
use cfaudit::synth::AttributeGrid;
use cfaudit::toy;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn planted_recovery() -> Outcome {
    let started = Instant::now();
    let defaults = SimulateSection::default();
    let grid = AttributeGrid::new("a", 7, -2.0, 2.0).unwrap();
    let work = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut ok = true;
    for seed in [1, 2, 3] {
        let run = run_planted(&defaults.labels, &grid, 200, seed, &AnalysisOptions::default(), work.path()).map_err(|e| e.to_string())?;
        ok &= run.passed();
        let slopes: Vec<String> = run.rows.iter().map(|r| format!("{:+.3}", r.slope)).collect();
        notes.push(format!("seed {seed} [{}]", slopes.join(" ")));
    }
    let elapsed = started.elapsed();
    ok &= elapsed <= Duration::from_secs(120);
    check(ok, format!("{} in {:.1}s", notes.join(", "), elapsed.as_secs_f64()))
}

fn ols_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_slope: f64 = 0.0;
    let mut worst_t: f64 = 0.0;
    for i in 0..100 {
        let k = if i % 2 == 0 { 5 } else { 7 };
        let x: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..2.0)).collect();
        let fit = ols_fit(&x, &y).map_err(|e| e.to_string())?;
        let oracle = common::textbook_ols(&x, &y);
        worst_slope = worst_slope.max((fit.slope - oracle.slope).abs());
        worst_t = worst_t.max((fit.t_stat - oracle.t_stat).abs());
    }
    check(
        worst_slope <= 1e-9 && worst_t <= 1e-9,
        format!("max |slope error| {worst_slope:.1e}, max |t error| {worst_t:.1e} over 100 sets"),
    )
}

fn normalization() -> Outcome {
    use cfaudit::probe::LabelPrediction;
    use cfaudit::slopes::{ExclusionReason, SeriesProbe};
    use cfaudit::synth::SeriesFlags;

    let grid = AttributeGrid::new("gender", 7, -2.0, 2.0).unwrap();
    let patterns: [(&str, [usize; 7]); 4] = [
        ("tie", [9, 8, 7, 6, 5, 4, 3]),
        ("veil", [0, 0, 0, 0, 1, 3, 6]),
        ("centre only", [0, 0, 0, 4, 0, 0, 0]),
        ("lipstick", [0, 1, 2, 0, 4, 5, 6]),
    ];
    let series: Vec<SeriesProbe> = (0..10)
        .map(|i| SeriesProbe {
            backend: "sim".into(),
            source_id: format!("s{i}"),
            grid: grid.clone(),
            flags: SeriesFlags::default(),
            predictions: (0..7)
                .map(|k| {
                    Some(
                        patterns
                            .iter()
                            .filter(|(_, c)| i < c[k])
                            .map(|(l, _)| LabelPrediction::new(l, true, Some(0.9)).unwrap())
                            .collect(),
                    )
                })
                .collect(),
        })
        .collect();
    let analysis = analyze(&series, &AnalysisOptions::default()).map_err(|e| e.to_string())?;
    let mut ok = true;
    for curve in &analysis.curves {
        if curve.rates.y[3] > 0.0 {
            ok &= curve.normalized.as_ref().is_some_and(|n| n.z[3] == 1.0);
        }
    }
    let excluded: Vec<&str> = analysis
        .exclusions
        .iter()
        .filter(|e| e.reason == ExclusionReason::NormalizationUndefined)
        .filter_map(|e| e.label.as_deref())
        .collect();
    ok &= excluded == ["lipstick", "veil"];

    let out = tempfile::tempdir().unwrap();
    let files = report(&analysis, &ReportMetadata::default(), out.path()).map_err(|e| e.to_string())?;
    let mut tables = vec![files.slopes_csv.clone(), out.path().join("all_slopes.csv")];
    tables.extend(files.tables.iter().cloned());
    for t in &tables {
        let text = std::fs::read_to_string(t).map_err(|e| e.to_string())?;
        ok &= !excluded.iter().any(|l| text.contains(l));
    }
    let exclusions = std::fs::read_to_string(&files.exclusions_csv).map_err(|e| e.to_string())?;
    ok &= excluded.iter().all(|l| exclusions.contains(l));
    check(
        ok,
        format!("z_c = 1 for {} fitted labels; excluded {excluded:?} from every slope table", analysis.slopes.len()),
    )
}

fn grid_exactness() -> Outcome {
    let g = AttributeGrid::new("a", 7, -2.0, 2.0).unwrap();
    let formula: Vec<f64> = (0..7).map(|i| -2.0 + 4.0 * i as f64 / 6.0).collect();
    let rational = [-2.0, -4.0 / 3.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, 4.0 / 3.0, 2.0];
    let mut ok = g.values() == formula.as_slice();
    ok &= g.values().iter().zip(rational).all(|(v, r)| (v - r).abs() <= f64::EPSILON * 2.0);
    for k in [3, 5, 7, 9, 11, 21] {
        for half in [0.1, 0.3, 1.0, 2.0, 7.7] {
            let s = AttributeGrid::new("a", k, -half, half).unwrap();
            ok &= s.values()[k / 2] == 0.0 && s.values()[k / 2].is_sign_positive();
        }
    }
    check(ok, format!("{:?}", g.values()))
}

fn compositing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut masked_pixels = 0usize;
    for i in 0..50 {
        let (w, h) = (rng.random_range(8..48), rng.random_range(8..48));
        let c = if i % 3 == 0 { 1 } else { 3 };
        let image = ImagePlane::from_fn(w, h, c, |_, _, _| rng.random::<f32>()).unwrap();
        let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
        let (bw, bh) = (rng.random_range(1..=w - x), rng.random_range(1..=h - y));
        let b = FaceBox::new(x, y, bw, bh, 1.0);
        let edited = ImagePlane::from_fn(bw, bh, c, |_, _, _| rng.random::<f32>()).unwrap();
        let density = rng.random::<f64>();
        let mask = SkinMask::from_fn(bw, bh, |_, _| rng.random::<f64>() < density);
        let out = composite(&image, &edited, &mask, &b).map_err(|e| e.to_string())?;
        let oracle = common::composite_oracle(&image, &edited, &mask, &b);
        if out.data().iter().zip(oracle.data()).any(|(a, o)| a.to_bits() != o.to_bits()) {
            return Err(format!("fixture {i}: output differs from the per-pixel oracle"));
        }
        for py in 0..h {
            for px in 0..w {
                let inside = b.contains(px as f64, py as f64) && mask.get(px - x, py - y);
                if !inside {
                    masked_pixels += 1;
                    let same = out.pixel(px, py).iter().zip(image.pixel(px, py)).all(|(a, o)| a.to_bits() == o.to_bits());
                    if !same {
                        return Err(format!("fixture {i}: pixel ({px}, {py}) changed outside the mask"));
                    }
                }
            }
        }
    }
    Ok(format!("50 fixtures, {masked_pixels} unmasked pixels bit-identical, oracle agrees"))
}

fn toy_set(config: &CodecConfig, seed: u64, n: usize) -> (TrainingSet, Vec<toy::ToySample>) {
    let samples: Vec<_> = (0..n as u64).map(|i| toy::generate(config.resolution, seed, i)).collect();
    let items: Vec<_> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("{seed}-{i}"), s.image.clone(), toy::labels(s)))
        .collect();
    (TrainingSet::from_images(config, &toy::toy_specs(), &items).unwrap(), samples)
}

fn codec_training() -> Outcome {
    let started = Instant::now();
    let base = CodecConfig {
        steps: 2000,
        ..CodecConfig::default()
    };
    let (train, _) = toy_set(&base, 1, 500);
    let (held, held_samples) = toy_set(&base, 2, 200);
    let chance = chance_rate(&held)[0];

    let fit = |lambda: f64| {
        let config = CodecConfig {
            lambda_max: lambda,
            ..base.clone()
        };
        let state = TrainState::new(Codec::new(config, toy::toy_specs()).unwrap());
        let initial = state.reconstruction_mse(&train);
        let state = train_on(state, &train, TrainOptions::default()).unwrap().state;
        let final_mse = state.reconstruction_mse(&train);
        (state.codec, initial, final_mse)
    };
    let (codec, initial, final_mse) = fit(base.lambda_max);
    let drop = 1.0 - final_mse / initial;
    let acc = discriminator_accuracy(&codec, &held)[0];
    let (ablation, _, _) = fit(0.0);
    let acc_ablation = discriminator_accuracy(&ablation, &held)[0];

    let grid = AttributeGrid::new(toy::SENSITIVE, 7, -2.0, 2.0).unwrap();
    let mut rho = 0.0;
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
        rho += toy::spearman(grid.values(), &scores) / 20.0;
    }
    let elapsed = started.elapsed();
    let ok = drop >= 0.5
        && (acc - chance).abs() <= 0.10
        && acc_ablation >= chance + 0.15
        && rho >= 0.9
        && elapsed <= Duration::from_secs(15 * 60);
    check(
        ok,
        format!(
            "mse drop {:.1}%, discriminator {acc:.3} vs chance {chance:.3} (ablation {acc_ablation:.3}), spearman {rho:.3}, {:.0}s",
            100.0 * drop,
            elapsed.as_secs_f64()
        ),
    )
}

fn gradient_check() -> Outcome {
    let config = CodecConfig {
        seed: 17,
        ..CodecConfig::tiny(8, 6)
    };
    let (set, _) = toy_set(&config, 3, 6);
    let (x, attrs) = set.select(&(0..6).collect::<Vec<_>>());
    let mut codec = Codec::new(config, toy::toy_specs()).unwrap();
    let (_, grad) = reconstruction_loss_and_grad(&codec, &x, &attrs);
    let params = codec.autoencoder_params();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let i = rng.random_range(0..params.len());
        codec.set_autoencoder_param(i, params[i] + h);
        let up = reconstruction_loss(&codec, &x, &attrs);
        codec.set_autoencoder_param(i, params[i] - h);
        let down = reconstruction_loss(&codec, &x, &attrs);
        codec.set_autoencoder_param(i, params[i]);
        let fd = (up - down) / (2.0 * h);
        let scale = fd.abs().max(grad[i].abs());
        let rel = if scale < 1e-10 { 0.0 } else { (fd - grad[i]).abs() / scale };
        worst = worst.max(rel);
    }
    check(worst <= 1e-3, format!("max relative error {worst:.2e} over 20 coordinates"))
}

fn cache_idempotency() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let grid = AttributeGrid::new("a", 7, -2.0, 2.0).unwrap();
    let mut lookup = GridLookup::new();
    let mut inputs = Vec::new();
    for s in 0..6u64 {
        for (k, &a) in grid.values().iter().enumerate() {
            let path = dir.path().join(format!("series{s}/a_{}.png", k + 1));
            toy::render(32, s, 0, a, 1.0).image.save(&path).unwrap();
            let input = ProbeInput::from_file(&path).unwrap();
            lookup.insert(&input.digest, a).map_err(|e| e.to_string())?;
            inputs.push(input);
        }
    }
    let spec = BiasSimSpec {
        label: "uniform".into(),
        beta0: 0.0,
        beta1: 0.5,
        seed: 1,
        deterministic: false,
    };
    let backend = SimulatedBackend::with_lookup("sim", vec![spec], lookup).map_err(|e| e.to_string())?;
    let store_dir = dir.path().join("store");
    let lines = || std::fs::read_to_string(store_dir.join("records.jsonl")).unwrap().lines().count();
    let store = ProbeStore::open(&store_dir).map_err(|e| e.to_string())?;
    let first = probe_images(&inputs, &backend, &store, &ProbeOptions::default());
    let before = lines();
    drop(store);
    let store = ProbeStore::open(&store_dir).map_err(|e| e.to_string())?;
    let second = probe_images(&inputs, &backend, &store, &ProbeOptions::default());
    let after = lines();
    let ok = first.network_calls == inputs.len()
        && second.network_calls == 0
        && second.records.iter().all(|r| r.from_cache)
        && second.records.len() == inputs.len()
        && before == after;
    check(
        ok,
        format!(
            "first pass {} calls, re-probe {} calls and {} cached records, store lines {before} -> {after}",
            first.network_calls,
            second.network_calls,
            second.records.iter().filter(|r| r.from_cache).count()
        ),
    )
}

fn report_fixture() -> Outcome {
    let slopes = load_slopes_json(&common::fixture("google_female_slopes.json")).map_err(|e| e.to_string())?;
    let out = tempfile::tempdir().unwrap();
    let files = report(
        &Analysis::from_slopes(slopes, AnalysisOptions::default()),
        &ReportMetadata::default(),
        out.path(),
    )
    .map_err(|e| e.to_string())?;
    let mut reader = csv::Reader::from_path(&files.slopes_csv).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        rows.push((rec[1].to_string(), rec[2].parse::<f64>().map_err(|e| e.to_string())?));
    }
    let expected = [
        ("fashion model", -0.262),
        ("model", -0.261),
        ("secretary", -0.14),
        ("nurse", -0.073),
    ];
    let ok = rows.len() == expected.len() && rows.iter().zip(expected).all(|((l, s), (el, es))| l == el && *s == es);
    check(ok, format!("{rows:?}"))
}

fn representation() -> Outcome {
    let toy_manifest = DatasetManifest::load(&common::fixture("toy_manifest.json")).map_err(|e| e.to_string())?;
    let rows = representation_stats(&toy_manifest, "gender").map_err(|e| e.to_string())?;
    let tally = [("baker", 4, 0.75, 0.25), ("pilot", 3, 1.0 / 3.0, 2.0 / 3.0)];
    let mut ok = rows.len() == tally.len();
    for (row, (kw, n, f, m)) in rows.iter().zip(tally) {
        ok &= row.keyword == kw && row.n == n && row.proportions["female"] == f && row.proportions["male"] == m;
    }
    let counts = representation_stats(&common::counts_manifest(), "gender").map_err(|e| e.to_string())?;
    let nutritionist = counts.iter().find(|r| r.keyword == "nutritionist").map(|r| r.proportions["female"]);
    ok &= nutritionist == Some(0.921);
    check(ok, format!("toy tally exact; nutritionist female share {nutritionist:?}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("planted-bias recovery", planted_recovery),
        ("OLS oracle equivalence", ols_oracle),
        ("normalization exactness", normalization),
        ("grid exactness", grid_exactness),
        ("mask compositing", compositing),
        ("toy codec training", codec_training),
        ("gradient check", gradient_check),
        ("cache idempotency", cache_idempotency),
        ("report fixture", report_fixture),
        ("representation stats", representation),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
