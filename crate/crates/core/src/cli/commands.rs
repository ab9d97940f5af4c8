use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::config::{RunConfig, SimulateSection};
use super::simulate::run_planted;
use super::{load_config, Cli, CliError};
use crate::codec::{self, Codec, TrainOptions};
use crate::dataset::{self, BuildOptions, DatasetManifest};
use crate::facegeom::{SkinToneDetector, SkinToneSegmenter};
use crate::image::ImagePlane;
use crate::probe::remote::{self, UreqTransport, REMOTE_BACKENDS};
use crate::probe::{
    probe_images, Backend, GridLookup, ProbeInput, ProbeOptions, ProbeStore, ReplayBackend, RetryPolicy, SimulatedBackend,
};
use crate::slopes::{self, Analysis, AnalysisOptions, ReportMetadata};
use crate::synth::{self, FacePipeline, SynthError};

pub const ANALYSIS_FILE: &str = "analysis.json";

fn io_data(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

/// Loads the manifest, or builds, annotates, face-filters and saves it when
/// it is missing (or `force` is set).
pub fn prepare_manifest(cfg: &RunConfig, force: bool, dry_run: bool) -> Result<DatasetManifest, CliError> {
    let path = &cfg.paths.manifest;
    if path.is_file() && !force {
        return Ok(DatasetManifest::load(path)?);
    }
    let opts = BuildOptions {
        duplicates: cfg.dataset.duplicates.into(),
    };
    let built = dataset::build_manifest_with(&cfg.paths.dataset_root, &cfg.dataset.keywords, &opts)?;
    if !built.skipped.is_empty() {
        log::warn!("{} files skipped while building the manifest", built.skipped.len());
    }
    let mut manifest = built.manifest;
    if let Some(a) = &cfg.paths.annotations {
        let s = dataset::load_annotations(&mut manifest, a, None)?;
        if s.unmatched > 0 {
            log::warn!("{} annotation rows name unknown image ids", s.unmatched);
        }
    }
    if cfg.dataset.filter_faceless {
        let out = dataset::filter_faceless_with(&manifest, &SkinToneDetector::default());
        for (id, msg) in &out.warnings {
            log::warn!("face detection failed on {id}: {msg}");
        }
        println!("face filter: removed {} of {} images", out.removed, manifest.records.len());
        manifest = out.manifest;
    }
    println!("manifest: {} images", manifest.records.len());
    if !dry_run {
        manifest.save(path)?;
    }
    Ok(manifest)
}

pub fn train(cfg: &RunConfig, cli: &Cli) -> Result<(), CliError> {
    let artifact = &cfg.paths.artifact;
    if artifact.is_file() && !cli.force {
        println!("artifact {} exists; skipping (use --force to retrain)", artifact.display());
        return Ok(());
    }
    let manifest = prepare_manifest(cfg, cli.force, cli.dry_run)?;
    let config = cfg.codec_config();
    if cli.dry_run {
        println!("would train {} steps on {} images", config.steps, manifest.records.len());
        return Ok(());
    }
    let mut report = |l: &codec::StepLosses| {
        log::info!(
            "step {}: reconstruction {:.6} discriminator {:.6} adversarial {:.6} lambda {:.4}",
            l.step,
            l.reconstruction,
            l.discriminator,
            l.adversarial,
            l.lambda
        );
    };
    let opts = TrainOptions {
        progress: Some(&mut report),
        ..TrainOptions::default()
    };
    let outcome = codec::train(&manifest, &cfg.attributes, &config, artifact, None, opts)?;
    if let Some(l) = outcome.history.last() {
        println!(
            "final step {}: reconstruction {:.9} discriminator {:.9} adversarial {:.9}",
            l.step, l.reconstruction, l.discriminator, l.adversarial
        );
    }
    println!("wrote {}", artifact.display());
    Ok(())
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct SynthSummary {
    pub written: usize,
    pub existing: usize,
    pub no_face: usize,
    pub failed: Vec<(String, String)>,
}

pub fn synthesize(cfg: &RunConfig, cli: &Cli) -> Result<(), CliError> {
    let s = synthesize_all(cfg, cli.force, cli.dry_run)?;
    println!(
        "series: {} written, {} already present, {} without a face, {} failed",
        s.written,
        s.existing,
        s.no_face,
        s.failed.len()
    );
    for (id, e) in &s.failed {
        eprintln!("  {id}: {e}");
    }
    if !s.failed.is_empty() {
        return Err(CliError::Data(format!("{} source images failed", s.failed.len())));
    }
    Ok(())
}

/// Synthesizes every source in parallel. Existing series are kept unless
/// `force` is set.
pub fn synthesize_all(cfg: &RunConfig, force: bool, dry_run: bool) -> Result<SynthSummary, CliError> {
    let manifest = prepare_manifest(cfg, false, dry_run)?;
    let grid = cfg.grid_values()?;
    let out = &cfg.paths.series_dir;
    let mut summary = SynthSummary::default();
    let mut todo = Vec::new();
    for rec in &manifest.records {
        if rec.face_present == Some(false) {
            summary.no_face += 1;
        } else if synth::series_exists(out, &rec.id) && !force {
            summary.existing += 1;
        } else {
            todo.push(rec);
        }
    }
    if dry_run {
        println!("would synthesize {} series of {} images", todo.len(), grid.len());
        return Ok(summary);
    }
    let codec = Codec::load(&cfg.paths.artifact)?;
    let detector = SkinToneDetector::default();
    let segmenter = SkinToneSegmenter;
    let pipeline = FacePipeline {
        detector: &detector,
        segmenter: &segmenter,
    };
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::new());
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(todo.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let Some(rec) = todo.get(next.fetch_add(1, Ordering::SeqCst)) else { break };
                let r = (|| -> Result<(), SynthError> {
                    let image = ImagePlane::load(&rec.path)?;
                    let (controlled, defaulted) = synth::controlled_values(&codec, rec)?;
                    let series = synth::synthesize_series(&rec.id, &image, &codec, &grid, &controlled, &pipeline)?;
                    let mut flags = series.flags.clone();
                    flags.defaulted_controlled = defaulted;
                    synth::write_series(&series, out, Some(rec), &flags)?;
                    Ok(())
                })();
                results.lock().expect("results lock").push((rec.id.clone(), r));
            });
        }
    });
    let mut results = results.into_inner().expect("results lock");
    results.sort_by(|a, b| a.0.cmp(&b.0));
    for (id, r) in results {
        match r {
            Ok(()) => summary.written += 1,
            Err(SynthError::NoFace) => summary.no_face += 1,
            Err(e) => summary.failed.push((id, e.to_string())),
        }
    }
    Ok(summary)
}

fn load_sidecars(cfg: &RunConfig) -> Result<Vec<(PathBuf, synth::SeriesSidecar)>, CliError> {
    let dir = &cfg.paths.series_dir;
    if !dir.is_dir() {
        return Err(CliError::Data(format!("series dir {} does not exist; run synthesize first", dir.display())));
    }
    Ok(synth::load_series_dir(dir)?)
}

/// The configured backend. The simulated backend reads grid values from the
/// series sidecars; labels without their own seed use the root seed.
pub fn make_backend(cfg: &RunConfig, sidecars: &[(PathBuf, synth::SeriesSidecar)]) -> Result<Box<dyn Backend>, CliError> {
    let p = &cfg.probe;
    match p.backend.as_str() {
        "simulated" => {
            if p.simulator.is_empty() {
                return Err(CliError::Config("backend `simulated` needs [[probe.simulator]] labels".into()));
            }
            let mut lookup = GridLookup::new();
            for (_, s) in sidecars {
                lookup.add_sidecar(s)?;
            }
            let specs = p
                .simulator
                .iter()
                .map(|s| {
                    let mut s = s.clone();
                    if s.seed == 0 {
                        s.seed = cfg.seed;
                    }
                    s
                })
                .collect();
            Ok(Box::new(SimulatedBackend::with_lookup("simulated", specs, lookup)?))
        }
        "replay" => {
            let f = p
                .replay_fixture
                .as_ref()
                .ok_or_else(|| CliError::Config("backend `replay` needs probe.replay_fixture".into()))?;
            Ok(Box::new(ReplayBackend::from_file(f)?))
        }
        name if REMOTE_BACKENDS.contains(&name) => {
            let transport = Arc::new(UreqTransport::new(Duration::from_secs(p.timeout_secs)));
            Ok(remote::from_env(name, transport)?)
        }
        other => Err(CliError::Config(format!("unknown backend `{other}`"))),
    }
}

pub fn probe(cfg: &RunConfig, cli: &Cli) -> Result<(), CliError> {
    let sidecars = load_sidecars(cfg)?;
    let mut inputs = Vec::new();
    for (dir, s) in &sidecars {
        for im in &s.images {
            let path = dir.join(&im.file);
            let input = ProbeInput::from_file(&path).map_err(|e| CliError::Data(e.to_string()))?;
            if input.digest != im.digest {
                return Err(CliError::Data(format!("{} changed since synthesis (digest mismatch)", path.display())));
            }
            inputs.push(input);
        }
    }
    if inputs.is_empty() {
        return Err(CliError::Data("no series images to probe".into()));
    }
    let backend = make_backend(cfg, &sidecars)?;
    if cli.dry_run {
        let cached = ProbeStore::open_read_only(&cfg.paths.store)
            .map(|s| inputs.iter().filter(|i| s.get(backend.id(), &i.digest).is_some()).count())
            .unwrap_or(0);
        println!("would probe {} images with {} ({} cached)", inputs.len(), backend.id(), cached);
        return Ok(());
    }
    let store = ProbeStore::open(&cfg.paths.store)?;
    let opts = ProbeOptions {
        rps: cfg.probe.rps,
        max_in_flight: cfg.probe.max_in_flight,
        retry: RetryPolicy {
            max_attempts: cfg.probe.max_attempts,
            ..RetryPolicy::default()
        },
        ..ProbeOptions::default()
    };
    let out = probe_images(&inputs, backend.as_ref(), &store, &opts);
    let pct = 100.0 * out.cache_hits as f64 / inputs.len() as f64;
    println!(
        "probed {} images with {}: {} network calls, {} cache hits ({pct:.1}%), {} failures",
        inputs.len(),
        backend.id(),
        out.network_calls,
        out.cache_hits,
        out.failures.len()
    );
    if !out.failures.is_empty() {
        for (id, e) in out.failures.iter().take(10) {
            eprintln!("  {id}: {e}");
        }
        return Err(CliError::Backend(format!(
            "{} images failed; completed records are stored, rerun to retry",
            out.failures.len()
        )));
    }
    Ok(())
}

pub fn analyze(cfg: &RunConfig, cli: &Cli) -> Result<(), CliError> {
    let sidecars = load_sidecars(cfg)?;
    let records = ProbeStore::open_read_only(&cfg.paths.store)
        .map(|s| s.records())
        .unwrap_or_default();
    if records.is_empty() {
        return Err(CliError::Data(format!("no records in store {}", cfg.paths.store.display())));
    }
    let sidecars: Vec<_> = sidecars.into_iter().map(|(_, s)| s).collect();
    let series = slopes::join_series(&sidecars, &records)?;
    let analysis = slopes::analyze(&series, &cfg.analysis.options())?;
    for (backend, n) in &analysis.series_per_backend {
        let fitted = analysis.slopes.iter().filter(|s| &s.backend == backend).count();
        let kept = analysis.retained().iter().filter(|s| &s.backend == backend).count();
        println!("{backend}: {n} series, {fitted} labels fitted, {kept} pass the filter");
    }
    println!("{} exclusions", analysis.exclusions.len());
    if cli.dry_run {
        return Ok(());
    }
    let path = cfg.paths.report_dir.join(ANALYSIS_FILE);
    let json = serde_json::to_string_pretty(&analysis).expect("analysis serializes") + "\n";
    crate::fsutil::write_atomic(&path, json.as_bytes()).map_err(io_data(&path))?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn report_metadata(cfg: &RunConfig) -> ReportMetadata {
    let mut store_digests = BTreeMap::new();
    if let Ok(store) = ProbeStore::open_read_only(&cfg.paths.store) {
        if let Ok(d) = store.digest() {
            store_digests.insert(cfg.paths.store.display().to_string(), d);
        }
    }
    let sensitive = cfg.sensitive().ok();
    ReportMetadata {
        attribute: sensitive.map(|s| s.name.clone()),
        endpoints: sensitive.map(|s| s.values.clone()),
        store_digests,
        seed: Some(cfg.seed),
    }
}

pub fn report(cli: &Cli, slopes_file: Option<&Path>, out: Option<&Path>) -> Result<(), CliError> {
    let cfg = match (&cli.config, slopes_file) {
        (None, Some(_)) => None,
        _ => Some(load_config(cli)?),
    };
    let out_dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.as_ref().map(|c| c.paths.report_dir.clone()))
        .ok_or_else(|| CliError::Config("--out is required without --config".into()))?;
    let options = cfg.as_ref().map(|c| c.analysis.options()).unwrap_or_default();
    let analysis = match slopes_file {
        Some(f) => Analysis::from_slopes(slopes::load_slopes_json(f)?, options),
        None => {
            let cfg = cfg.as_ref().expect("config loaded");
            let path = cfg.paths.report_dir.join(ANALYSIS_FILE);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Data(format!("{}: {e} (run analyze first)", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        }
    };
    let meta = cfg.as_ref().map(report_metadata).unwrap_or_default();
    if cli.dry_run {
        println!("would write a report with {} retained slopes to {}", analysis.retained().len(), out_dir.display());
        return Ok(());
    }
    let files = slopes::report(&analysis, &meta, &out_dir)?;
    println!(
        "report: {} retained slopes, {} tables, {} curves, {} exclusions in {}",
        analysis.retained().len(),
        files.tables.len(),
        files.curves.len(),
        analysis.exclusions.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn simulate(cli: &Cli, n_series: Option<usize>, out: Option<&Path>) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(_) => Some(load_config(cli)?),
        None => None,
    };
    let mut section = cfg.as_ref().map(|c| c.simulate.clone()).unwrap_or_else(SimulateSection::default);
    if let Some(n) = n_series {
        section.n_series = n;
    }
    if let Some(s) = cli.seed {
        section.seeds = vec![s];
    }
    let grid = match &cfg {
        Some(c) => c.grid_values()?,
        None => synth::AttributeGrid::new("attribute", 7, -2.0, 2.0)?,
    };
    let options = cfg.as_ref().map(|c| c.analysis.options()).unwrap_or_else(AnalysisOptions::default);
    let work = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.as_ref().map(|c| c.paths.report_dir.join("simulate")))
        .unwrap_or_else(|| PathBuf::from("simulate-out"));
    if cli.dry_run {
        println!(
            "would run {} seeds x {} series x {} grid points into {}",
            section.seeds.len(),
            section.n_series,
            grid.len(),
            work.display()
        );
        return Ok(());
    }
    let mut csv = String::from("seed,label,planted_beta1,slope,p_value,retained,ok\n");
    let mut all_ok = true;
    println!("{:>5}  {:<20} {:>8} {:>10} {:>10}  verdict", "seed", "label", "planted", "recovered", "p_value");
    for &seed in &section.seeds {
        let run = run_planted(&section.labels, &grid, section.n_series, seed, &options, &work)?;
        for r in &run.rows {
            println!(
                "{seed:>5}  {:<20} {:>8.3} {:>10.4} {:>10.2e}  {}",
                r.label,
                r.beta1,
                r.slope,
                r.p_value,
                if r.ok { "ok" } else { "MISMATCH" }
            );
            csv += &format!("{seed},{},{},{},{},{},{}\n", r.label, r.beta1, r.slope, r.p_value, r.retained, r.ok);
        }
        println!("{seed:>5}  ordering {}", if run.ordering_ok { "matches" } else { "DOES NOT MATCH" });
        all_ok &= run.passed();
    }
    let path = work.join("simulate.csv");
    crate::fsutil::write_atomic(&path, csv.as_bytes()).map_err(io_data(&path))?;
    if all_ok {
        println!("planted slopes recovered on every seed");
        Ok(())
    } else {
        Err(CliError::Check("recovered slopes disagree with the planted ones".into()))
    }
}

pub fn stats(cfg: &RunConfig, cli: &Cli, attribute: Option<&str>) -> Result<(), CliError> {
    let manifest = prepare_manifest(cfg, false, cli.dry_run)?;
    let attr = match attribute {
        Some(a) => a.to_string(),
        None => cfg.sensitive()?.name.clone(),
    };
    let rows = dataset::representation_stats(&manifest, &attr)?;
    let domain = manifest.attribute_domain[&attr].clone();
    print!("{:<28} {:>6}", "keyword", "n");
    for v in &domain {
        print!(" {v:>10}");
    }
    println!();
    for r in &rows {
        print!("{:<28} {:>6}", r.keyword, r.n);
        for v in &domain {
            match r.proportions.get(v) {
                Some(p) => print!(" {p:>10.3}"),
                None => print!(" {:>10}", "-"),
            }
        }
        println!();
    }
    if !cli.dry_run {
        let path = cfg.paths.report_dir.join(format!("representation_{attr}.csv"));
        let csv = dataset::representation_csv(&rows, &domain)?;
        crate::fsutil::write_atomic(&path, csv.as_bytes()).map_err(io_data(&path))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
