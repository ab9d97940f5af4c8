//! Planted-bias check: series of small procedural images, a simulated
//! backend with known `σ(β0 + β1·a)` labels, and the full probe, join and
//! slope path. Recovered slopes must match the planted signs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::PlantedLabel;
use super::CliError;
use crate::codec::AttributeVector;
use crate::image::ImagePlane;
use crate::probe::{probe_images, BiasSimSpec, GridLookup, ProbeInput, ProbeOptions, ProbeStore, SimulatedBackend};
use crate::slopes::{analyze, join_series, AnalysisOptions};
use crate::synth::{image_file_name, AttributeGrid, SeriesFlags, SeriesImage, SeriesSidecar};

pub const SIM_BACKEND: &str = "simulated";
const SIM_IMAGE_SIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlantedRow {
    pub label: String,
    pub beta1: f64,
    pub slope: f64,
    pub p_value: f64,
    pub retained: bool,
    /// Sign and significance agree with the planted coefficient.
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlantedRun {
    pub seed: u64,
    pub n_series: usize,
    pub rows: Vec<PlantedRow>,
    /// Recovered slopes order the labels as the planted coefficients do.
    pub ordering_ok: bool,
    pub network_calls: usize,
}

impl PlantedRun {
    pub fn passed(&self) -> bool {
        self.ordering_ok && self.rows.iter().all(|r| r.ok)
    }
}

/// Noise image unique to `(seed, source, k)`.
fn procedural_image(seed: u64, source: usize, k: usize) -> ImagePlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((source as u64) << 20) ^ ((k as u64) << 52));
    ImagePlane::from_fn(SIM_IMAGE_SIDE, SIM_IMAGE_SIDE, 3, |_, _, _| rng.random::<u8>() as f32 / 255.0).expect("valid dimensions")
}

/// Runs the check for one seed. The probe store lives under `work_dir`
/// and is recreated on every call.
pub fn run_planted(
    labels: &[PlantedLabel],
    grid: &AttributeGrid,
    n_series: usize,
    seed: u64,
    options: &AnalysisOptions,
    work_dir: &Path,
) -> Result<PlantedRun, CliError> {
    if labels.is_empty() || n_series == 0 {
        return Err(CliError::Config("simulate needs at least one label and one series".into()));
    }
    let mut sidecars = Vec::with_capacity(n_series);
    let mut inputs = Vec::with_capacity(n_series * grid.len());
    let mut lookup = GridLookup::new();
    for i in 0..n_series {
        let mut images = Vec::with_capacity(grid.len());
        for (k, &a) in grid.values().iter().enumerate() {
            let input = ProbeInput::from_plane(&procedural_image(seed, i, k)).map_err(|e| CliError::Data(e.to_string()))?;
            lookup.insert(&input.digest, a)?;
            images.push(SeriesImage {
                k: k + 1,
                a,
                file: image_file_name(&grid.attribute, k + 1),
                digest: input.digest.clone(),
            });
            inputs.push(input);
        }
        sidecars.push(SeriesSidecar {
            source_id: format!("sim{i:05}"),
            source_path: None,
            keyword: None,
            attribute: grid.attribute.clone(),
            grid: grid.values().to_vec(),
            controlled_values: AttributeVector::new(),
            flags: SeriesFlags::default(),
            crop_box: None,
            images,
        });
    }
    let specs = labels
        .iter()
        .map(|l| BiasSimSpec {
            label: l.label.clone(),
            beta0: l.beta0,
            beta1: l.beta1,
            seed,
            deterministic: false,
        })
        .collect();
    let backend = SimulatedBackend::with_lookup(SIM_BACKEND, specs, lookup)?;

    let store_dir = work_dir.join(format!("store-seed{seed}"));
    if store_dir.exists() {
        std::fs::remove_dir_all(&store_dir).map_err(|e| CliError::Data(format!("{}: {e}", store_dir.display())))?;
    }
    let store = ProbeStore::open(&store_dir)?;
    let outcome = probe_images(&inputs, &backend, &store, &ProbeOptions::default());
    if let Some((id, e)) = outcome.failures.first() {
        return Err(CliError::Backend(format!("{} images failed, first {id}: {e}", outcome.failures.len())));
    }
    let series = join_series(&sidecars, &store.records())?;
    let analysis = analyze(&series, options)?;
    let retained = analysis.retained();

    let mut rows = Vec::new();
    for l in labels {
        let name = crate::probe::normalize_label(&l.label);
        let fitted = analysis.slopes.iter().find(|s| s.label == name);
        let (slope, p_value) = fitted.map(|s| (s.slope, s.p_value)).unwrap_or((0.0, 1.0));
        let kept = retained.iter().any(|s| s.label == name);
        let ok = if l.beta1 > 0.0 {
            slope > 0.0 && p_value < options.p_max
        } else if l.beta1 < 0.0 {
            slope < 0.0 && p_value < options.p_max
        } else {
            !kept
        };
        rows.push(PlantedRow {
            label: name,
            beta1: l.beta1,
            slope,
            p_value,
            retained: kept,
            ok,
        });
    }
    let mut by_planted = rows.clone();
    by_planted.sort_by(|a, b| a.beta1.total_cmp(&b.beta1));
    let ordering_ok = by_planted.windows(2).all(|w| w[0].beta1 == w[1].beta1 || w[0].slope < w[1].slope);
    Ok(PlantedRun {
        seed,
        n_series,
        rows,
        ordering_ok,
        network_calls: outcome.network_calls,
    })
}
