//! Run configuration (TOML). Relative paths resolve against the directory
//! holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{AttributeRole, AttributeSpec, CodecConfig};
use crate::dataset::DuplicatePolicy;
use crate::probe::BiasSimSpec;
use crate::slopes::{AnalysisOptions, SignificanceMode, Weighting};
use crate::synth::AttributeGrid;

use super::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory with one subdirectory per keyword.
    pub dataset_root: PathBuf,
    /// `id,attribute,value` CSV.
    #[serde(default)]
    pub annotations: Option<PathBuf>,
    pub manifest: PathBuf,
    pub artifact: PathBuf,
    pub series_dir: PathBuf,
    pub store: PathBuf,
    pub report_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Duplicates {
    #[default]
    Reject,
    KeepFirst,
}

impl From<Duplicates> for DuplicatePolicy {
    fn from(d: Duplicates) -> Self {
        match d {
            Duplicates::Reject => DuplicatePolicy::Reject,
            Duplicates::KeepFirst => DuplicatePolicy::KeepFirst,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Keyword directories to include; empty means all.
    pub keywords: Vec<String>,
    pub duplicates: Duplicates,
    /// Drop images in which the detector finds no face.
    pub filter_faceless: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            keywords: Vec::new(),
            duplicates: Duplicates::Reject,
            filter_faceless: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub k: usize,
    pub lo: f64,
    pub hi: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { k: 7, lo: -2.0, hi: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// `simulated`, `replay`, `google`, `amazon`, `ibm` or `clarifai`.
    pub backend: String,
    /// Requests per second; absent means unlimited.
    pub rps: Option<f64>,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    pub timeout_secs: u64,
    /// Fixture for the `replay` backend.
    pub replay_fixture: Option<PathBuf>,
    /// Labels of the `simulated` backend.
    pub simulator: Vec<BiasSimSpec>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            backend: "simulated".into(),
            rps: None,
            max_in_flight: 4,
            max_attempts: 5,
            timeout_secs: 30,
            replay_fixture: None,
            simulator: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub mode: SignificanceMode,
    pub p_max: f64,
    pub min_abs_slope: f64,
    pub include_flagged: bool,
    pub weighting: Weighting,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        let d = AnalysisOptions::default();
        Self {
            mode: d.mode,
            p_max: d.p_max,
            min_abs_slope: d.min_abs_slope,
            include_flagged: d.aggregate.include_flagged,
            weighting: d.aggregate.weighting,
        }
    }
}

impl AnalysisSection {
    pub fn options(&self) -> AnalysisOptions {
        AnalysisOptions {
            mode: self.mode,
            p_max: self.p_max,
            min_abs_slope: self.min_abs_slope,
            aggregate: crate::slopes::AggregateOptions {
                include_flagged: self.include_flagged,
                weighting: self.weighting,
            },
        }
    }
}

/// One label of the planted-bias check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedLabel {
    pub label: String,
    #[serde(default)]
    pub beta0: f64,
    pub beta1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub n_series: usize,
    pub seeds: Vec<u64>,
    pub labels: Vec<PlantedLabel>,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            n_series: 200,
            seeds: vec![1, 2, 3],
            labels: vec![
                PlantedLabel {
                    label: "planted negative".into(),
                    beta0: 0.0,
                    beta1: -0.3,
                },
                PlantedLabel {
                    label: "planted null".into(),
                    beta0: 0.0,
                    beta1: 0.0,
                },
                PlantedLabel {
                    label: "planted positive".into(),
                    beta0: 0.0,
                    beta1: 0.3,
                },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub dataset: DatasetSection,
    pub attributes: Vec<AttributeSpec>,
    #[serde(default)]
    pub codec: CodecConfig,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub simulate: SimulateSection,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        let p = &mut cfg.paths;
        for path in [
            &mut p.dataset_root,
            &mut p.manifest,
            &mut p.artifact,
            &mut p.series_dir,
            &mut p.store,
            &mut p.report_dir,
        ] {
            resolve(base, path);
        }
        if let Some(a) = p.annotations.as_mut() {
            resolve(base, a);
        }
        if let Some(f) = cfg.probe.replay_fixture.as_mut() {
            resolve(base, f);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        crate::codec::validate_specs(&self.attributes).map_err(|e| CliError::Config(e.to_string()))?;
        self.grid_values()?;
        let a = &self.analysis;
        if !(a.p_max > 0.0 && a.p_max <= 1.0) || !(a.min_abs_slope > 0.0) {
            return Err(CliError::Config("analysis thresholds must be positive (p_max in (0, 1])".into()));
        }
        if self.probe.max_in_flight == 0 || self.probe.max_attempts == 0 {
            return Err(CliError::Config("max_in_flight and max_attempts must be positive".into()));
        }
        if let Some(r) = self.probe.rps {
            if !(r > 0.0 && r.is_finite()) {
                return Err(CliError::Config("rps must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn sensitive(&self) -> Result<&AttributeSpec, CliError> {
        self.attributes
            .iter()
            .find(|s| s.role == AttributeRole::Sensitive)
            .ok_or_else(|| CliError::Config("no sensitive attribute declared".into()))
    }

    pub fn grid_values(&self) -> Result<AttributeGrid, CliError> {
        let name = &self.sensitive()?.name;
        let g = AttributeGrid::new(name, self.grid.k, self.grid.lo, self.grid.hi).map_err(|e| CliError::Config(e.to_string()))?;
        if self.grid.k.is_multiple_of(2) {
            return Err(CliError::Config(format!("grid k must be odd so the centre is a grid point, got {}", self.grid.k)));
        }
        Ok(g)
    }

    /// Codec settings with the root seed applied.
    pub fn codec_config(&self) -> CodecConfig {
        CodecConfig {
            seed: self.seed,
            ..self.codec.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 9

[paths]
dataset_root = "data/images"
manifest = "work/manifest.json"
artifact = "work/codec.json"
series_dir = "work/series"
store = "/abs/store"
report_dir = "work/report"

[[attributes]]
name = "gender"
role = "sensitive"
values = ["female", "male"]
"#;

    #[test]
    fn defaults_and_relative_paths() {
        let cfg = RunConfig::from_toml(MINIMAL, Path::new("/runs/a")).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.paths.manifest, Path::new("/runs/a/work/manifest.json"));
        assert_eq!(cfg.paths.store, Path::new("/abs/store"));
        assert_eq!(cfg.grid, GridSection::default());
        assert_eq!(cfg.analysis.mode, SignificanceMode::PerImage);
        assert_eq!(cfg.codec_config().seed, 9);
        assert_eq!(cfg.grid_values().unwrap().values().len(), 7);
    }

    #[test]
    fn shipped_example_parses() {
        let cfg = RunConfig::from_toml(include_str!("../../config/audit.toml"), Path::new("/x/config")).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.paths.store, Path::new("/x/config/../work/store"));
        assert_eq!(cfg.sensitive().unwrap().name, "gender");
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(RunConfig::from_toml(&format!("bogus = 1\n{MINIMAL}"), Path::new(".")).is_err());
        let mut cfg = RunConfig::from_toml(MINIMAL, Path::new(".")).unwrap();
        cfg.grid.k = 6;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::from_toml(MINIMAL, Path::new(".")).unwrap();
        cfg.analysis.min_abs_slope = 0.0;
        assert!(cfg.validate().is_err());
    }
}
