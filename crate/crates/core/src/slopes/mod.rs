//! Label-rate aggregation, centre normalization and OLS sensitivity slopes.
//!
//! For each backend and label, `y[k]` is the fraction of source images whose
//! `k`-th counterfactual variant carries the label, `z[k] = y[k] / y[c]` with
//! `c` the centre of the grid, and the slope is the OLS coefficient of `z`
//! on the grid values. The sign of a slope follows the grid direction: a
//! negative slope means the label is more frequent toward the low end.

mod report;

pub use report::{load_slopes_json, report, write_slopes_json, ReportFiles, ReportMetadata};

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::probe::{LabelPrediction, ProbeRecord};
use crate::synth::{AttributeGrid, SeriesFlags, SeriesSidecar};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SlopeError {
    #[error("label `{label}` ({backend}) has rate 0 at the grid centre; normalization is undefined")]
    NormalizationUndefined { backend: String, label: String },
    #[error("grid has an even number of points ({0}); the centre is undefined")]
    EvenGrid(usize),
    #[error("series disagree on the grid: {0}")]
    InconsistentGrid(String),
    #[error("attribute values have zero variance")]
    ZeroVariance,
    #[error("need at least 3 points for a p-value, got {0}")]
    TooFewPoints(usize),
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("no records to analyze")]
    NoRecords,
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid input: {0}")]
    Invalid(String),
}

/// Which observations the t-test on the slope is computed from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignificanceMode {
    /// The `K` normalized points, `K - 2` degrees of freedom.
    Aggregate,
    /// All `n·K` per-image outcomes against `a`, `n·K - 2` degrees of freedom.
    #[default]
    PerImage,
}

impl SignificanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Aggregate => "aggregate",
            Self::PerImage => "per-image",
        }
    }
}

impl std::str::FromStr for SignificanceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "aggregate" => Ok(Self::Aggregate),
            "per-image" => Ok(Self::PerImage),
            other => Err(format!("unknown significance mode `{other}` (aggregate | per-image)")),
        }
    }
}

/// Per-image outcome of a label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// 1 when present, 0 otherwise.
    #[default]
    Binary,
    /// The reported confidence when present, 0 otherwise.
    Confidence,
}

/// One backend's predictions for every variant of one series.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesProbe {
    pub backend: String,
    pub source_id: String,
    pub grid: AttributeGrid,
    pub flags: SeriesFlags,
    /// Indexed by grid position; `None` where no record exists.
    pub predictions: Vec<Option<Vec<LabelPrediction>>>,
}

impl SeriesProbe {
    pub fn is_complete(&self) -> bool {
        self.predictions.iter().all(Option::is_some)
    }
}

/// Joins probe records to series grid positions by image digest. Produces
/// one [`SeriesProbe`] per (backend with records, series).
pub fn join_series(sidecars: &[SeriesSidecar], records: &[ProbeRecord]) -> Result<Vec<SeriesProbe>, SlopeError> {
    let mut by_key: HashMap<(&str, &str), &ProbeRecord> = HashMap::new();
    let mut backends = BTreeSet::new();
    for r in records {
        by_key.entry((r.backend.as_str(), r.image_id.as_str())).or_insert(r);
        backends.insert(r.backend.as_str());
    }
    let mut out = Vec::new();
    for backend in backends {
        for s in sidecars {
            let grid = AttributeGrid::from_values(&s.attribute, s.grid.clone())
                .map_err(|e| SlopeError::InconsistentGrid(format!("series {}: {e}", s.source_id)))?;
            let predictions = s
                .images
                .iter()
                .map(|im| by_key.get(&(backend, im.digest.as_str())).map(|r| r.predictions.clone()))
                .collect();
            out.push(SeriesProbe {
                backend: backend.to_string(),
                source_id: s.source_id.clone(),
                grid,
                flags: s.flags.clone(),
                predictions,
            });
        }
    }
    Ok(out)
}

/// Per-label presence rates along the grid for one backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRateVector {
    pub backend: String,
    pub label: String,
    pub grid: AttributeGrid,
    /// `y[k]`, each in `[0, 1]`.
    pub y: Vec<f64>,
    /// Contributing source images.
    pub n: usize,
    /// Sum of per-image outcomes at each grid point.
    pub sums: Vec<f64>,
    /// Sum of squared per-image outcomes at each grid point.
    pub sum_squares: Vec<f64>,
}

impl LabelRateVector {
    pub fn k(&self) -> usize {
        self.y.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExclusionReason {
    /// The series carries a quality flag and flagged series are excluded.
    FlaggedSeries,
    /// Some variants of the series have no probe record.
    IncompleteSeries,
    /// The label's rate at the grid centre is 0.
    NormalizationUndefined,
}

impl ExclusionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::FlaggedSeries => "flagged-series",
            Self::IncompleteSeries => "incomplete-series",
            Self::NormalizationUndefined => "normalization-undefined",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Exclusion {
    pub backend: String,
    pub reason: ExclusionReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_id: Option<String>,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AggregateOptions {
    pub include_flagged: bool,
    pub weighting: Weighting,
}

/// Outcome of a present label; absent labels contribute 0.
fn outcome(p: &LabelPrediction, weighting: Weighting) -> f64 {
    match weighting {
        Weighting::Binary => 1.0,
        Weighting::Confidence => p.confidence.unwrap_or(1.0),
    }
}

/// Rate vectors for every (backend, label) present on at least one image,
/// sorted by backend then label. Skipped series are listed as exclusions.
pub fn aggregate_rates(
    series: &[SeriesProbe],
    opts: &AggregateOptions,
) -> Result<(Vec<LabelRateVector>, Vec<Exclusion>), SlopeError> {
    let Some(first) = series.first() else {
        return Ok((Vec::new(), Vec::new()));
    };
    let grid = &first.grid;
    for s in series {
        if s.grid.len() != grid.len() {
            return Err(SlopeError::InconsistentGrid(format!(
                "series {} has K = {}, series {} has K = {}",
                first.source_id,
                grid.len(),
                s.source_id,
                s.grid.len()
            )));
        }
        if s.grid != *grid {
            return Err(SlopeError::InconsistentGrid(format!(
                "series {} and {} use different grid values or attributes",
                first.source_id, s.source_id
            )));
        }
        if s.predictions.len() != grid.len() {
            return Err(SlopeError::Length(format!(
                "series {} has {} prediction slots for K = {}",
                s.source_id,
                s.predictions.len(),
                grid.len()
            )));
        }
    }
    let k = grid.len();
    let mut exclusions = Vec::new();
    // backend -> label -> (sums, sum_squares); backend -> n
    let mut acc: BTreeMap<&str, BTreeMap<String, (Vec<f64>, Vec<f64>)>> = BTreeMap::new();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in series {
        let exclude = |reason, detail: String| Exclusion {
            backend: s.backend.clone(),
            reason,
            label: None,
            source_id: Some(s.source_id.clone()),
            detail,
        };
        if s.flags.any() && !opts.include_flagged {
            let mut what = Vec::new();
            if s.flags.fallback_mask {
                what.push("fallback mask".to_string());
            }
            if !s.flags.defaulted_controlled.is_empty() {
                what.push(format!("defaulted controlled: {}", s.flags.defaulted_controlled.join(" ")));
            }
            exclusions.push(exclude(ExclusionReason::FlaggedSeries, what.join("; ")));
            continue;
        }
        if !s.is_complete() {
            let missing = s.predictions.iter().filter(|p| p.is_none()).count();
            exclusions.push(exclude(ExclusionReason::IncompleteSeries, format!("{missing} of {k} variants unprobed")));
            continue;
        }
        *counts.entry(&s.backend).or_default() += 1;
        let labels = acc.entry(&s.backend).or_default();
        for (i, preds) in s.predictions.iter().enumerate() {
            for p in preds.as_ref().expect("complete series") {
                if !p.present {
                    continue;
                }
                let v = outcome(p, opts.weighting);
                let (sums, sq) = labels.entry(p.label.clone()).or_insert_with(|| (vec![0.0; k], vec![0.0; k]));
                sums[i] += v;
                sq[i] += v * v;
            }
        }
    }
    let mut out = Vec::new();
    for (backend, labels) in acc {
        let n = counts[backend];
        for (label, (sums, sum_squares)) in labels {
            if sums.iter().all(|&s| s == 0.0) {
                continue;
            }
            out.push(LabelRateVector {
                backend: backend.to_string(),
                label,
                grid: grid.clone(),
                y: sums.iter().map(|s| s / n as f64).collect(),
                n,
                sums,
                sum_squares,
            });
        }
    }
    exclusions.sort();
    Ok((out, exclusions))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedVector {
    pub z: Vec<f64>,
    /// Zero-based centre index.
    pub center: usize,
}

/// `z[k] = y[k] / y[c]`; `z[c]` is exactly 1.
pub fn normalize(v: &LabelRateVector) -> Result<NormalizedVector, SlopeError> {
    let k = v.y.len();
    if k.is_multiple_of(2) {
        return Err(SlopeError::EvenGrid(k));
    }
    let c = k / 2;
    let yc = v.y[c];
    if yc <= 0.0 {
        return Err(SlopeError::NormalizationUndefined {
            backend: v.backend.clone(),
            label: v.label.clone(),
        });
    }
    let mut z: Vec<f64> = v.y.iter().map(|y| y / yc).collect();
    z[c] = 1.0;
    Ok(NormalizedVector { z, center: c })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub slope: f64,
    pub intercept: f64,
    pub std_error: f64,
    pub t_stat: f64,
    pub p_value: f64,
    pub df: f64,
}

/// Two-sided p-value of `slope / std_error` on `df` degrees of freedom.
/// Zero residual variance gives p = 1 for a flat fit and p = 0 otherwise.
fn significance(slope: f64, sse: f64, sxx: f64, df: f64) -> (f64, f64, f64) {
    let se = (sse / df / sxx).sqrt();
    if se == 0.0 || !se.is_finite() {
        let t = if slope == 0.0 { 0.0 } else { f64::INFINITY.copysign(slope) };
        return (se, t, if slope == 0.0 { 1.0 } else { 0.0 });
    }
    let t = slope / se;
    let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive");
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    (se, t, p)
}

/// OLS of `y` on `x` with a two-sided t-test on the slope (`len - 2` df).
pub fn ols_fit(x: &[f64], y: &[f64]) -> Result<OlsFit, SlopeError> {
    let w = vec![1.0; x.len()];
    let sq: Vec<f64> = y.iter().map(|v| v * v).collect();
    ols_fit_grouped(x, &w, y, &sq)
}

/// OLS over grouped observations: at `x[k]` there are `counts[k]`
/// outcomes with sum `sums[k]` and sum of squares `sum_squares[k]`.
/// Equivalent to regressing every individual outcome on its `x`.
pub fn ols_fit_grouped(x: &[f64], counts: &[f64], sums: &[f64], sum_squares: &[f64]) -> Result<OlsFit, SlopeError> {
    let k = x.len();
    if counts.len() != k || sums.len() != k || sum_squares.len() != k {
        return Err(SlopeError::Length(format!(
            "{} x values, {} counts, {} sums, {} sums of squares",
            k,
            counts.len(),
            sums.len(),
            sum_squares.len()
        )));
    }
    let n: f64 = counts.iter().sum();
    if n < 3.0 {
        return Err(SlopeError::TooFewPoints(n as usize));
    }
    let x_mean = x.iter().zip(counts).map(|(x, c)| x * c).sum::<f64>() / n;
    let y_mean = sums.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().zip(counts).map(|(x, c)| c * (x - x_mean).powi(2)).sum();
    if sxx <= 0.0 || !sxx.is_finite() {
        return Err(SlopeError::ZeroVariance);
    }
    let sxy: f64 = (0..k).map(|i| (x[i] - x_mean) * (sums[i] - counts[i] * y_mean)).sum();
    // Within-group scatter plus between-group scatter about the overall mean.
    let syy: f64 = (0..k)
        .map(|i| {
            let within = if counts[i] > 0.0 { sum_squares[i] - sums[i] * sums[i] / counts[i] } else { 0.0 };
            let group_mean = if counts[i] > 0.0 { sums[i] / counts[i] } else { y_mean };
            within.max(0.0) + counts[i] * (group_mean - y_mean).powi(2)
        })
        .sum();
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let df = n - 2.0;
    let sse = (syy - slope * sxy).max(0.0);
    let (std_error, t_stat, p_value) = significance(slope, sse, sxx, df);
    Ok(OlsFit {
        slope,
        intercept,
        std_error,
        t_stat,
        p_value,
        df,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSlope {
    pub backend: String,
    pub label: String,
    /// From the normalized aggregate fit.
    pub slope: f64,
    pub intercept: f64,
    pub p_value: f64,
    /// Source images contributing.
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub mode: SignificanceMode,
}

/// Slope of a label's normalized rates; the p-value follows `mode`.
pub fn label_slope(v: &LabelRateVector, z: &NormalizedVector, mode: SignificanceMode) -> Result<LabelSlope, SlopeError> {
    let a = v.grid.values();
    let fit = ols_fit(a, &z.z)?;
    let p_value = match mode {
        SignificanceMode::Aggregate => fit.p_value,
        SignificanceMode::PerImage => {
            let counts = vec![v.n as f64; v.k()];
            ols_fit_grouped(a, &counts, &v.sums, &v.sum_squares)?.p_value
        }
    };
    if !fit.slope.is_finite() {
        return Err(SlopeError::Invalid(format!("non-finite slope for `{}`", v.label)));
    }
    Ok(LabelSlope {
        backend: v.backend.clone(),
        label: v.label.clone(),
        slope: fit.slope,
        intercept: fit.intercept,
        p_value,
        n: v.n,
        k: v.k(),
        mode,
    })
}

pub const DEFAULT_P_MAX: f64 = 0.001;
pub const DEFAULT_MIN_ABS_SLOPE: f64 = 0.03;

/// Keeps slopes with `p < p_max` and `|slope| > min_abs_slope`, sorted by
/// signed slope (ties by backend, then label).
pub fn filter_labels(slopes: &[LabelSlope], p_max: f64, min_abs_slope: f64) -> Vec<LabelSlope> {
    let mut kept: Vec<LabelSlope> = slopes
        .iter()
        .filter(|s| s.p_value < p_max && s.slope.abs() > min_abs_slope)
        .cloned()
        .collect();
    sort_by_slope(&mut kept);
    kept
}

pub fn sort_by_slope(slopes: &mut [LabelSlope]) {
    slopes.sort_by(|a, b| {
        a.slope
            .total_cmp(&b.slope)
            .then_with(|| a.backend.cmp(&b.backend))
            .then_with(|| a.label.cmp(&b.label))
    });
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub mode: SignificanceMode,
    pub p_max: f64,
    pub min_abs_slope: f64,
    #[serde(flatten)]
    pub aggregate: AggregateOptions,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            mode: SignificanceMode::default(),
            p_max: DEFAULT_P_MAX,
            min_abs_slope: DEFAULT_MIN_ABS_SLOPE,
            aggregate: AggregateOptions::default(),
        }
    }
}

/// One label's rates and, when normalization succeeded, its `z` and slope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelCurve {
    pub rates: LabelRateVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalized: Option<NormalizedVector>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub options: AnalysisOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<AttributeGrid>,
    /// Every fitted label, sorted by backend then label.
    pub slopes: Vec<LabelSlope>,
    pub curves: Vec<LabelCurve>,
    pub exclusions: Vec<Exclusion>,
    /// Contributing series per backend.
    pub series_per_backend: BTreeMap<String, usize>,
}

impl Analysis {
    /// Analysis holding only precomputed slopes (report fixtures).
    pub fn from_slopes(slopes: Vec<LabelSlope>, options: AnalysisOptions) -> Self {
        Self {
            options,
            grid: None,
            slopes,
            curves: Vec::new(),
            exclusions: Vec::new(),
            series_per_backend: BTreeMap::new(),
        }
    }

    pub fn retained(&self) -> Vec<LabelSlope> {
        filter_labels(&self.slopes, self.options.p_max, self.options.min_abs_slope)
    }
}

/// Aggregates, normalizes and fits every label. Labels with `y[c] = 0` move
/// to the exclusions and get no slope.
pub fn analyze(series: &[SeriesProbe], options: &AnalysisOptions) -> Result<Analysis, SlopeError> {
    if !(options.p_max > 0.0) || !(options.min_abs_slope >= 0.0) {
        return Err(SlopeError::Invalid("thresholds must be positive".into()));
    }
    if let Some(s) = series.first() {
        if s.grid.len() % 2 == 0 {
            return Err(SlopeError::EvenGrid(s.grid.len()));
        }
    }
    let (rates, mut exclusions) = aggregate_rates(series, &options.aggregate)?;
    let mut series_per_backend = BTreeMap::new();
    for r in &rates {
        series_per_backend.insert(r.backend.clone(), r.n);
    }
    let mut slopes = Vec::new();
    let mut curves = Vec::new();
    for v in rates {
        match normalize(&v) {
            Ok(z) => {
                slopes.push(label_slope(&v, &z, options.mode)?);
                curves.push(LabelCurve {
                    rates: v,
                    normalized: Some(z),
                });
            }
            Err(SlopeError::NormalizationUndefined { backend, label }) => {
                exclusions.push(Exclusion {
                    backend,
                    reason: ExclusionReason::NormalizationUndefined,
                    label: Some(label),
                    source_id: None,
                    detail: format!("y at centre is 0 over {} series", v.n),
                });
                curves.push(LabelCurve {
                    rates: v,
                    normalized: None,
                });
            }
            Err(e) => return Err(e),
        }
    }
    exclusions.sort();
    Ok(Analysis {
        options: options.clone(),
        grid: series.first().map(|s| s.grid.clone()),
        slopes,
        curves,
        exclusions,
        series_per_backend,
    })
}
