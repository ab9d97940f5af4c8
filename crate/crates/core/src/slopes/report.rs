//! Report bundle: slope tables, per-label curves, exclusions and run metadata.
//!
//! Layout under the output directory:
//!
//! ```text
//! slopes.csv                 retained slopes, every backend, sorted by signed slope
//! all_slopes.csv             every fitted slope
//! tables/<backend>.csv       retained slopes of one backend
//! tables/<backend>.txt       the same as an aligned text table with a sign legend
//! curves/<backend>/<label>.csv   a,y,z for each retained label with rate data
//! exclusions.csv
//! metadata.json
//! ```
//!
//! Output depends only on the inputs, so identical inputs give identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Analysis, LabelCurve, LabelSlope, SlopeError};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute: Option<String>,
    /// Names of the attribute's low (`a < 0`) and high (`a > 0`) ends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoints: Option<[String; 2]>,
    /// Probe store directory to log digest.
    #[serde(default)]
    pub store_digests: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct MetadataFile<'a> {
    #[serde(flatten)]
    meta: &'a ReportMetadata,
    grid: Option<&'a [f64]>,
    #[serde(rename = "K")]
    k: Option<usize>,
    p_max: f64,
    min_abs_slope: f64,
    mode: &'a str,
    weighting: super::Weighting,
    include_flagged: bool,
    series_per_backend: &'a BTreeMap<String, usize>,
    fitted: usize,
    retained: usize,
    exclusions: usize,
    sign_convention: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportFiles {
    pub slopes_csv: PathBuf,
    pub tables: Vec<PathBuf>,
    pub curves: Vec<PathBuf>,
    pub exclusions_csv: PathBuf,
    pub metadata_json: PathBuf,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SlopeError {
    SlopeError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), SlopeError> {
    crate::fsutil::write_atomic(path, bytes).map_err(|e| io_err(path, e))
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for r in rows {
        w.write_record(&r).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

const SLOPE_HEADER: [&str; 8] = ["backend", "label", "slope", "intercept", "p_value", "n", "K", "mode"];

fn slope_row(s: &LabelSlope) -> Vec<String> {
    vec![
        s.backend.clone(),
        s.label.clone(),
        s.slope.to_string(),
        s.intercept.to_string(),
        s.p_value.to_string(),
        s.n.to_string(),
        s.k.to_string(),
        s.mode.as_str().to_string(),
    ]
}

/// File-name-safe form of a label or backend id.
fn file_stem(s: &str) -> String {
    let stem: String = s
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect();
    if stem.is_empty() || stem.starts_with('.') {
        format!("_{stem}")
    } else {
        stem
    }
}

/// States which end of the attribute a slope sign points to.
pub fn sign_legend(meta: &ReportMetadata) -> String {
    let attr = meta.attribute.as_deref().unwrap_or("the attribute");
    match &meta.endpoints {
        Some([low, high]) => format!(
            "negative slope: label more frequent toward {low} (low end of {attr}); \
             positive slope: label more frequent toward {high} (high end of {attr})"
        ),
        None => format!(
            "negative slope: label more frequent toward the low end of {attr}; \
             positive slope: label more frequent toward the high end"
        ),
    }
}

fn text_table(backend: &str, slopes: &[LabelSlope], analysis: &Analysis, meta: &ReportMetadata) -> String {
    let mut out = format!("Label sensitivity, backend {backend}\n");
    out += &format!(
        "Retained: p < {} and |slope| > {}; p-values from {} mode.\n",
        analysis.options.p_max,
        analysis.options.min_abs_slope,
        analysis.options.mode.as_str()
    );
    out += &format!("Sign: {}.\n\n", sign_legend(meta));
    let width = slopes.iter().map(|s| s.label.chars().count()).max().unwrap_or(5).max(5);
    out += &format!("{:<width$}  {:>9}  {:>10}  {:>6}\n", "label", "slope", "p_value", "n");
    for s in slopes {
        out += &format!("{:<width$}  {:>9.3}  {:>10.3e}  {:>6}\n", s.label, s.slope, s.p_value, s.n);
    }
    if slopes.is_empty() {
        out += "(no labels pass the filter)\n";
    }
    out
}

fn curve_csv(curve: &LabelCurve) -> Vec<u8> {
    let z = curve.normalized.as_ref().map(|n| n.z.as_slice());
    let rows = curve.rates.grid.values().iter().enumerate().map(|(k, a)| {
        vec![
            a.to_string(),
            curve.rates.y[k].to_string(),
            z.map(|z| z[k].to_string()).unwrap_or_default(),
        ]
    });
    csv_bytes(&["a", "y", "z"], rows)
}

/// Writes the report bundle for `analysis` into `out_dir`.
pub fn report(analysis: &Analysis, meta: &ReportMetadata, out_dir: &Path) -> Result<ReportFiles, SlopeError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let retained = analysis.retained();
    let mut files = ReportFiles::default();

    files.slopes_csv = out_dir.join("slopes.csv");
    write(&files.slopes_csv, &csv_bytes(&SLOPE_HEADER, retained.iter().map(slope_row)))?;
    let mut all = analysis.slopes.clone();
    all.sort_by(|a, b| a.backend.cmp(&b.backend).then_with(|| a.label.cmp(&b.label)));
    write(&out_dir.join("all_slopes.csv"), &csv_bytes(&SLOPE_HEADER, all.iter().map(slope_row)))?;

    let backends: BTreeSet<&str> = analysis
        .slopes
        .iter()
        .map(|s| s.backend.as_str())
        .chain(analysis.series_per_backend.keys().map(String::as_str))
        .collect();
    for backend in &backends {
        let rows: Vec<LabelSlope> = retained.iter().filter(|s| s.backend == *backend).cloned().collect();
        let stem = file_stem(backend);
        let csv_path = out_dir.join("tables").join(format!("{stem}.csv"));
        write(&csv_path, &csv_bytes(&SLOPE_HEADER, rows.iter().map(slope_row)))?;
        let txt_path = out_dir.join("tables").join(format!("{stem}.txt"));
        write(&txt_path, text_table(backend, &rows, analysis, meta).as_bytes())?;
        files.tables.push(csv_path);
        files.tables.push(txt_path);
    }

    let kept: BTreeSet<(&str, &str)> = retained.iter().map(|s| (s.backend.as_str(), s.label.as_str())).collect();
    let mut used: BTreeSet<PathBuf> = BTreeSet::new();
    for curve in &analysis.curves {
        let key = (curve.rates.backend.as_str(), curve.rates.label.as_str());
        if !kept.contains(&key) {
            continue;
        }
        let dir = out_dir.join("curves").join(file_stem(key.0));
        let stem = file_stem(key.1);
        let mut path = dir.join(format!("{stem}.csv"));
        let mut i = 2;
        while used.contains(&path) {
            path = dir.join(format!("{stem}-{i}.csv"));
            i += 1;
        }
        write(&path, &curve_csv(curve))?;
        used.insert(path.clone());
        files.curves.push(path);
    }

    files.exclusions_csv = out_dir.join("exclusions.csv");
    let rows = analysis.exclusions.iter().map(|e| {
        vec![
            e.backend.clone(),
            e.reason.as_str().to_string(),
            e.label.clone().unwrap_or_default(),
            e.source_id.clone().unwrap_or_default(),
            e.detail.clone(),
        ]
    });
    write(
        &files.exclusions_csv,
        &csv_bytes(&["backend", "reason", "label", "source_id", "detail"], rows),
    )?;

    files.metadata_json = out_dir.join("metadata.json");
    let m = MetadataFile {
        meta,
        grid: analysis.grid.as_ref().map(|g| g.values()),
        k: analysis.grid.as_ref().map(|g| g.len()),
        p_max: analysis.options.p_max,
        min_abs_slope: analysis.options.min_abs_slope,
        mode: analysis.options.mode.as_str(),
        weighting: analysis.options.aggregate.weighting,
        include_flagged: analysis.options.aggregate.include_flagged,
        series_per_backend: &analysis.series_per_backend,
        fitted: analysis.slopes.len(),
        retained: retained.len(),
        exclusions: analysis.exclusions.len(),
        sign_convention: sign_legend(meta),
    };
    let json = serde_json::to_string_pretty(&m).expect("metadata serializes") + "\n";
    write(&files.metadata_json, json.as_bytes())?;
    Ok(files)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SlopeFile {
    Bare(Vec<LabelSlope>),
    Wrapped { slopes: Vec<LabelSlope> },
}

/// Reads slopes from a JSON array or an object with a `slopes` array.
pub fn load_slopes_json(path: &Path) -> Result<Vec<LabelSlope>, SlopeError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let parsed: SlopeFile = serde_json::from_str(&text).map_err(|e| io_err(path, e))?;
    let slopes = match parsed {
        SlopeFile::Bare(s) | SlopeFile::Wrapped { slopes: s } => s,
    };
    for s in &slopes {
        if !s.slope.is_finite() || !(0.0..=1.0).contains(&s.p_value) {
            return Err(SlopeError::Invalid(format!("slope entry `{}` is out of range", s.label)));
        }
    }
    Ok(slopes)
}

pub fn write_slopes_json(path: &Path, slopes: &[LabelSlope]) -> Result<(), SlopeError> {
    let json = serde_json::to_string_pretty(slopes).expect("slopes serialize") + "\n";
    write(path, json.as_bytes())
}
