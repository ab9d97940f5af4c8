//! Fixtures and independent oracles shared by the integration tests and the
//! acceptance harness.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cfaudit::dataset::{DatasetManifest, ImageRecord};
use cfaudit::facegeom::{FaceBox, SkinMask};
use cfaudit::image::ImagePlane;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[derive(serde::Deserialize)]
struct CountsFile {
    rows: Vec<CountsRow>,
}

#[derive(serde::Deserialize)]
struct CountsRow {
    keyword: String,
    female: usize,
    male: usize,
}

/// Expands the per-occupation gender counts fixture into one record per image.
pub fn counts_manifest() -> DatasetManifest {
    let text = std::fs::read_to_string(fixture("table3_counts.json")).unwrap();
    let file: CountsFile = serde_json::from_str(&text).unwrap();
    let mut records = Vec::new();
    for row in &file.rows {
        for i in 0..row.female + row.male {
            let gender = if i < row.female { "female" } else { "male" };
            records.push(ImageRecord {
                id: format!("{}-{i:04}", row.keyword),
                path: PathBuf::from(format!("{}/{i:04}.jpg", row.keyword)),
                keyword: row.keyword.clone(),
                qualifier: None,
                annotations: BTreeMap::from([("gender".to_string(), gender.to_string())]),
                face_present: Some(true),
            });
        }
    }
    DatasetManifest {
        records,
        attribute_domain: BTreeMap::from([("gender".into(), vec!["female".into(), "male".into()])]),
    }
}

/// Textbook simple regression: slope `cov(x, y) / var(x)` and the t-statistic
/// of the slope with `n - 2` degrees of freedom.
pub struct TextbookFit {
    pub slope: f64,
    pub intercept: f64,
    pub t_stat: f64,
}

pub fn textbook_ols(x: &[f64], y: &[f64]) -> TextbookFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0);
    let var: f64 = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / (n - 1.0);
    let slope = cov / var;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let sigma2 = rss / (n - 2.0);
    let se = (sigma2 / (var * (n - 1.0))).sqrt();
    TextbookFit {
        slope,
        intercept,
        t_stat: slope / se,
    }
}

/// Per-pixel compositing oracle: every output pixel is looked up from the
/// edited crop when it lies inside the box and the mask is set, otherwise
/// from the original.
pub fn composite_oracle(original: &ImagePlane, edited: &ImagePlane, mask: &SkinMask, b: &FaceBox) -> ImagePlane {
    let c = original.channels();
    ImagePlane::from_fn(original.width(), original.height(), c, |x, y, ch| {
        let inside = x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h;
        if inside && mask.get(x - b.x, y - b.y) {
            edited.get(x - b.x, y - b.y, ch)
        } else {
            original.get(x, y, ch)
        }
    })
    .unwrap()
}

/// Two-sided Student-t tail probability for integer `df`, by Simpson
/// integration of the density over `[0, |t|]`.
pub fn t_two_sided_p(t: f64, df: u32) -> f64 {
    // Γ((ν+1)/2) / Γ(ν/2) by the recurrence c(ν+2) = c(ν)·(ν+1)/ν.
    let mut c = if df % 2 == 1 { 1.0 / std::f64::consts::PI.sqrt() } else { std::f64::consts::PI.sqrt() / 2.0 };
    let mut nu = if df % 2 == 1 { 1 } else { 2 };
    while nu < df {
        c *= (nu + 1) as f64 / nu as f64;
        nu += 2;
    }
    let v = df as f64;
    let norm = c / (v * std::f64::consts::PI).sqrt();
    let pdf = |x: f64| norm * (1.0 + x * x / v).powf(-(v + 1.0) / 2.0);
    let steps = 20_000;
    let h = t.abs() / steps as f64;
    let mut acc = pdf(0.0) + pdf(t.abs());
    for i in 1..steps {
        acc += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    (1.0 - 2.0 * acc * h / 3.0).clamp(0.0, 1.0)
}
