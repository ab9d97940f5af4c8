//! Occupation image manifests, demographic annotations and representation
//! statistics.
//!
//! Images live under `<root>/<keyword>/<file>`, optionally one level deeper
//! as `<root>/<keyword>/<qualifier>/<file>` for qualifier-augmented searches
//! (e.g. `nurse/male/`). Annotations are a separate CSV with columns
//! `id,attribute,value`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::facegeom::{FaceDetector, FaceGeomError};
use crate::image::ImagePlane;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset root {0} does not exist or is not a directory")]
    MissingRoot(PathBuf),
    #[error("keyword directory {0} does not exist")]
    MissingKeyword(PathBuf),
    #[error("no readable images found under {root} ({skipped} files skipped)")]
    Empty { root: PathBuf, skipped: usize },
    #[error("duplicate image id {id}: {}", paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    DuplicateId { id: String, paths: Vec<PathBuf> },
    #[error("keyword is empty for {0}")]
    EmptyKeyword(PathBuf),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("value `{value}` of attribute `{attribute}` is not in its domain")]
    ValueOutsideDomain { attribute: String, value: String },
    #[error("conflicting annotations for {id}.{attribute}: `{first}` vs `{second}`")]
    ConflictingAnnotation {
        id: String,
        attribute: String,
        first: String,
        second: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("annotation csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Hex SHA-256 of the file bytes.
    pub id: String,
    pub path: PathBuf,
    pub keyword: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qualifier: Option<String>,
    #[serde(default)]
    pub annotations: BTreeMap<String, String>,
    /// `None` until a detector has run (or when it failed on this image).
    #[serde(default)]
    pub face_present: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    #[serde(default)]
    pub attribute_domain: BTreeMap<String, Vec<String>>,
}

pub fn file_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DuplicatePolicy {
    /// Byte-identical files anywhere in the tree are an error.
    #[default]
    Reject,
    /// Keep the first occurrence in (keyword, filename) order and count the rest as skipped.
    KeepFirst,
}

#[derive(Clone, Debug, Default)]
pub struct BuildOptions {
    pub duplicates: DuplicatePolicy,
}

#[derive(Clone, Debug)]
pub struct BuildOutcome {
    pub manifest: DatasetManifest,
    /// Files that failed to decode (plus dropped duplicates under `KeepFirst`).
    pub skipped: Vec<PathBuf>,
}

/// Builds a manifest with the default (strict) duplicate policy.
pub fn build_manifest(root: &Path, keywords: &[String]) -> Result<BuildOutcome, DatasetError> {
    build_manifest_with(root, keywords, &BuildOptions::default())
}

/// Scans `root` for the given keyword directories (all subdirectories when
/// `keywords` is empty). Records come out ordered by keyword, then by path
/// relative to the keyword directory.
pub fn build_manifest_with(root: &Path, keywords: &[String], opts: &BuildOptions) -> Result<BuildOutcome, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::MissingRoot(root.to_path_buf()));
    }
    let keywords: Vec<String> = if keywords.is_empty() {
        let mut found = Vec::new();
        for entry in fs::read_dir(root).map_err(io_err(root))? {
            let entry = entry.map_err(io_err(root))?;
            if entry.path().is_dir() && !is_hidden(&entry.path()) {
                found.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        found
    } else {
        keywords.to_vec()
    };
    let keywords: BTreeSet<String> = keywords.into_iter().collect();

    let mut candidates: Vec<(String, String, Option<String>, PathBuf)> = Vec::new();
    for kw in &keywords {
        if kw.trim().is_empty() {
            return Err(DatasetError::EmptyKeyword(root.join(kw)));
        }
        let dir = root.join(kw);
        if !dir.is_dir() {
            return Err(DatasetError::MissingKeyword(dir));
        }
        for (rel, qualifier, path) in list_files(&dir)? {
            candidates.push((kw.clone(), rel, qualifier, path));
        }
    }
    candidates.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut seen: BTreeMap<String, PathBuf> = BTreeMap::new();
    for (keyword, _rel, qualifier, path) in candidates {
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if ImagePlane::decode(&bytes).is_err() {
            log::warn!("skipping unreadable image {}", path.display());
            skipped.push(path);
            continue;
        }
        let id = file_digest(&bytes);
        if let Some(first) = seen.get(&id) {
            match opts.duplicates {
                DuplicatePolicy::Reject => {
                    return Err(DatasetError::DuplicateId {
                        id,
                        paths: vec![first.clone(), path],
                    })
                }
                DuplicatePolicy::KeepFirst => {
                    skipped.push(path);
                    continue;
                }
            }
        }
        seen.insert(id.clone(), path.clone());
        records.push(ImageRecord {
            id,
            path,
            keyword,
            qualifier,
            annotations: BTreeMap::new(),
            face_present: None,
        });
    }
    if records.is_empty() {
        return Err(DatasetError::Empty {
            root: root.to_path_buf(),
            skipped: skipped.len(),
        });
    }
    Ok(BuildOutcome {
        manifest: DatasetManifest {
            records,
            attribute_domain: BTreeMap::new(),
        },
        skipped,
    })
}

fn is_hidden(p: &Path) -> bool {
    p.file_name().map(|n| n.to_string_lossy().starts_with('.')).unwrap_or(false)
}

/// Files directly in `dir` (no qualifier) and one level down (qualifier = subdir name).
fn list_files(dir: &Path) -> Result<Vec<(String, Option<String>, PathBuf)>, DatasetError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if is_hidden(&path) {
            continue;
        }
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        if path.is_file() {
            out.push((name, None, path));
        } else if path.is_dir() {
            for sub in fs::read_dir(&path).map_err(io_err(&path))? {
                let sp = sub.map_err(io_err(&path))?.path();
                if sp.is_file() && !is_hidden(&sp) {
                    let file = sp.file_name().unwrap_or_default().to_string_lossy().into_owned();
                    out.push((format!("{name}/{file}"), Some(name.clone()), sp));
                }
            }
        }
    }
    Ok(out)
}

impl DatasetManifest {
    /// Checks unique ids, non-empty keywords and annotation values inside the domain.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut ids: BTreeMap<&str, &Path> = BTreeMap::new();
        for r in &self.records {
            if r.keyword.trim().is_empty() {
                return Err(DatasetError::EmptyKeyword(r.path.clone()));
            }
            if let Some(first) = ids.insert(&r.id, &r.path) {
                return Err(DatasetError::DuplicateId {
                    id: r.id.clone(),
                    paths: vec![first.to_path_buf(), r.path.clone()],
                });
            }
            for (attr, value) in &r.annotations {
                let domain = self
                    .attribute_domain
                    .get(attr)
                    .ok_or_else(|| DatasetError::UnknownAttribute(attr.clone()))?;
                if !domain.contains(value) {
                    return Err(DatasetError::ValueOutsideDomain {
                        attribute: attr.clone(),
                        value: value.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn to_json(&self) -> Result<String, DatasetError> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        crate::fsutil::write_atomic(path, self.to_json()?.as_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }
}

#[derive(Debug, Deserialize)]
struct AnnotationRow {
    id: String,
    attribute: String,
    value: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AnnotationSummary {
    pub applied: usize,
    /// Rows whose id is not in the manifest.
    pub unmatched: usize,
}

/// Attaches `id,attribute,value` rows to the manifest.
///
/// With `declared` domains, every value must belong to its attribute's domain.
/// Without them, each attribute's domain is the sorted set of observed values
/// (merged with whatever the manifest already declares).
pub fn apply_annotations(
    manifest: &mut DatasetManifest,
    csv_text: &str,
    declared: Option<&BTreeMap<String, Vec<String>>>,
) -> Result<AnnotationSummary, DatasetError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(csv_text.as_bytes());
    let rows: Vec<AnnotationRow> = reader.deserialize().collect::<Result<_, _>>()?;
    let index: BTreeMap<String, usize> = manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.clone(), i))
        .collect();

    let mut domain = manifest.attribute_domain.clone();
    if let Some(d) = declared {
        for (k, v) in d {
            domain.insert(k.clone(), v.clone());
        }
    }
    let mut summary = AnnotationSummary::default();
    let mut staged: BTreeMap<(usize, String), String> = BTreeMap::new();
    for row in rows {
        if let Some(d) = declared {
            let allowed = d
                .get(&row.attribute)
                .ok_or_else(|| DatasetError::UnknownAttribute(row.attribute.clone()))?;
            if !allowed.contains(&row.value) {
                return Err(DatasetError::ValueOutsideDomain {
                    attribute: row.attribute,
                    value: row.value,
                });
            }
        } else {
            let values = domain.entry(row.attribute.clone()).or_default();
            if !values.contains(&row.value) {
                values.push(row.value.clone());
                values.sort();
            }
        }
        let Some(&i) = index.get(&row.id) else {
            summary.unmatched += 1;
            continue;
        };
        let key = (i, row.attribute.clone());
        let existing = staged
            .get(&key)
            .cloned()
            .or_else(|| manifest.records[i].annotations.get(&row.attribute).cloned());
        if let Some(first) = existing {
            if first != row.value {
                return Err(DatasetError::ConflictingAnnotation {
                    id: row.id,
                    attribute: row.attribute,
                    first,
                    second: row.value,
                });
            }
        }
        staged.insert(key, row.value);
        summary.applied += 1;
    }
    for ((i, attr), value) in staged {
        manifest.records[i].annotations.insert(attr, value);
    }
    manifest.attribute_domain = domain;
    manifest.validate()?;
    Ok(summary)
}

pub fn load_annotations(
    manifest: &mut DatasetManifest,
    csv_path: &Path,
    declared: Option<&BTreeMap<String, Vec<String>>>,
) -> Result<AnnotationSummary, DatasetError> {
    let text = fs::read_to_string(csv_path).map_err(io_err(csv_path))?;
    apply_annotations(manifest, &text, declared)
}

#[derive(Clone, Debug)]
pub struct FilterOutcome {
    pub manifest: DatasetManifest,
    pub removed: usize,
    /// `(record id, message)` for detector failures; those records are kept
    /// with `face_present = None`.
    pub warnings: Vec<(String, String)>,
    /// Set when no record survived.
    pub empty: bool,
}

/// Drops records whose image has no detectable face.
pub fn filter_faceless<F, E>(manifest: &DatasetManifest, mut detect: F) -> FilterOutcome
where
    F: FnMut(&ImageRecord) -> Result<usize, E>,
    E: std::fmt::Display,
{
    let mut kept = Vec::with_capacity(manifest.records.len());
    let mut warnings = Vec::new();
    let mut removed = 0;
    for rec in &manifest.records {
        match detect(rec) {
            Ok(0) => removed += 1,
            Ok(_) => kept.push(ImageRecord {
                face_present: Some(true),
                ..rec.clone()
            }),
            Err(e) => {
                warnings.push((rec.id.clone(), e.to_string()));
                kept.push(ImageRecord {
                    face_present: None,
                    ..rec.clone()
                });
            }
        }
    }
    let empty = kept.is_empty();
    if empty {
        log::warn!("face filter removed every record");
    }
    FilterOutcome {
        manifest: DatasetManifest {
            records: kept,
            attribute_domain: manifest.attribute_domain.clone(),
        },
        removed,
        warnings,
        empty,
    }
}

/// [`filter_faceless`] with a detector run on each record's image file.
pub fn filter_faceless_with(manifest: &DatasetManifest, detector: &dyn FaceDetector) -> FilterOutcome {
    filter_faceless(manifest, |rec| -> Result<usize, FaceGeomError> {
        let img = ImagePlane::load(&rec.path)?;
        Ok(crate::facegeom::detect_faces(detector, &img)?.len())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RepresentationRow {
    pub keyword: String,
    /// Number of records annotated for the attribute.
    pub n: usize,
    /// Share of each domain value; empty when `n == 0`.
    pub proportions: BTreeMap<String, f64>,
}

/// Per-keyword shares of each value of `attribute`, over annotated records only.
pub fn representation_stats(manifest: &DatasetManifest, attribute: &str) -> Result<Vec<RepresentationRow>, DatasetError> {
    let domain = manifest
        .attribute_domain
        .get(attribute)
        .ok_or_else(|| DatasetError::UnknownAttribute(attribute.to_string()))?;
    let mut counts: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for r in &manifest.records {
        let per = counts.entry(r.keyword.as_str()).or_default();
        if let Some(v) = r.annotations.get(attribute) {
            *per.entry(v.as_str()).or_default() += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(kw, per)| {
            let n: usize = per.values().sum();
            let proportions = if n == 0 {
                BTreeMap::new()
            } else {
                domain
                    .iter()
                    .map(|v| (v.clone(), *per.get(v.as_str()).unwrap_or(&0) as f64 / n as f64))
                    .collect()
            };
            RepresentationRow {
                keyword: kw.to_string(),
                n,
                proportions,
            }
        })
        .collect())
}

/// CSV rendering: `keyword,n,<value>...` with one column per domain value.
pub fn representation_csv(rows: &[RepresentationRow], domain: &[String]) -> Result<String, DatasetError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["keyword".to_string(), "n".to_string()];
    header.extend(domain.iter().cloned());
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.keyword.clone(), row.n.to_string()];
        for v in domain {
            rec.push(row.proportions.get(v).map(|p| format!("{p}")).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| DatasetError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
