//! Counterfactual series: sweep the sensitive attribute over a grid, decode
//! the primary face at each value and paste the result back onto the
//! facial-skin region of the source.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{AttributeRole, AttributeVector, Codec, CodecError};
use crate::dataset::ImageRecord;
use crate::facegeom::{
    composite, detect_faces, segment_skin, select_primary_face, FaceBox, FaceDetector, FaceGeomError, SkinSegmenter,
};
use crate::image::{ImageError, ImagePlane};

/// Margin added on every side of the detected face box before cropping.
pub const CROP_MARGIN: f64 = 0.2;
pub const SIDECAR: &str = "series.json";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("grid needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("grid range must satisfy lo < hi, got ({lo}, {hi})")]
    BadRange { lo: f64, hi: f64 },
    #[error("no face found in source image")]
    NoFace,
    #[error("attribute `{0}` is not the model's sensitive attribute")]
    NotSensitive(String),
    #[error(transparent)]
    Face(FaceGeomError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("sidecar {path}: {message}")]
    Sidecar { path: PathBuf, message: String },
}

impl From<FaceGeomError> for SynthError {
    fn from(e: FaceGeomError) -> Self {
        match e {
            FaceGeomError::NoFace => SynthError::NoFace,
            other => SynthError::Face(other),
        }
    }
}

/// `K` evenly spaced values of one attribute over `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeGrid {
    pub attribute: String,
    values: Vec<f64>,
}

impl AttributeGrid {
    /// `values[k-1] = lo + (hi - lo) * (k - 1) / (K - 1)` for `k = 1..=K`.
    ///
    /// For odd `K` over a symmetric range the centre is pinned to exactly 0;
    /// the formula alone can miss by an ulp for ranges like `(-0.1, 0.1)`.
    pub fn new(attribute: &str, k: usize, lo: f64, hi: f64) -> Result<Self, SynthError> {
        if k < 2 {
            return Err(SynthError::TooFewPoints(k));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(SynthError::BadRange { lo, hi });
        }
        let mut values: Vec<f64> = (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect();
        if k % 2 == 1 && lo == -hi {
            values[k / 2] = 0.0;
        }
        Ok(Self {
            attribute: attribute.to_string(),
            values,
        })
    }

    /// Grid from stored values (a sidecar); they must be finite and strictly increasing.
    pub fn from_values(attribute: &str, values: Vec<f64>) -> Result<Self, SynthError> {
        if values.len() < 2 {
            return Err(SynthError::TooFewPoints(values.len()));
        }
        let lo = values[0];
        let hi = values[values.len() - 1];
        if values.iter().any(|v| !v.is_finite()) || values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(SynthError::BadRange { lo, hi });
        }
        Ok(Self {
            attribute: attribute.to_string(),
            values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Zero-based centre index `(K+1)/2 - 1`; `None` for even `K`.
    pub fn center_index(&self) -> Option<usize> {
        (self.values.len() % 2 == 1).then_some(self.values.len() / 2)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeriesFlags {
    /// The skin segmenter failed and the ellipse mask was used.
    pub fallback_mask: bool,
    /// Controlled attributes conditioned at the neutral value for lack of annotations.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub defaulted_controlled: Vec<String>,
}

impl SeriesFlags {
    pub fn any(&self) -> bool {
        self.fallback_mask || !self.defaulted_controlled.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct CounterfactualSeries {
    pub source_id: String,
    pub grid: AttributeGrid,
    pub images: Vec<ImagePlane>,
    pub controlled_values: AttributeVector,
    pub flags: SeriesFlags,
    /// Region that was cropped, edited and pasted back.
    pub crop_box: FaceBox,
}

/// Controlled-attribute conditioning for a record: annotated values where
/// present, the neutral value 0 (conditioning `(0.5, 0.5)`) otherwise.
pub fn controlled_values(codec: &Codec, record: &ImageRecord) -> Result<(AttributeVector, Vec<String>), CodecError> {
    let mut values = AttributeVector::new();
    let mut defaulted = Vec::new();
    for spec in codec.specs.iter().filter(|s| s.role == AttributeRole::Controlled) {
        match record.annotations.get(&spec.name) {
            Some(v) => values.set(&spec.name, spec.encode_value(v)?),
            None => {
                values.set(&spec.name, 0.0);
                defaulted.push(spec.name.clone());
            }
        }
    }
    Ok((values, defaulted))
}

/// Detection and segmentation backends used by [`synthesize_series`].
pub struct FacePipeline<'a> {
    pub detector: &'a dyn FaceDetector,
    pub segmenter: &'a dyn SkinSegmenter,
}

/// Builds the series for one source image.
///
/// The primary face is cropped with [`CROP_MARGIN`], resized to the codec
/// resolution, segmented and encoded once. Each grid value is decoded with
/// the controlled attributes fixed, resized back to the crop size and pasted
/// through the nearest-upsampled skin mask.
pub fn synthesize_series(
    source_id: &str,
    image: &ImagePlane,
    codec: &Codec,
    grid: &AttributeGrid,
    controlled: &AttributeVector,
    pipeline: &FacePipeline<'_>,
) -> Result<CounterfactualSeries, SynthError> {
    if codec.sensitive().name != grid.attribute {
        return Err(SynthError::NotSensitive(grid.attribute.clone()));
    }
    let image = image.to_rgb();
    let faces = detect_faces(pipeline.detector, &image)?;
    let primary = select_primary_face(&faces, image.width(), image.height())?;
    let crop_box = primary.expanded(CROP_MARGIN, image.width(), image.height());
    let crop = image.crop(crop_box.x, crop_box.y, crop_box.w, crop_box.h)?;
    let r = codec.config.resolution;
    let small = crop.resize_bilinear(r, r)?;
    let seg = segment_skin(pipeline.segmenter, &small);
    let mask = seg.mask.resize_nearest(crop_box.w, crop_box.h);
    let z = codec.encode(&small.with_channels(codec.config.channels))?;

    let mut images = Vec::with_capacity(grid.len());
    for &a in grid.values() {
        let mut attrs = controlled.clone();
        attrs.set(&grid.attribute, a);
        let edited = codec
            .decode(&z, &attrs)?
            .to_rgb()
            .resize_bilinear(crop_box.w, crop_box.h)?;
        images.push(composite(&image, &edited, &mask, &crop_box)?);
    }
    Ok(CounterfactualSeries {
        source_id: source_id.to_string(),
        grid: grid.clone(),
        images,
        controlled_values: controlled.clone(),
        flags: SeriesFlags {
            fallback_mask: seg.fallback,
            defaulted_controlled: Vec::new(),
        },
        crop_box,
    })
}

/// One synthesized image as listed in the sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesImage {
    /// 1-based grid index.
    pub k: usize,
    pub a: f64,
    pub file: String,
    /// [`ImagePlane::content_digest`] of the stored image.
    pub digest: String,
}

/// `series.json`: everything needed to join probe results back to grid values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesSidecar {
    pub source_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword: Option<String>,
    pub attribute: String,
    pub grid: Vec<f64>,
    pub controlled_values: AttributeVector,
    pub flags: SeriesFlags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_box: Option<FaceBox>,
    pub images: Vec<SeriesImage>,
}

impl SeriesSidecar {
    pub fn k(&self) -> usize {
        self.grid.len()
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = std::fs::read_to_string(path).map_err(|source| SynthError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let s: SeriesSidecar = serde_json::from_str(&text).map_err(|e| SynthError::Sidecar {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if s.images.len() != s.grid.len() || s.images.iter().enumerate().any(|(i, im)| im.k != i + 1) {
            return Err(SynthError::Sidecar {
                path: path.to_path_buf(),
                message: "image list does not match the grid".into(),
            });
        }
        Ok(s)
    }
}

pub fn image_file_name(attribute: &str, k: usize) -> String {
    format!("{attribute}_{k}.png")
}

pub fn series_dir(out: &Path, source_id: &str) -> PathBuf {
    out.join(source_id)
}

/// True once a series for `source_id` has been fully written under `out`.
pub fn series_exists(out: &Path, source_id: &str) -> bool {
    series_dir(out, source_id).join(SIDECAR).is_file()
}

/// Writes `<out>/<source-id>/<attribute>_<k>.png` for `k = 1..=K`, then the
/// sidecar. The sidecar is written last, so its presence marks a complete series.
pub fn write_series(
    series: &CounterfactualSeries,
    out: &Path,
    record: Option<&ImageRecord>,
    flags: &SeriesFlags,
) -> Result<SeriesSidecar, SynthError> {
    let dir = series_dir(out, &series.source_id);
    let mut images = Vec::with_capacity(series.images.len());
    for (i, (img, a)) in series.images.iter().zip(series.grid.values()).enumerate() {
        let file = image_file_name(&series.grid.attribute, i + 1);
        img.save(&dir.join(&file))?;
        images.push(SeriesImage {
            k: i + 1,
            a: *a,
            file,
            digest: img.content_digest(),
        });
    }
    let sidecar = SeriesSidecar {
        source_id: series.source_id.clone(),
        source_path: record.map(|r| r.path.clone()),
        keyword: record.map(|r| r.keyword.clone()),
        attribute: series.grid.attribute.clone(),
        grid: series.grid.values().to_vec(),
        controlled_values: series.controlled_values.clone(),
        flags: flags.clone(),
        crop_box: Some(series.crop_box),
        images,
    };
    let path = dir.join(SIDECAR);
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n";
    crate::fsutil::write_atomic(&path, json.as_bytes()).map_err(|source| SynthError::Io { path, source })?;
    Ok(sidecar)
}

/// Every complete series under `out`, ordered by source id.
pub fn load_series_dir(out: &Path) -> Result<Vec<(PathBuf, SeriesSidecar)>, SynthError> {
    let io = |source| SynthError::Io {
        path: out.to_path_buf(),
        source,
    };
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(out).map_err(io)? {
        let p = entry.map_err(io)?.path();
        if p.join(SIDECAR).is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    dirs.into_iter()
        .map(|d| {
            let s = SeriesSidecar::load(&d.join(SIDECAR))?;
            Ok((d, s))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::facegeom::{SkinToneDetector, SkinToneSegmenter};
    use crate::toy;

    #[test]
    fn grid_examples() {
        let g = AttributeGrid::new("g", 5, -2.0, 2.0).unwrap();
        assert_eq!(g.values(), &[-2.0, -1.0, 0.0, 1.0, 2.0]);
        assert_eq!(g.center_index(), Some(2));
        assert_eq!(AttributeGrid::new("g", 2, 0.0, 1.0).unwrap().values(), &[0.0, 1.0]);
        assert_eq!(AttributeGrid::new("g", 4, 0.0, 1.0).unwrap().center_index(), None);
        assert!(matches!(AttributeGrid::new("g", 1, 0.0, 1.0), Err(SynthError::TooFewPoints(1))));
        assert!(AttributeGrid::new("g", 3, 1.0, 1.0).is_err());
        let narrow = AttributeGrid::new("g", 7, -0.1, 0.1).unwrap();
        assert_eq!(narrow.values()[3], 0.0);
    }

    fn pipeline_fixture() -> (Codec, toy::ToySample) {
        let mut cfg = CodecConfig::tiny(16, 4);
        cfg.seed = 3;
        (Codec::new(cfg, toy::toy_specs()).unwrap(), toy::generate(64, 4, 0))
    }

    #[test]
    fn series_has_k_images_equal_outside_the_crop() {
        let (codec, s) = pipeline_fixture();
        let grid = AttributeGrid::new(toy::SENSITIVE, 7, -2.0, 2.0).unwrap();
        let controlled = AttributeVector::new().with(toy::CONTROLLED, 1.0);
        let det = SkinToneDetector::default();
        let pipe = FacePipeline {
            detector: &det,
            segmenter: &SkinToneSegmenter,
        };
        let series = synthesize_series("src", &s.image, &codec, &grid, &controlled, &pipe).unwrap();
        assert_eq!(series.images.len(), 7);
        assert_eq!(series.controlled_values, controlled);
        let b = series.crop_box;
        for img in &series.images {
            for y in 0..64 {
                for x in 0..64 {
                    if !(x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h) {
                        assert_eq!(img.pixel(x, y), s.image.pixel(x, y));
                    }
                }
            }
        }
    }

    #[test]
    fn no_face_and_wrong_attribute() {
        let (codec, _) = pipeline_fixture();
        let blank = ImagePlane::filled(32, 32, 3, 0.2).unwrap();
        let det = SkinToneDetector::default();
        let pipe = FacePipeline {
            detector: &det,
            segmenter: &SkinToneSegmenter,
        };
        let grid = AttributeGrid::new(toy::SENSITIVE, 3, -1.0, 1.0).unwrap();
        let ctl = AttributeVector::new().with(toy::CONTROLLED, 1.0);
        assert!(matches!(
            synthesize_series("x", &blank, &codec, &grid, &ctl, &pipe),
            Err(SynthError::NoFace)
        ));
        let other = AttributeGrid::new(toy::CONTROLLED, 3, -1.0, 1.0).unwrap();
        assert!(matches!(
            synthesize_series("x", &blank, &codec, &other, &ctl, &pipe),
            Err(SynthError::NotSensitive(_))
        ));
    }

    #[test]
    fn controlled_defaults_are_neutral_and_reported() {
        let (codec, _) = pipeline_fixture();
        let mut rec = ImageRecord {
            id: "r".into(),
            path: "r.png".into(),
            keyword: "k".into(),
            qualifier: None,
            annotations: Default::default(),
            face_present: None,
        };
        let (v, d) = controlled_values(&codec, &rec).unwrap();
        assert_eq!(v.get(toy::CONTROLLED), Some(0.0));
        assert_eq!(d, vec![toy::CONTROLLED.to_string()]);
        rec.annotations.insert(toy::CONTROLLED.into(), "open".into());
        let (v, d) = controlled_values(&codec, &rec).unwrap();
        assert_eq!(v.get(toy::CONTROLLED), Some(1.0));
        assert!(d.is_empty());
    }

    #[test]
    fn write_and_reload_sidecar() {
        let (codec, s) = pipeline_fixture();
        let grid = AttributeGrid::new(toy::SENSITIVE, 5, -2.0, 2.0).unwrap();
        let ctl = AttributeVector::new().with(toy::CONTROLLED, -1.0);
        let det = SkinToneDetector::default();
        let pipe = FacePipeline {
            detector: &det,
            segmenter: &SkinToneSegmenter,
        };
        let series = synthesize_series("abc", &s.image, &codec, &grid, &ctl, &pipe).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(!series_exists(dir.path(), "abc"));
        let written = write_series(&series, dir.path(), None, &series.flags).unwrap();
        assert!(series_exists(dir.path(), "abc"));
        let loaded = load_series_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].1, written);
        for im in &written.images {
            let back = ImagePlane::load(&loaded[0].0.join(&im.file)).unwrap();
            assert_eq!(back.content_digest(), im.digest);
        }
        assert_eq!(written.images[4].file, "tint_5.png");
    }
}
