//! Face geometry: detection, picking the face to edit, skin segmentation and
//! compositing an edited crop back into its source image.
//!
//! Detectors and segmenters are pluggable through [`FaceDetector`] and
//! [`SkinSegmenter`]. The built-in implementations are colour-rule based and
//! deterministic; they are what the tests and the toy pipeline use. A learned
//! face parser can be dropped in behind the same traits.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{ImageError, ImagePlane};

#[derive(Debug, Error)]
pub enum FaceGeomError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("no face available to select")]
    NoFace,
    #[error("detector failed: {0}")]
    Detector(String),
    #[error("segmenter failed: {0}")]
    Segmenter(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("mask values must be 0 or 1 (found {0})")]
    MaskValue(u8),
}

/// Axis-aligned face box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub score: f32,
}

impl FaceBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize, score: f32) -> Self {
        Self { x, y, w, h, score }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x as f64 + self.w as f64 / 2.0, self.y as f64 + self.h as f64 / 2.0)
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x as f64 && py >= self.y as f64 && px < (self.x + self.w) as f64 && py < (self.y + self.h) as f64
    }

    /// Clamps the box into a `width`×`height` image. Returns `None` if nothing is left.
    pub fn clamped(&self, width: usize, height: usize) -> Option<FaceBox> {
        if self.x >= width || self.y >= height {
            return None;
        }
        let w = self.w.min(width - self.x);
        let h = self.h.min(height - self.y);
        (w > 0 && h > 0).then_some(FaceBox {
            w,
            h,
            score: self.score.clamp(0.0, 1.0),
            ..*self
        })
    }

    /// Grows the box by `margin`×extent on every side, clamped to the image.
    pub fn expanded(&self, margin: f64, width: usize, height: usize) -> FaceBox {
        let mx = (self.w as f64 * margin).round() as i64;
        let my = (self.h as f64 * margin).round() as i64;
        let x0 = (self.x as i64 - mx).max(0) as usize;
        let y0 = (self.y as i64 - my).max(0) as usize;
        let x1 = ((self.x + self.w) as i64 + mx).min(width as i64) as usize;
        let y1 = ((self.y + self.h) as i64 + my).min(height as i64) as usize;
        FaceBox {
            x: x0,
            y: y0,
            w: (x1 - x0).max(1),
            h: (y1 - y0).max(1),
            score: self.score,
        }
    }
}

/// Binary skin mask aligned to a face crop.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkinMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl SkinMask {
    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self, FaceGeomError> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(FaceGeomError::DimMismatch(format!(
                "mask buffer of {} for {width}x{height}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| **v > 1) {
            return Err(FaceGeomError::MaskValue(*v));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y) as u8);
            }
        }
        Self { width, height, data }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self::from_fn(width, height, |_, _| true)
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self::from_fn(width, height, |_, _| false)
    }

    /// Ellipse with axes `0.8·w` by `0.9·h` centred in the crop.
    pub fn inscribed_ellipse(width: usize, height: usize) -> Self {
        let cx = width as f64 / 2.0;
        let cy = height as f64 / 2.0;
        let rx = 0.4 * width as f64;
        let ry = 0.45 * height as f64;
        Self::from_fn(width, height, |x, y| {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            dx * dx + dy * dy <= 1.0
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Nearest-neighbour resampling; the result stays binary.
    pub fn resize_nearest(&self, new_w: usize, new_h: usize) -> SkinMask {
        let idx = |o: usize, out: usize, inp: usize| (((o as f64 + 0.5) * inp as f64 / out as f64).floor() as usize).min(inp - 1);
        SkinMask::from_fn(new_w, new_h, |x, y| {
            self.get(idx(x, new_w, self.width), idx(y, new_h, self.height))
        })
    }
}

pub trait FaceDetector: Send + Sync {
    fn detect(&self, image: &ImagePlane) -> Result<Vec<FaceBox>, FaceGeomError>;
}

impl<F> FaceDetector for F
where
    F: Fn(&ImagePlane) -> Result<Vec<FaceBox>, FaceGeomError> + Send + Sync,
{
    fn detect(&self, image: &ImagePlane) -> Result<Vec<FaceBox>, FaceGeomError> {
        self(image)
    }
}

pub trait SkinSegmenter: Send + Sync {
    fn segment(&self, crop: &ImagePlane) -> Result<SkinMask, FaceGeomError>;
}

/// Runs `detector` and normalizes its output: boxes clamped to the image and
/// sorted by descending score (stable for equal scores).
pub fn detect_faces(detector: &dyn FaceDetector, image: &ImagePlane) -> Result<Vec<FaceBox>, FaceGeomError> {
    if image.width() == 0 || image.height() == 0 {
        return Err(ImageError::InvalidDims {
            width: image.width(),
            height: image.height(),
            channels: image.channels(),
        }
        .into());
    }
    let mut boxes: Vec<FaceBox> = detector
        .detect(image)?
        .into_iter()
        .filter_map(|b| b.clamped(image.width(), image.height()))
        .collect();
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(boxes)
}

/// Picks the face whose centre is closest to the image centre. Ties go to the
/// larger box, then to the earlier list position.
pub fn select_primary_face(faces: &[FaceBox], image_w: usize, image_h: usize) -> Result<FaceBox, FaceGeomError> {
    let cx = image_w as f64 / 2.0;
    let cy = image_h as f64 / 2.0;
    faces
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| {
            let da = dist2(a.center(), (cx, cy));
            let db = dist2(b.center(), (cx, cy));
            da.total_cmp(&db)
                .then_with(|| b.area().cmp(&a.area()))
                .then_with(|| ia.cmp(ib))
        })
        .map(|(_, f)| *f)
        .ok_or(FaceGeomError::NoFace)
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub mask: SkinMask,
    pub fallback: bool,
}

/// Segments skin with `segmenter`, falling back to the inscribed-ellipse mask
/// (and flagging it) when the segmenter errors or returns nothing.
pub fn segment_skin(segmenter: &dyn SkinSegmenter, crop: &ImagePlane) -> Segmentation {
    match segmenter.segment(crop) {
        Ok(mask) if mask.width() == crop.width() && mask.height() == crop.height() && !mask.is_empty() => Segmentation {
            mask,
            fallback: false,
        },
        Ok(_) | Err(_) => Segmentation {
            mask: SkinMask::inscribed_ellipse(crop.width(), crop.height()),
            fallback: true,
        },
    }
}

/// Pastes `edited_crop` into `original` at `face_box`, only where `mask` is set.
/// Every other pixel of the output is a bit-for-bit copy of `original`.
pub fn composite(
    original: &ImagePlane,
    edited_crop: &ImagePlane,
    mask: &SkinMask,
    face_box: &FaceBox,
) -> Result<ImagePlane, FaceGeomError> {
    if edited_crop.width() != mask.width() || edited_crop.height() != mask.height() {
        return Err(FaceGeomError::DimMismatch(format!(
            "crop {}x{} vs mask {}x{}",
            edited_crop.width(),
            edited_crop.height(),
            mask.width(),
            mask.height()
        )));
    }
    if edited_crop.width() != face_box.w || edited_crop.height() != face_box.h {
        return Err(FaceGeomError::DimMismatch(format!(
            "crop {}x{} vs box {}x{}",
            edited_crop.width(),
            edited_crop.height(),
            face_box.w,
            face_box.h
        )));
    }
    if face_box.x + face_box.w > original.width() || face_box.y + face_box.h > original.height() {
        return Err(FaceGeomError::DimMismatch(format!(
            "box {:?} outside {}x{} image",
            face_box,
            original.width(),
            original.height()
        )));
    }
    if edited_crop.channels() != original.channels() {
        return Err(FaceGeomError::DimMismatch(format!(
            "channels {} vs {}",
            edited_crop.channels(),
            original.channels()
        )));
    }
    let mut out = original.clone();
    for y in 0..face_box.h {
        for x in 0..face_box.w {
            if mask.get(x, y) {
                out.pixel_mut(face_box.x + x, face_box.y + y)
                    .copy_from_slice(edited_crop.pixel(x, y));
            }
        }
    }
    Ok(out)
}

/// Colour-rule skin classifier on 8-bit RGB (uniform daylight rule).
pub fn is_skin_rgb(r: f32, g: f32, b: f32) -> bool {
    let (r, g, b) = (r * 255.0, g * 255.0, b * 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    r > 95.0 && g > 40.0 && b > 20.0 && max - min > 15.0 && (r - g).abs() > 15.0 && r > g && r > b
}

fn skin_map(image: &ImagePlane) -> Vec<bool> {
    let rgb = image.to_rgb();
    rgb.data().chunks(3).map(|p| is_skin_rgb(p[0], p[1], p[2])).collect()
}

struct Component {
    pixels: Vec<usize>,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

/// 4-connected components of the `true` cells, in raster order of first pixel.
fn components(map: &[bool], width: usize, height: usize) -> Vec<Component> {
    let mut seen = vec![false; map.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..map.len() {
        if !map[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Component {
            pixels: Vec::new(),
            x0: usize::MAX,
            y0: usize::MAX,
            x1: 0,
            y1: 0,
        };
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % width, i / width);
            comp.pixels.push(i);
            comp.x0 = comp.x0.min(x);
            comp.y0 = comp.y0.min(y);
            comp.x1 = comp.x1.max(x);
            comp.y1 = comp.y1.max(y);
            let mut visit = |j: usize| {
                if map[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
        }
        out.push(comp);
    }
    out
}

/// Skin-blob face detector. Each sufficiently large, face-shaped blob of
/// skin-coloured pixels becomes a box; the score rewards ellipse-like fill,
/// upright aspect and size.
#[derive(Clone, Debug)]
pub struct SkinToneDetector {
    /// Minimum blob area as a fraction of the image area.
    pub min_area_fraction: f64,
    /// Absolute minimum blob area in pixels.
    pub min_area_pixels: usize,
}

impl Default for SkinToneDetector {
    fn default() -> Self {
        Self {
            min_area_fraction: 0.004,
            min_area_pixels: 24,
        }
    }
}

impl FaceDetector for SkinToneDetector {
    fn detect(&self, image: &ImagePlane) -> Result<Vec<FaceBox>, FaceGeomError> {
        let (w, h) = (image.width(), image.height());
        let map = skin_map(image);
        let min_area = ((w * h) as f64 * self.min_area_fraction).ceil().max(self.min_area_pixels as f64) as usize;
        let short_side = w.min(h) as f64;
        let mut boxes = Vec::new();
        for comp in components(&map, w, h) {
            let area = comp.pixels.len();
            if area < min_area {
                continue;
            }
            let bw = comp.x1 - comp.x0 + 1;
            let bh = comp.y1 - comp.y0 + 1;
            let fill = area as f64 / (bw * bh) as f64;
            let ideal = std::f64::consts::FRAC_PI_4;
            let shape = (1.0 - (fill - ideal).abs() / ideal).clamp(0.0, 1.0);
            let aspect = bh as f64 / bw as f64;
            let aspect_term = if (0.7..=2.2).contains(&aspect) { 1.0 } else { 0.5 };
            let size = ((area as f64).sqrt() / (0.5 * short_side)).min(1.0);
            let score = (shape * aspect_term * (0.5 + 0.5 * size)) as f32;
            boxes.push(FaceBox::new(comp.x0, comp.y0, bw, bh, score.clamp(0.0, 1.0)));
        }
        Ok(boxes)
    }
}

/// Skin segmenter: colour rule restricted to the largest skin blob.
#[derive(Clone, Debug, Default)]
pub struct SkinToneSegmenter;

impl SkinSegmenter for SkinToneSegmenter {
    fn segment(&self, crop: &ImagePlane) -> Result<SkinMask, FaceGeomError> {
        let (w, h) = (crop.width(), crop.height());
        let map = skin_map(crop);
        let mut data = vec![0u8; w * h];
        if let Some(largest) = components(&map, w, h).into_iter().max_by_key(|c| c.pixels.len()) {
            for i in largest.pixels {
                data[i] = 1;
            }
        }
        SkinMask::from_raw(w, h, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SKIN: [f32; 3] = [0.85, 0.62, 0.5];
    const BG: [f32; 3] = [0.2, 0.35, 0.6];

    fn with_ellipses(w: usize, h: usize, ellipses: &[(f64, f64, f64, f64)]) -> ImagePlane {
        ImagePlane::from_fn(w, h, 3, |x, y, c| {
            let inside = ellipses.iter().any(|(cx, cy, rx, ry)| {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            });
            if inside {
                SKIN[c]
            } else {
                BG[c]
            }
        })
        .unwrap()
    }

    #[test]
    fn blank_image_has_no_faces() {
        let img = ImagePlane::zeros(40, 30, 3).unwrap();
        assert!(detect_faces(&SkinToneDetector::default(), &img).unwrap().is_empty());
        let white = ImagePlane::filled(40, 30, 3, 1.0).unwrap();
        assert!(detect_faces(&SkinToneDetector::default(), &white).unwrap().is_empty());
    }

    #[test]
    fn single_planted_face_box_contains_centroid() {
        let img = with_ellipses(80, 60, &[(30.0, 25.0, 10.0, 13.0)]);
        let faces = detect_faces(&SkinToneDetector::default(), &img).unwrap();
        assert_eq!(faces.len(), 1);
        assert!(faces[0].contains(30.0, 25.0));
        assert!(faces[0].score > 0.5);
    }

    #[test]
    fn two_planted_faces_sorted_by_score() {
        let img = with_ellipses(120, 80, &[(25.0, 30.0, 6.0, 8.0), (80.0, 40.0, 14.0, 18.0)]);
        let faces = detect_faces(&SkinToneDetector::default(), &img).unwrap();
        assert_eq!(faces.len(), 2);
        assert!(faces[0].score >= faces[1].score);
        assert!(faces[0].contains(80.0, 40.0));
        assert!(faces[1].contains(25.0, 30.0));
    }

    #[test]
    fn primary_face_singleton_and_center() {
        let a = FaceBox::new(40, 40, 20, 20, 0.9);
        assert_eq!(select_primary_face(&[a], 100, 100).unwrap(), a);
        let b = FaceBox::new(0, 0, 20, 20, 0.99);
        assert_eq!(select_primary_face(&[b, a], 100, 100).unwrap(), a);
    }

    #[test]
    fn primary_face_tie_breaks_on_area_then_index() {
        // Both centred 20px from the image centre (50, 50).
        let small = FaceBox::new(65, 45, 10, 10, 0.9);
        let big = FaceBox::new(20, 40, 20, 20, 0.1);
        assert_eq!(select_primary_face(&[small, big], 100, 100).unwrap(), big);
        assert_eq!(select_primary_face(&[big, small], 100, 100).unwrap(), big);
        let twin = FaceBox::new(60, 40, 20, 20, 0.5);
        assert_eq!(select_primary_face(&[big, twin], 100, 100).unwrap(), big);
        assert_eq!(select_primary_face(&[twin, big], 100, 100).unwrap(), twin);
    }

    #[test]
    fn primary_face_empty_is_error() {
        assert!(matches!(select_primary_face(&[], 10, 10), Err(FaceGeomError::NoFace)));
    }

    #[test]
    fn segment_uniform_ellipse_covers_interior() {
        let (w, h) = (48, 56);
        let img = with_ellipses(w, h, &[(24.0, 28.0, 18.0, 22.0)]);
        let seg = segment_skin(&SkinToneSegmenter, &img);
        assert!(!seg.fallback);
        let truth = SkinMask::from_fn(w, h, |x, y| {
            let dx = (x as f64 + 0.5 - 24.0) / 18.0;
            let dy = (y as f64 + 0.5 - 28.0) / 22.0;
            dx * dx + dy * dy <= 1.0
        });
        let covered = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|(x, y)| truth.get(*x, *y) && seg.mask.get(*x, *y))
            .count();
        assert!(covered as f64 >= 0.95 * truth.count() as f64);
    }

    #[test]
    fn segment_background_falls_back_to_ellipse() {
        let img = ImagePlane::filled(30, 40, 3, 0.1).unwrap();
        let seg = segment_skin(&SkinToneSegmenter, &img);
        assert!(seg.fallback);
        assert_eq!(seg.mask, SkinMask::inscribed_ellipse(30, 40));
        assert!(seg.mask.data().iter().all(|v| *v <= 1));
    }

    #[test]
    fn composite_zero_and_full_masks() {
        let orig = ImagePlane::from_fn(20, 20, 3, |x, y, c| ((x + 2 * y + c) % 7) as f32 / 7.0).unwrap();
        let edit = ImagePlane::filled(6, 5, 3, 0.9).unwrap();
        let bx = FaceBox::new(3, 4, 6, 5, 1.0);
        let same = composite(&orig, &edit, &SkinMask::empty(6, 5), &bx).unwrap();
        assert_eq!(same, orig);
        let full = composite(&orig, &edit, &SkinMask::full(6, 5), &bx).unwrap();
        assert_eq!(full.crop(3, 4, 6, 5).unwrap(), edit);
    }

    #[test]
    fn composite_dim_mismatch() {
        let orig = ImagePlane::zeros(10, 10, 3).unwrap();
        let edit = ImagePlane::zeros(4, 4, 3).unwrap();
        let bx = FaceBox::new(0, 0, 4, 4, 1.0);
        assert!(composite(&orig, &edit, &SkinMask::full(3, 4), &bx).is_err());
        assert!(composite(&orig, &edit, &SkinMask::full(4, 4), &FaceBox::new(8, 8, 4, 4, 1.0)).is_err());
    }

    #[test]
    fn expanded_box_is_clamped() {
        let b = FaceBox::new(2, 2, 10, 10, 0.5).expanded(0.2, 14, 30);
        assert_eq!((b.x, b.y, b.w, b.h), (0, 0, 14, 14));
    }
}
