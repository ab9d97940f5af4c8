//! Procedural face-proxy images with known attribute ground truth.
//!
//! Each sample is a skin-toned ellipse (the "face") over a non-skin
//! background, with hair, eyes and a mouth. The sensitive attribute shifts the
//! skin tint (red up and blue down for `+1`); the controlled attribute opens
//! the mouth and agrees with the sensitive one 70% of the time, so an
//! uncontrolled model would entangle the two. Hair length also leans on the
//! sensitive attribute (long with probability 0.8 for `-1`, 0.2 for `+1`),
//! so an unconstrained encoder leaks the attribute through a large image
//! feature the decoder cannot get from the conditioning alone. All skin
//! colours satisfy the skin-colour rule used by
//! [`crate::facegeom::SkinToneDetector`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{AttributeRole, AttributeSpec};
use crate::dataset::{apply_annotations, build_manifest, DatasetError, DatasetManifest};
use crate::image::ImagePlane;

pub const SENSITIVE: &str = "tint";
pub const CONTROLLED: &str = "mouth";
/// Skin red shift per unit of the sensitive attribute.
pub const TINT_RED: f32 = 0.06;
/// Skin blue shift per unit of the sensitive attribute (subtracted).
pub const TINT_BLUE: f32 = 0.08;
/// Probability that the controlled attribute equals the sensitive one.
pub const ENTANGLEMENT: f64 = 0.7;
/// Probability of long hair given a negative sensitive attribute (and of short hair given a positive one).
pub const HAIR_LEAN: f64 = 0.8;

/// Ellipse in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    /// Normalized squared radius of the pixel centre at `(x, y)`.
    pub fn rho(&self, x: usize, y: usize) -> f64 {
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        dx * dx + dy * dy
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.rho(x, y) <= 1.0
    }

    fn scaled(&self, dx: f64, dy: f64, rx: f64, ry: f64) -> Ellipse {
        Ellipse {
            cx: self.cx + dx * self.rx,
            cy: self.cy + dy * self.ry,
            rx: rx * self.rx,
            ry: ry * self.ry,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToySample {
    pub image: ImagePlane,
    /// `±1`.
    pub sensitive: f64,
    /// `±1`; `+1` is an open mouth.
    pub controlled: f64,
    pub face: Ellipse,
    pub long_hair: bool,
    /// Pixels painted with plain skin (no eyes, mouth or hair).
    pub skin: Vec<bool>,
}

struct Draw {
    sensitive: f64,
    controlled: f64,
    long_hair: bool,
}

fn draw_labels(rng: &mut ChaCha8Rng) -> Draw {
    let sensitive = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let controlled = if rng.random_bool(ENTANGLEMENT) { sensitive } else { -sensitive };
    let long_hair = rng.random_bool(if sensitive < 0.0 { HAIR_LEAN } else { 1.0 - HAIR_LEAN });
    Draw {
        sensitive,
        controlled,
        long_hair,
    }
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Draws sample `index` of the stream identified by `seed`. The attributes are
/// random; see [`render`] to fix them.
pub fn generate(size: usize, seed: u64, index: u64) -> ToySample {
    let mut rng = sample_rng(seed, index);
    let d = draw_labels(&mut rng);
    render_with(size, &mut rng, d.sensitive, d.controlled, d.long_hair)
}

/// Draws the scene of sample `index` (hair included) with the attributes
/// forced to the given values (any real sensitive value; `controlled > 0`
/// opens the mouth).
pub fn render(size: usize, seed: u64, index: u64, sensitive: f64, controlled: f64) -> ToySample {
    let mut rng = sample_rng(seed, index);
    let d = draw_labels(&mut rng);
    render_with(size, &mut rng, sensitive, controlled, d.long_hair)
}

fn render_with(size: usize, rng: &mut ChaCha8Rng, sensitive: f64, controlled: f64, long_hair: bool) -> ToySample {
    let s = size as f64 / 64.0;
    let bg_top = [
        rng.random_range(0.08..0.33f32),
        rng.random_range(0.2..0.6f32),
        rng.random_range(0.35..0.75f32),
    ];
    let bg_shift = rng.random_range(-0.1..0.1f32);
    let face = Ellipse {
        cx: size as f64 / 2.0 + rng.random_range(-3.0..3.0) * s,
        cy: size as f64 / 2.0 + rng.random_range(-1.0..3.0) * s,
        rx: rng.random_range(13.0..17.0) * s,
        ry: rng.random_range(17.0..21.0) * s,
    };
    let hair = if long_hair {
        face.scaled(0.0, 0.12, 1.4, 1.3)
    } else {
        face.scaled(0.0, -0.22, 1.12, 0.95)
    };
    let fringe = face.scaled(0.0, -0.22, 1.12, 0.95);
    let hair_rgb = [
        rng.random_range(0.05..0.3f32),
        rng.random_range(0.03..0.2f32),
        rng.random_range(0.02..0.15f32),
    ];
    let a = sensitive as f32;
    let skin_rgb = [
        rng.random_range(0.72..0.84f32) + TINT_RED * a,
        rng.random_range(0.48..0.56f32),
        rng.random_range(0.40..0.47f32) - TINT_BLUE * a,
    ];
    let eye_l = face.scaled(-0.4, -0.2, 0.13, 0.09);
    let eye_r = face.scaled(0.4, -0.2, 0.13, 0.09);
    let mouth = if controlled > 0.0 {
        face.scaled(0.0, 0.5, 0.36, 0.16)
    } else {
        face.scaled(0.0, 0.5, 0.36, 0.05)
    };
    let mouth_rgb = [0.35f32, 0.07, 0.1];
    let eye_rgb = [0.12f32, 0.1, 0.1];
    let noise: Vec<f32> = (0..size * size).map(|_| rng.random_range(-0.01..0.01f32)).collect();

    let mut skin = vec![false; size * size];
    let image = ImagePlane::from_fn(size, size, 3, |x, y, c| {
        let n = noise[y * size + x];
        let rgb = if face.contains(x, y) {
            if eye_l.contains(x, y) || eye_r.contains(x, y) {
                eye_rgb
            } else if mouth.contains(x, y) {
                mouth_rgb
            } else if face.cy - (y as f64 + 0.5) > 0.55 * face.ry && fringe.contains(x, y) {
                hair_rgb
            } else {
                if c == 0 {
                    skin[y * size + x] = true;
                }
                skin_rgb
            }
        } else if hair.contains(x, y) {
            hair_rgb
        } else {
            let g = bg_shift * (y as f32 / size as f32 - 0.5);
            return bg_top[c] + g + n;
        };
        rgb[c] + n
    })
    .expect("positive size");
    ToySample {
        image,
        sensitive,
        controlled,
        face,
        long_hair,
        skin,
    }
}

/// Ground-truth attribute score of an image rendered over `sample`'s scene:
/// mean of `R - B` over the inner skin region. Higher means more `+1`-like.
pub fn attribute_score(image: &ImagePlane, sample: &ToySample) -> f64 {
    let size = image.width();
    let core = sample.face.scaled(0.0, 0.0, 0.85, 0.85);
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..image.height() {
        for x in 0..size {
            if sample.skin[y * size + x] && core.contains(x, y) {
                sum += (image.get(x, y, 0) - image.get(x, y, 2)) as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation. Returns 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman inputs differ in length");
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Attribute specs matching the generator: sensitive `tint` (`cool` = -1,
/// `warm` = +1) and controlled `mouth` (`closed` = -1, `open` = +1).
pub fn toy_specs() -> Vec<AttributeSpec> {
    vec![
        AttributeSpec::new(SENSITIVE, AttributeRole::Sensitive, "cool", "warm"),
        AttributeSpec::new(CONTROLLED, AttributeRole::Controlled, "closed", "open"),
    ]
}

/// Training labels of a sample in the order of [`toy_specs`].
pub fn labels(sample: &ToySample) -> Vec<f64> {
    vec![sample.sensitive, sample.controlled]
}

#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub root: PathBuf,
    pub annotations: PathBuf,
    pub manifest: DatasetManifest,
}

/// Writes `n` samples as `<dir>/images/<keyword>/toy_<i>.png` (keywords
/// assigned round-robin) plus `<dir>/annotations.csv`, and returns the
/// annotated manifest.
pub fn write_dataset(dir: &Path, n: usize, size: usize, seed: u64, keywords: &[&str]) -> Result<ToyDataset, DatasetError> {
    let root = dir.join("images");
    let keywords: Vec<&str> = if keywords.is_empty() { vec!["toy"] } else { keywords.to_vec() };
    let mut by_path: BTreeMap<PathBuf, ToySample> = BTreeMap::new();
    for i in 0..n {
        let kw = keywords[i % keywords.len()];
        let sample = generate(size, seed, i as u64);
        let path = root.join(kw).join(format!("toy_{i:05}.png"));
        sample.image.save(&path).map_err(|e| DatasetError::Io {
            path: path.clone(),
            source: std::io::Error::other(e.to_string()),
        })?;
        by_path.insert(path, sample);
    }
    let kws: Vec<String> = keywords.iter().map(|s| s.to_string()).collect();
    let mut manifest = build_manifest(&root, &kws)?.manifest;
    let specs = toy_specs();
    let mut csv = String::from("id,attribute,value\n");
    for rec in &manifest.records {
        let sample = &by_path[&rec.path];
        for (spec, v) in specs.iter().zip(labels(sample)) {
            let value = if v > 0.0 { &spec.values[1] } else { &spec.values[0] };
            csv.push_str(&format!("{},{},{}\n", rec.id, spec.name, value));
        }
    }
    let annotations = dir.join("annotations.csv");
    crate::fsutil::write_atomic(&annotations, csv.as_bytes()).map_err(|source| DatasetError::Io {
        path: annotations.clone(),
        source,
    })?;
    apply_annotations(&mut manifest, &csv, None)?;
    Ok(ToyDataset {
        root,
        annotations,
        manifest,
    })
}
