//! Attribute-manipulation codec.
//!
//! An encoder maps a face crop to a latent code, a decoder rebuilds the crop
//! from that code plus explicit attribute values, and a latent discriminator
//! tries to recover the attributes from the code alone. Training pushes the
//! encoder to defeat the discriminator, so the attributes can only reach the
//! output through the decoder's conditioning input. Changing that input at
//! synthesis time changes the attribute and little else.
//!
//! The network is a conditioned multilayer perceptron operating on flattened
//! crops. All arithmetic is `f64` and single threaded, so results are
//! bit-reproducible for a given seed.

mod artifact;
pub mod nn;
mod train;

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{ImageError, ImagePlane};
use nn::{Activation, Mlp};

pub use artifact::{load_artifact, save_artifact, ARTIFACT_FORMAT_VERSION};
pub use train::{
    chance_rate, discriminator_accuracy, fresh_probe_accuracy, lambda_at, load_training_set, reconstruction_loss,
    reconstruction_loss_and_grad, train, train_on, ProgressRecord, StepLosses, TrainOptions, TrainOutcome, TrainState,
    TrainingSet,
};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("missing value for attribute `{0}`")]
    MissingAttribute(String),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("records lack annotations required for training: {}", .0.join(", "))]
    Unannotated(Vec<String>),
    #[error("attribute `{attribute}` has value `{value}` outside its declared pair")]
    BadAnnotation { attribute: String, value: String },
    #[error("non-finite loss at step {step}: {losses:?}")]
    NonFinite { step: u64, losses: StepLosses },
    #[error("artifact: {0}")]
    Artifact(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeRole {
    /// The attribute swept at synthesis time.
    Sensitive,
    /// Modelled during training, held at the source value during synthesis.
    Controlled,
}

/// A binary attribute the codec is conditioned on.
///
/// `values[0]` is the class encoded as `a = -1`, `values[1]` the class
/// encoded as `a = +1`. The "positive class" probability reported by the
/// discriminator refers to `values[1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub role: AttributeRole,
    pub values: [String; 2],
    #[serde(default = "default_test_range")]
    pub test_range: (f64, f64),
}

fn default_test_range() -> (f64, f64) {
    (-2.0, 2.0)
}

impl AttributeSpec {
    pub fn new(name: &str, role: AttributeRole, negative: &str, positive: &str) -> Self {
        Self {
            name: name.to_string(),
            role,
            values: [negative.to_string(), positive.to_string()],
            test_range: default_test_range(),
        }
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.name.trim().is_empty() {
            return Err(CodecError::Config("attribute name is empty".into()));
        }
        if self.values[0] == self.values[1] {
            return Err(CodecError::Config(format!("attribute `{}` has identical classes", self.name)));
        }
        if !(self.test_range.0 < self.test_range.1) {
            return Err(CodecError::Config(format!(
                "attribute `{}` test range {:?} is empty",
                self.name, self.test_range
            )));
        }
        Ok(())
    }

    /// Training endpoint (`-1` or `+1`) for a categorical annotation.
    pub fn encode_value(&self, value: &str) -> Result<f64, CodecError> {
        if value == self.values[0] {
            Ok(-1.0)
        } else if value == self.values[1] {
            Ok(1.0)
        } else {
            Err(CodecError::BadAnnotation {
                attribute: self.name.clone(),
                value: value.to_string(),
            })
        }
    }
}

/// Checks a spec list: unique names and exactly one sensitive attribute.
pub fn validate_specs(specs: &[AttributeSpec]) -> Result<(), CodecError> {
    if specs.is_empty() {
        return Err(CodecError::Config("no attribute specs".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in specs {
        s.validate()?;
        if !seen.insert(s.name.as_str()) {
            return Err(CodecError::Config(format!("duplicate attribute `{}`", s.name)));
        }
    }
    let sensitive = specs.iter().filter(|s| s.role == AttributeRole::Sensitive).count();
    if sensitive != 1 {
        return Err(CodecError::Config(format!(
            "exactly one sensitive attribute is required, found {sensitive}"
        )));
    }
    Ok(())
}

/// Real-valued attribute assignment, keyed by attribute name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector(pub BTreeMap<String, f64>);

impl AttributeVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.0.insert(name.to_string(), value);
        self
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.0.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }
}

/// Maps attribute values to the decoder's two-column conditioning.
///
/// `a` is shifted to `t = (a + 1) / 2` and fed as `(1 - t, t)`, so `a = ±1`
/// reproduce the one-hot training endpoints and `|a| > 1` extrapolates.
pub fn conditioning(a: f64) -> [f64; 2] {
    let t = (a + 1.0) / 2.0;
    [1.0 - t, t]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    /// `(grid_h, grid_w, channels)`; the dense codec uses a `1×1` grid.
    pub shape: (usize, usize, usize),
    pub data: Vec<f64>,
}

impl LatentCode {
    pub fn distance(&self, other: &LatentCode) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialTarget {
    /// Encoder pushes every discriminator output toward 0.5.
    #[default]
    Confusion,
    /// Encoder pushes the discriminator toward the flipped label.
    Flipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    /// Square input side in pixels.
    pub resolution: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub lambda_max: f64,
    pub lambda_ramp_steps: u64,
    pub adversarial_target: AdversarialTarget,
    pub lr_autoencoder: f64,
    pub lr_discriminator: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            channels: 3,
            latent_dim: 32,
            encoder_hidden: vec![128],
            decoder_hidden: vec![128],
            discriminator_hidden: vec![64],
            lambda_max: 0.05,
            lambda_ramp_steps: 500,
            adversarial_target: AdversarialTarget::Confusion,
            lr_autoencoder: 1e-3,
            lr_discriminator: 1e-3,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 32,
            steps: 2000,
            seed: 0,
        }
    }
}

impl CodecConfig {
    /// Tiny configuration used by gradient checks and fast tests.
    pub fn tiny(resolution: usize, latent_dim: usize) -> Self {
        Self {
            resolution,
            channels: 3,
            latent_dim,
            encoder_hidden: vec![16],
            decoder_hidden: vec![16],
            discriminator_hidden: vec![8],
            batch_size: 8,
            steps: 50,
            lambda_ramp_steps: 20,
            ..Self::default()
        }
    }

    pub fn input_dim(&self) -> usize {
        self.resolution * self.resolution * self.channels
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        let positive = [
            ("resolution", self.resolution),
            ("channels", self.channels),
            ("latent_dim", self.latent_dim),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CodecError::Config(format!("{name} must be positive")));
            }
        }
        for (name, widths) in [
            ("encoder_hidden", &self.encoder_hidden),
            ("decoder_hidden", &self.decoder_hidden),
            ("discriminator_hidden", &self.discriminator_hidden),
        ] {
            if widths.contains(&0) {
                return Err(CodecError::Config(format!("{name} widths must be positive")));
            }
        }
        for (name, v) in [
            ("lr_autoencoder", self.lr_autoencoder),
            ("lr_discriminator", self.lr_discriminator),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CodecError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return Err(CodecError::Config("lambda_max must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(CodecError::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Encoder, conditioned decoder and latent discriminator with their specs.
#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    pub config: CodecConfig,
    pub specs: Vec<AttributeSpec>,
    pub(crate) encoder: Mlp,
    pub(crate) decoder: Mlp,
    pub(crate) discriminator: Mlp,
}

impl Codec {
    /// Freshly initialized model; weights depend only on `config.seed`.
    pub fn new(config: CodecConfig, specs: Vec<AttributeSpec>) -> Result<Self, CodecError> {
        config.validate()?;
        validate_specs(&specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let cond = 2 * specs.len();
        let mut enc_w = vec![config.input_dim()];
        enc_w.extend(&config.encoder_hidden);
        enc_w.push(config.latent_dim);
        let mut dec_w = vec![config.latent_dim];
        dec_w.extend(&config.decoder_hidden);
        dec_w.push(config.input_dim());
        let mut dis_w = vec![config.latent_dim];
        dis_w.extend(&config.discriminator_hidden);
        dis_w.push(specs.len());
        let encoder = Mlp::new(&enc_w, Activation::LeakyRelu, Activation::Tanh, 0, &mut rng);
        let decoder = Mlp::new(&dec_w, Activation::LeakyRelu, Activation::Sigmoid, cond, &mut rng);
        let discriminator = Mlp::new(&dis_w, Activation::LeakyRelu, Activation::Identity, 0, &mut rng);
        Ok(Self {
            config,
            specs,
            encoder,
            decoder,
            discriminator,
        })
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (1, 1, self.config.latent_dim)
    }

    pub fn sensitive(&self) -> &AttributeSpec {
        self.specs
            .iter()
            .find(|s| s.role == AttributeRole::Sensitive)
            .expect("validated specs contain one sensitive attribute")
    }

    pub fn spec(&self, name: &str) -> Option<&AttributeSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// Flattens a plane into one input row after checking its shape.
    fn image_row(&self, x: &ImagePlane) -> Result<Vec<f64>, CodecError> {
        let r = self.config.resolution;
        if x.width() != r || x.height() != r || x.channels() != self.config.channels {
            return Err(CodecError::Shape {
                expected: format!("{r}x{r}x{}", self.config.channels),
                got: format!("{}x{}x{}", x.width(), x.height(), x.channels()),
            });
        }
        Ok(x.data().iter().map(|v| *v as f64).collect())
    }

    pub(crate) fn scale_input(x: ArrayView2<f64>) -> Array2<f64> {
        x.mapv(|v| 2.0 * v - 1.0)
    }

    pub fn encode(&self, x: &ImagePlane) -> Result<LatentCode, CodecError> {
        let row = self.image_row(x)?;
        let input = Array2::from_shape_vec((1, row.len()), row).expect("row shape");
        let z = self.encoder.predict(Self::scale_input(input.view()).view(), None);
        Ok(LatentCode {
            shape: self.latent_shape(),
            data: z.into_raw_vec_and_offset().0,
        })
    }

    fn check_code(&self, z: &LatentCode) -> Result<(), CodecError> {
        if z.shape != self.latent_shape() || z.data.len() != self.config.latent_dim {
            return Err(CodecError::Shape {
                expected: format!("{:?}", self.latent_shape()),
                got: format!("{:?} with {} values", z.shape, z.data.len()),
            });
        }
        if z.data.iter().any(|v| !v.is_finite()) {
            return Err(CodecError::Shape {
                expected: "finite latent values".into(),
                got: "non-finite".into(),
            });
        }
        Ok(())
    }

    /// Conditioning row for one assignment, in spec order.
    pub fn conditioning_row(&self, attrs: &AttributeVector) -> Result<Vec<f64>, CodecError> {
        for name in attrs.0.keys() {
            if self.spec(name).is_none() {
                return Err(CodecError::UnknownAttribute(name.clone()));
            }
        }
        let mut row = Vec::with_capacity(2 * self.specs.len());
        for spec in &self.specs {
            let a = attrs
                .get(&spec.name)
                .ok_or_else(|| CodecError::MissingAttribute(spec.name.clone()))?;
            if !a.is_finite() {
                return Err(CodecError::Config(format!("attribute `{}` value is not finite", spec.name)));
            }
            row.extend(conditioning(a));
        }
        Ok(row)
    }

    pub fn decode(&self, z: &LatentCode, attrs: &AttributeVector) -> Result<ImagePlane, CodecError> {
        self.check_code(z)?;
        let cond = self.conditioning_row(attrs)?;
        let zrow = Array2::from_shape_vec((1, z.data.len()), z.data.clone()).expect("code shape");
        let crow = Array2::from_shape_vec((1, cond.len()), cond).expect("cond shape");
        let out = self.decoder.predict(zrow.view(), Some(crow.view()));
        let r = self.config.resolution;
        let data: Vec<f32> = out.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
        Ok(ImagePlane::from_raw(r, r, self.config.channels, data)?)
    }

    /// Probability of each attribute's positive class given the code.
    pub fn discriminate(&self, z: &LatentCode) -> Result<BTreeMap<String, f64>, CodecError> {
        self.check_code(z)?;
        let zrow = Array2::from_shape_vec((1, z.data.len()), z.data.clone()).expect("code shape");
        let logits = self.discriminator.predict(zrow.view(), None);
        Ok(self
            .specs
            .iter()
            .zip(logits.iter())
            .map(|(s, l)| (s.name.clone(), nn::sigmoid(*l)))
            .collect())
    }

    /// Reconstruction with the given attributes: `decode(encode(x), attrs)`.
    pub fn reconstruct(&self, x: &ImagePlane, attrs: &AttributeVector) -> Result<ImagePlane, CodecError> {
        self.decode(&self.encode(x)?, attrs)
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count() + self.discriminator.param_count()
    }

    /// Autoencoder parameters (encoder then decoder) as a flat copy.
    pub fn autoencoder_params(&self) -> Vec<f64> {
        self.encoder
            .tensors()
            .chain(self.decoder.tensors())
            .flat_map(|t| t.iter().copied())
            .collect()
    }

    /// Overwrites one autoencoder parameter addressed as in [`Self::autoencoder_params`].
    pub fn set_autoencoder_param(&mut self, index: usize, value: f64) {
        let mut offset = 0;
        for t in self.encoder.tensors_mut().chain(self.decoder.tensors_mut()) {
            if index < offset + t.len() {
                t[index - offset] = value;
                return;
            }
            offset += t.len();
        }
        panic!("autoencoder parameter index {index} out of range");
    }
}
