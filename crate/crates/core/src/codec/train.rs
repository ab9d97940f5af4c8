use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{sigmoid, softplus, Activation, Adam, AdamParams, Mlp};
use super::{conditioning, AdversarialTarget, AttributeSpec, Codec, CodecConfig, CodecError};
use crate::dataset::DatasetManifest;
use crate::image::ImagePlane;

/// In-memory training images (rows in `[0, 1]`) with `±1` attribute labels in spec order.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub ids: Vec<String>,
    pub x: Array2<f64>,
    pub attrs: Array2<f64>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    /// Builds a set from planes already at the codec resolution.
    pub fn from_images(
        config: &CodecConfig,
        specs: &[AttributeSpec],
        items: &[(String, ImagePlane, Vec<f64>)],
    ) -> Result<Self, CodecError> {
        let d = config.input_dim();
        let m = specs.len();
        let mut x = Array2::zeros((items.len(), d));
        let mut attrs = Array2::zeros((items.len(), m));
        let mut ids = Vec::with_capacity(items.len());
        for (i, (id, img, a)) in items.iter().enumerate() {
            let r = config.resolution;
            if img.width() != r || img.height() != r || img.channels() != config.channels {
                return Err(CodecError::Shape {
                    expected: format!("{r}x{r}x{}", config.channels),
                    got: format!("{}x{}x{}", img.width(), img.height(), img.channels()),
                });
            }
            if a.len() != m || a.iter().any(|v| *v != 1.0 && *v != -1.0) {
                return Err(CodecError::Config(format!("record {id} needs {m} labels of ±1, got {a:?}")));
            }
            for (dst, src) in x.row_mut(i).iter_mut().zip(img.data()) {
                *dst = *src as f64;
            }
            for (dst, src) in attrs.row_mut(i).iter_mut().zip(a) {
                *dst = *src;
            }
            ids.push(id.clone());
        }
        Ok(Self { ids, x, attrs })
    }

    pub fn select(&self, rows: &[usize]) -> (Array2<f64>, Array2<f64>) {
        (self.x.select(Axis(0), rows), self.attrs.select(Axis(0), rows))
    }
}

/// Loads every manifest record at the codec resolution. Records missing any
/// spec's annotation are collected and rejected before any pixel is read.
pub fn load_training_set(
    manifest: &DatasetManifest,
    specs: &[AttributeSpec],
    config: &CodecConfig,
) -> Result<TrainingSet, CodecError> {
    let missing: Vec<String> = manifest
        .records
        .iter()
        .filter(|r| specs.iter().any(|s| !r.annotations.contains_key(&s.name)))
        .map(|r| r.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(CodecError::Unannotated(missing));
    }
    let r = config.resolution;
    let mut items = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let labels = specs
            .iter()
            .map(|s| s.encode_value(&rec.annotations[&s.name]))
            .collect::<Result<Vec<_>, _>>()?;
        let img = ImagePlane::load(&rec.path)?.resize_bilinear(r, r)?.with_channels(config.channels);
        items.push((rec.id.clone(), img, labels));
    }
    TrainingSet::from_images(config, specs, &items)
}

/// Adversarial weight at `step`: a linear ramp from 0 to `lambda_max`.
pub fn lambda_at(config: &CodecConfig, step: u64) -> f64 {
    if config.lambda_ramp_steps == 0 {
        return config.lambda_max;
    }
    config.lambda_max * (step as f64 / config.lambda_ramp_steps as f64).min(1.0)
}

/// Losses of one optimisation step; also the line format of training progress.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: u64,
    pub reconstruction: f64,
    pub adversarial: f64,
    pub discriminator: f64,
    pub lambda: f64,
}

impl StepLosses {
    pub fn is_finite(&self) -> bool {
        self.reconstruction.is_finite() && self.adversarial.is_finite() && self.discriminator.is_finite()
    }
}

pub type ProgressRecord = StepLosses;

/// Model plus optimiser state. `step` counts completed updates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub codec: Codec,
    pub step: u64,
    pub(crate) adam_encoder: Adam,
    pub(crate) adam_decoder: Adam,
    pub(crate) adam_discriminator: Adam,
    pub last: Option<StepLosses>,
    /// Exponential moving average (0.95) of the losses.
    pub running: Option<StepLosses>,
}

impl TrainState {
    pub fn new(codec: Codec) -> Self {
        Self {
            adam_encoder: Adam::new(&codec.encoder),
            adam_decoder: Adam::new(&codec.decoder),
            adam_discriminator: Adam::new(&codec.discriminator),
            codec,
            step: 0,
            last: None,
            running: None,
        }
    }

    fn adam(&self, lr: f64) -> AdamParams {
        AdamParams {
            lr,
            beta1: self.codec.config.adam_beta1,
            beta2: self.codec.config.adam_beta2,
            eps: 1e-8,
        }
    }

    /// One discriminator update followed by one encoder/decoder update.
    ///
    /// `x` rows are images in `[0, 1]`; `attrs` rows are `±1` labels in spec order.
    pub fn train_step(&mut self, x: &Array2<f64>, attrs: &Array2<f64>) -> Result<StepLosses, CodecError> {
        let cfg = self.codec.config.clone();
        let b = x.nrows();
        let m = self.codec.specs.len();
        if b == 0 {
            return Err(CodecError::Config("empty batch".into()));
        }
        if x.ncols() != cfg.input_dim() || attrs.dim() != (b, m) {
            return Err(CodecError::Shape {
                expected: format!("{b}x{} images and {b}x{m} labels", cfg.input_dim()),
                got: format!("{:?} and {:?}", x.dim(), attrs.dim()),
            });
        }
        let lambda = lambda_at(&cfg, self.step);
        let targets = attrs.mapv(|a| (a + 1.0) / 2.0);
        let scaled = Codec::scale_input(x.view());

        let enc_cache = self.codec.encoder.forward(scaled.view(), None);
        let z = enc_cache.output().clone();

        // Discriminator: learn to read the attributes off the (fixed) code.
        let dis_cache = self.codec.discriminator.forward(z.view(), None);
        let (dis_loss, dis_grad) = bce_with_logits(dis_cache.output(), &targets, 1.0);
        if !dis_loss.is_finite() {
            return Err(self.non_finite(f64::NAN, f64::NAN, dis_loss, lambda));
        }
        let (g_dis, _) = self.codec.discriminator.backward(&dis_cache, dis_grad, false);
        let p = self.adam(cfg.lr_discriminator);
        self.adam_discriminator.step(&mut self.codec.discriminator, &g_dis, &p);

        // Autoencoder: reconstruct, and fool the updated discriminator.
        let cond = conditioning_matrix(attrs);
        let dec_cache = self.codec.decoder.forward(z.view(), Some(cond.view()));
        let diff = dec_cache.output() - x;
        let n = diff.len() as f64;
        let recon = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let grad_out = diff.mapv(|d| 2.0 * d / n);
        let (g_dec, gz) = self.codec.decoder.backward(&dec_cache, grad_out, true);
        let mut gz = gz.expect("input gradient requested");

        let adv_cache = self.codec.discriminator.forward(z.view(), None);
        let adv_targets = match cfg.adversarial_target {
            AdversarialTarget::Confusion => Array2::from_elem((b, m), 0.5),
            AdversarialTarget::Flipped => targets.mapv(|t| 1.0 - t),
        };
        let (adv_loss, adv_grad) = bce_with_logits(adv_cache.output(), &adv_targets, lambda);
        if !recon.is_finite() || !adv_loss.is_finite() {
            return Err(self.non_finite(recon, adv_loss, dis_loss, lambda));
        }
        if lambda > 0.0 {
            let (_, gz_adv) = self.codec.discriminator.backward(&adv_cache, adv_grad, true);
            gz += &gz_adv.expect("input gradient requested");
        }
        let (g_enc, _) = self.codec.encoder.backward(&enc_cache, gz, false);
        let p = self.adam(cfg.lr_autoencoder);
        self.adam_decoder.step(&mut self.codec.decoder, &g_dec, &p);
        self.adam_encoder.step(&mut self.codec.encoder, &g_enc, &p);

        let losses = StepLosses {
            step: self.step,
            reconstruction: recon,
            adversarial: adv_loss,
            discriminator: dis_loss,
            lambda,
        };
        self.step += 1;
        self.last = Some(losses);
        self.running = Some(match self.running {
            None => losses,
            Some(r) => StepLosses {
                step: losses.step,
                reconstruction: 0.95 * r.reconstruction + 0.05 * recon,
                adversarial: 0.95 * r.adversarial + 0.05 * adv_loss,
                discriminator: 0.95 * r.discriminator + 0.05 * dis_loss,
                lambda,
            },
        });
        Ok(losses)
    }

    fn non_finite(&self, reconstruction: f64, adversarial: f64, discriminator: f64, lambda: f64) -> CodecError {
        CodecError::NonFinite {
            step: self.step,
            losses: StepLosses {
                step: self.step,
                reconstruction,
                adversarial,
                discriminator,
                lambda,
            },
        }
    }

    /// Mean squared reconstruction error over `set` with the true attributes.
    pub fn reconstruction_mse(&self, set: &TrainingSet) -> f64 {
        reconstruction_mse(&self.codec, &set.x, &set.attrs)
    }
}

pub(crate) fn conditioning_matrix(attrs: &Array2<f64>) -> Array2<f64> {
    let (b, m) = attrs.dim();
    let mut cond = Array2::zeros((b, 2 * m));
    for ((i, j), a) in attrs.indexed_iter() {
        let [lo, hi] = conditioning(*a);
        cond[[i, 2 * j]] = lo;
        cond[[i, 2 * j + 1]] = hi;
    }
    cond
}

/// Mean binary cross-entropy on logits and its gradient, scaled by `weight`.
fn bce_with_logits(logits: &Array2<f64>, targets: &Array2<f64>, weight: f64) -> (f64, Array2<f64>) {
    let n = logits.len() as f64;
    let loss = logits
        .iter()
        .zip(targets.iter())
        .map(|(l, t)| softplus(*l) - t * l)
        .sum::<f64>()
        / n;
    let mut grad = logits.clone();
    ndarray::Zip::from(&mut grad)
        .and(targets)
        .for_each(|g, &t| *g = weight * (sigmoid(*g) - t) / n);
    (loss, grad)
}

pub(crate) fn reconstruction_mse(codec: &Codec, x: &Array2<f64>, attrs: &Array2<f64>) -> f64 {
    let z = codec.encoder.predict(Codec::scale_input(x.view()).view(), None);
    let out = codec.decoder.predict(z.view(), Some(conditioning_matrix(attrs).view()));
    let diff = out - x;
    diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64
}

/// Reconstruction loss and its gradient w.r.t. the autoencoder parameters,
/// flattened in [`Codec::autoencoder_params`] order.
pub fn reconstruction_loss_and_grad(codec: &Codec, x: &Array2<f64>, attrs: &Array2<f64>) -> (f64, Vec<f64>) {
    let enc_cache = codec.encoder.forward(Codec::scale_input(x.view()).view(), None);
    let cond = conditioning_matrix(attrs);
    let dec_cache = codec.decoder.forward(enc_cache.output().view(), Some(cond.view()));
    let diff = dec_cache.output() - x;
    let n = diff.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let (g_dec, gz) = codec.decoder.backward(&dec_cache, diff.mapv(|d| 2.0 * d / n), true);
    let (g_enc, _) = codec.encoder.backward(&enc_cache, gz.expect("requested"), false);
    let mut flat = super::nn::flatten(&g_enc);
    flat.extend(super::nn::flatten(&g_dec));
    (loss, flat)
}

/// Reconstruction loss alone, for finite-difference checks.
pub fn reconstruction_loss(codec: &Codec, x: &Array2<f64>, attrs: &Array2<f64>) -> f64 {
    reconstruction_mse(codec, x, attrs)
}

/// Per-attribute accuracy of the latent discriminator on `set` (threshold 0.5).
pub fn discriminator_accuracy(codec: &Codec, set: &TrainingSet) -> Vec<f64> {
    let z = codec.encoder.predict(Codec::scale_input(set.x.view()).view(), None);
    let logits = codec.discriminator.predict(z.view(), None);
    let n = set.len() as f64;
    (0..codec.specs.len())
        .map(|j| {
            let correct = logits
                .column(j)
                .iter()
                .zip(set.attrs.column(j))
                .filter(|(l, a)| (**l >= 0.0) == (**a > 0.0))
                .count();
            correct as f64 / n
        })
        .collect()
}

/// Held-out accuracy of a freshly trained probe with the discriminator's
/// architecture, fitted on frozen codes of `train` and scored on `held_out`.
/// Measures how much attribute information the codes carry, independent of
/// how well the in-model discriminator kept up during training.
pub fn fresh_probe_accuracy(codec: &Codec, train: &TrainingSet, held_out: &TrainingSet, steps: usize, seed: u64) -> Vec<f64> {
    let codes = |set: &TrainingSet| codec.encoder.predict(Codec::scale_input(set.x.view()).view(), None);
    let (z_train, z_held) = (codes(train), codes(held_out));
    let m = codec.specs.len();
    let mut widths = vec![codec.config.latent_dim];
    widths.extend(&codec.config.discriminator_hidden);
    widths.push(m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = Mlp::new(&widths, Activation::LeakyRelu, Activation::Identity, 0, &mut rng);
    let mut adam = Adam::new(&probe);
    let params = AdamParams {
        lr: 3e-3,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let targets = train.attrs.mapv(|a| (a + 1.0) / 2.0);
    for _ in 0..steps {
        let cache = probe.forward(z_train.view(), None);
        let (_, grad) = bce_with_logits(cache.output(), &targets, 1.0);
        let (g, _) = probe.backward(&cache, grad, false);
        adam.step(&mut probe, &g, &params);
    }
    let logits = probe.predict(z_held.view(), None);
    let n = held_out.len() as f64;
    (0..m)
        .map(|j| {
            let correct = logits
                .column(j)
                .iter()
                .zip(held_out.attrs.column(j))
                .filter(|(l, a)| (**l >= 0.0) == (**a > 0.0))
                .count();
            correct as f64 / n
        })
        .collect()
}

/// Majority-class rate per attribute: the accuracy of always guessing the commonest label.
pub fn chance_rate(set: &TrainingSet) -> Vec<f64> {
    let n = set.len() as f64;
    set.attrs
        .columns()
        .into_iter()
        .map(|col| {
            let pos = col.iter().filter(|a| **a > 0.0).count() as f64 / n;
            pos.max(1.0 - pos)
        })
        .collect()
}

fn batch_rows(seed: u64, step: u64, n: usize, batch: usize) -> Vec<usize> {
    // SplitMix-style mixing keeps per-step streams independent of each other.
    let mut k = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    k = (k ^ (k >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    k = (k ^ (k >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    k ^= k >> 31;
    let mut rng = ChaCha8Rng::seed_from_u64(k);
    rand::seq::index::sample(&mut rng, n, batch.min(n)).into_vec()
}

pub struct TrainOptions<'a> {
    /// Stop once `state.step` reaches this value (defaults to `config.steps`).
    pub until_step: Option<u64>,
    /// Emit a progress record every this many steps (0 disables).
    pub log_every: u64,
    pub progress: Option<&'a mut dyn FnMut(&StepLosses)>,
    /// Write a resumable checkpoint here every `checkpoint_every` steps.
    pub checkpoint: Option<(PathBuf, u64)>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self {
            until_step: None,
            log_every: 100,
            progress: None,
            checkpoint: None,
        }
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<StepLosses>,
}

/// Runs training steps on an in-memory set. Batches are a pure function of
/// `(seed, step)`, so a resumed state continues exactly where it left off.
pub fn train_on(mut state: TrainState, set: &TrainingSet, opts: TrainOptions<'_>) -> Result<TrainOutcome, CodecError> {
    if set.is_empty() {
        return Err(CodecError::Config("training set is empty".into()));
    }
    let TrainOptions {
        until_step,
        log_every,
        mut progress,
        checkpoint,
    } = opts;
    let until = until_step.unwrap_or(state.codec.config.steps);
    let seed = state.codec.config.seed;
    let batch = state.codec.config.batch_size;
    let mut history = Vec::new();
    while state.step < until {
        let rows = batch_rows(seed, state.step, set.len(), batch);
        let (x, a) = set.select(&rows);
        let losses = state.train_step(&x, &a)?;
        history.push(losses);
        if log_every > 0 && (losses.step % log_every == 0 || state.step == until) {
            if let Some(cb) = progress.as_mut() {
                cb(&losses);
            }
        }
        if let Some((path, every)) = &checkpoint {
            if *every > 0 && state.step.is_multiple_of(*every) {
                super::save_artifact(path, &state, true)?;
            }
        }
    }
    Ok(TrainOutcome { state, history })
}

/// Trains from a manifest and writes the artifact to `artifact_path`.
///
/// With `resume_from`, training continues from that checkpoint's state. If a
/// loss goes non-finite the state is dumped next to the artifact with a
/// `.diverged` suffix before the error is returned.
pub fn train(
    manifest: &DatasetManifest,
    specs: &[AttributeSpec],
    config: &CodecConfig,
    artifact_path: &Path,
    resume_from: Option<&Path>,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome, CodecError> {
    super::validate_specs(specs)?;
    config.validate()?;
    let set = load_training_set(manifest, specs, config)?;
    let state = match resume_from {
        Some(p) => {
            let s = super::load_artifact(p)?;
            if s.codec.specs != specs {
                return Err(CodecError::Config("checkpoint specs differ from requested specs".into()));
            }
            s
        }
        None => TrainState::new(Codec::new(config.clone(), specs.to_vec())?),
    };
    let snapshot = state.clone();
    match train_on(state, &set, opts) {
        Ok(outcome) => {
            super::save_artifact(artifact_path, &outcome.state, true)?;
            Ok(outcome)
        }
        Err(e @ CodecError::NonFinite { .. }) => {
            let dump = artifact_path.with_extension("diverged");
            let _ = super::save_artifact(&dump, &snapshot, true);
            log::error!("training diverged; initial state dumped to {}", dump.display());
            Err(e)
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::super::{AttributeRole, AttributeSpec};
    use super::*;
    use rand::Rng;

    fn specs() -> Vec<AttributeSpec> {
        vec![
            AttributeSpec::new("s", AttributeRole::Sensitive, "a", "b"),
            AttributeSpec::new("c", AttributeRole::Controlled, "no", "yes"),
        ]
    }

    fn toy_set(config: &CodecConfig, n: usize, seed: u64) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items: Vec<_> = (0..n)
            .map(|i| {
                let s: bool = rng.random();
                let c: bool = rng.random();
                let base: f32 = rng.random_range(0.2..0.5);
                let img = ImagePlane::from_fn(config.resolution, config.resolution, 3, |x, y, ch| {
                    let mut v = base + 0.02 * ((x + y) % 3) as f32;
                    if s && ch == 0 {
                        v += 0.4;
                    }
                    if c && y < 2 {
                        v = 0.05;
                    }
                    v
                })
                .unwrap();
                let labels = vec![if s { 1.0 } else { -1.0 }, if c { 1.0 } else { -1.0 }];
                (format!("r{i}"), img, labels)
            })
            .collect();
        TrainingSet::from_images(config, &specs(), &items).unwrap()
    }

    #[test]
    fn lambda_ramp_endpoints() {
        let mut c = CodecConfig::default();
        c.lambda_max = 0.4;
        c.lambda_ramp_steps = 100;
        assert_eq!(lambda_at(&c, 0), 0.0);
        assert_eq!(lambda_at(&c, 50), 0.2);
        assert_eq!(lambda_at(&c, 100), 0.4);
        assert_eq!(lambda_at(&c, 1000), 0.4);
        c.lambda_ramp_steps = 0;
        assert_eq!(lambda_at(&c, 0), 0.4);
    }

    #[test]
    fn step_increments_and_updates_both_networks() {
        let cfg = CodecConfig::tiny(8, 4);
        let set = toy_set(&cfg, 16, 1);
        let mut state = TrainState::new(Codec::new(cfg, specs()).unwrap());
        let before = state.codec.clone();
        let (x, a) = set.select(&[0, 1, 2, 3]);
        let l = state.train_step(&x, &a).unwrap();
        assert_eq!(state.step, 1);
        assert_eq!(l.step, 0);
        assert_eq!(l.lambda, 0.0);
        assert!(l.is_finite());
        assert_ne!(before.encoder, state.codec.encoder);
        assert_ne!(before.decoder, state.codec.decoder);
        assert_ne!(before.discriminator, state.codec.discriminator);
    }

    #[test]
    fn pure_autoencoder_reduces_reconstruction_on_fixed_batch() {
        let mut cfg = CodecConfig::tiny(8, 6);
        cfg.lambda_max = 0.0;
        cfg.lr_autoencoder = 3e-3;
        let set = toy_set(&cfg, 8, 2);
        let mut state = TrainState::new(Codec::new(cfg, specs()).unwrap());
        let start = state.reconstruction_mse(&set);
        for _ in 0..200 {
            state.train_step(&set.x, &set.attrs).unwrap();
        }
        let end = state.reconstruction_mse(&set);
        assert!(end < 0.5 * start, "{start} -> {end}");
    }

    #[test]
    fn seeded_runs_are_identical() {
        let mut cfg = CodecConfig::tiny(8, 4);
        cfg.steps = 30;
        cfg.seed = 11;
        let set = toy_set(&cfg, 20, 3);
        let run = || {
            train_on(TrainState::new(Codec::new(cfg.clone(), specs()).unwrap()), &set, TrainOptions::default())
                .unwrap()
                .history
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batch_shape_mismatch_rejected() {
        let cfg = CodecConfig::tiny(8, 4);
        let mut state = TrainState::new(Codec::new(cfg, specs()).unwrap());
        let x = Array2::zeros((2, 10));
        let a = Array2::zeros((2, 2));
        assert!(state.train_step(&x, &a).is_err());
        assert!(state.train_step(&Array2::zeros((0, 192)), &Array2::zeros((0, 2))).is_err());
    }

    #[test]
    fn chance_rate_is_majority_share() {
        let cfg = CodecConfig::tiny(8, 4);
        let mut set = toy_set(&cfg, 4, 0);
        set.attrs = Array2::from_shape_vec((4, 2), vec![1.0, 1.0, 1.0, -1.0, 1.0, -1.0, -1.0, -1.0]).unwrap();
        assert_eq!(chance_rate(&set), vec![0.75, 0.75]);
    }
}
