//! Planted-bias simulator: label presence probability `σ(β0 + β1·a)`, where
//! `a` is the grid value the probed image was synthesized at.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, LabelPrediction, ProbeError, ProbeInput};
use crate::codec::nn::sigmoid;
use crate::synth::{load_series_dir, SeriesSidecar, SynthError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasSimSpec {
    pub label: String,
    /// Base log-odds.
    pub beta0: f64,
    /// Log-odds change per unit of the attribute.
    pub beta1: f64,
    #[serde(default)]
    pub seed: u64,
    /// Present iff the probability is at least 0.5, instead of sampling.
    #[serde(default)]
    pub deterministic: bool,
}

impl BiasSimSpec {
    pub fn probability(&self, a: f64) -> f64 {
        sigmoid(self.beta0 + self.beta1 * a)
    }
}

/// Maps image content digests to the grid value they were synthesized at.
#[derive(Clone, Debug, Default)]
pub struct GridLookup {
    values: HashMap<String, f64>,
}

impl GridLookup {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a digest. The same digest at two different values is an error.
    pub fn insert(&mut self, digest: &str, a: f64) -> Result<(), ProbeError> {
        match self.values.insert(digest.to_string(), a) {
            Some(prev) if prev != a => Err(ProbeError::Simulator(format!(
                "image {digest} appears at grid values {prev} and {a}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn add_sidecar(&mut self, s: &SeriesSidecar) -> Result<(), ProbeError> {
        for im in &s.images {
            self.insert(&im.digest, im.a)?;
        }
        Ok(())
    }

    /// Lookup over every series sidecar under `series_dir`.
    pub fn from_series_dir(series_dir: &Path) -> Result<Self, SynthError> {
        let mut g = Self::new();
        for (_, s) in load_series_dir(series_dir)? {
            g.add_sidecar(&s).map_err(|e| SynthError::Sidecar {
                path: series_dir.to_path_buf(),
                message: e.to_string(),
            })?;
        }
        Ok(g)
    }

    pub fn get(&self, digest: &str) -> Option<f64> {
        self.values.get(digest).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

type Extractor = Box<dyn Fn(&ProbeInput) -> Option<f64> + Send + Sync>;

pub struct SimulatedBackend {
    id: String,
    specs: Vec<BiasSimSpec>,
    extractor: Extractor,
}

/// Builds a simulator over `specs`; `extractor` supplies each image's grid value.
pub fn make_simulated_backend(
    id: &str,
    specs: Vec<BiasSimSpec>,
    extractor: impl Fn(&ProbeInput) -> Option<f64> + Send + Sync + 'static,
) -> Result<SimulatedBackend, ProbeError> {
    for s in &specs {
        if !s.beta0.is_finite() || !s.beta1.is_finite() {
            return Err(ProbeError::Config(format!("simulator label `{}` has non-finite coefficients", s.label)));
        }
        if super::normalize_label(&s.label).is_empty() {
            return Err(ProbeError::Config("simulator label is empty".into()));
        }
    }
    Ok(SimulatedBackend {
        id: id.to_string(),
        specs,
        extractor: Box::new(extractor),
    })
}

impl SimulatedBackend {
    /// Simulator reading grid values from a [`GridLookup`].
    pub fn with_lookup(id: &str, specs: Vec<BiasSimSpec>, lookup: GridLookup) -> Result<Self, ProbeError> {
        make_simulated_backend(id, specs, move |input| lookup.get(&input.digest))
    }
}

/// Uniform draw in `[0, 1)` that depends only on `(seed, label, digest)`.
fn draw(seed: u64, label: &str, digest: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update([0]);
    h.update(digest.as_bytes());
    let bytes: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(bytes).random::<f64>()
}

impl Backend for SimulatedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn classify(&self, input: &ProbeInput) -> Result<Vec<LabelPrediction>, ProbeError> {
        let a = (self.extractor)(input)
            .ok_or_else(|| ProbeError::Simulator(format!("image {} has no grid value", input.digest)))?;
        self.specs
            .iter()
            .map(|s| {
                let p = s.probability(a);
                let present = if s.deterministic {
                    p >= 0.5
                } else {
                    draw(s.seed, &s.label, &input.digest) < p
                };
                LabelPrediction::new(&s.label, present, Some(p))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn input(tag: &str) -> ProbeInput {
        ProbeInput {
            digest: tag.to_string(),
            png: Arc::new(Vec::new()),
        }
    }

    fn spec(beta0: f64, beta1: f64, deterministic: bool) -> BiasSimSpec {
        BiasSimSpec {
            label: "Doctor".into(),
            beta0,
            beta1,
            seed: 1,
            deterministic,
        }
    }

    fn constant(a: f64) -> impl Fn(&ProbeInput) -> Option<f64> + Send + Sync {
        move |_| Some(a)
    }

    #[test]
    fn saturation() {
        let on = make_simulated_backend("s", vec![spec(60.0, 0.0, true)], constant(-2.0)).unwrap();
        let off = make_simulated_backend("s", vec![spec(-60.0, 0.0, false)], constant(2.0)).unwrap();
        for i in 0..50 {
            assert!(on.classify(&input(&i.to_string())).unwrap()[0].present);
            assert!(!off.classify(&input(&i.to_string())).unwrap()[0].present);
        }
        assert_eq!(on.classify(&input("x")).unwrap()[0].label, "doctor");
    }

    #[test]
    fn deterministic_threshold_at_zero() {
        for a in [-2.0, -0.5, 0.0, 0.5, 2.0] {
            let b = make_simulated_backend("s", vec![spec(0.0, 1.0, true)], constant(a)).unwrap();
            assert_eq!(b.classify(&input("x")).unwrap()[0].present, a >= 0.0, "a = {a}");
        }
        let flat = make_simulated_backend("s", vec![spec(0.0, 0.0, false)], constant(1.7)).unwrap();
        assert_eq!(flat.classify(&input("x")).unwrap()[0].confidence, Some(0.5));
    }

    #[test]
    fn stochastic_rates_within_binomial_bounds() {
        let s = spec(0.0, 0.3, false);
        for a in [-2.0, -4.0 / 3.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, 4.0 / 3.0, 2.0] {
            let b = make_simulated_backend("s", vec![s.clone()], constant(a)).unwrap();
            let n = 500;
            let hits = (0..n)
                .filter(|i| b.classify(&input(&format!("{a}-{i}"))).unwrap()[0].present)
                .count();
            let p = 1.0 / (1.0 + (-0.3 * a).exp());
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            let rate = hits as f64 / n as f64;
            assert!((rate - p).abs() <= 3.0 * sd, "a={a}: {rate} vs {p}");
        }
    }

    #[test]
    fn sampling_is_reproducible_and_needs_a_grid_value() {
        let b = make_simulated_backend("s", vec![spec(0.0, 0.3, false)], |i: &ProbeInput| {
            (i.digest != "missing").then_some(1.0)
        })
        .unwrap();
        assert_eq!(b.classify(&input("q")).unwrap(), b.classify(&input("q")).unwrap());
        assert!(matches!(b.classify(&input("missing")), Err(ProbeError::Simulator(_))));
        assert!(make_simulated_backend("s", vec![spec(f64::INFINITY, 0.0, true)], constant(0.0)).is_err());
    }

    #[test]
    fn lookup_rejects_conflicts() {
        let mut g = GridLookup::new();
        g.insert("d", 1.0).unwrap();
        g.insert("d", 1.0).unwrap();
        assert!(g.insert("d", 2.0).is_err());
    }
}
