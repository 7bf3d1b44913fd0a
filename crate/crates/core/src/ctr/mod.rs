//! Click-through-rate model: a second-order factorization machine over
//! hashed one-hot features, trained with seeded SGD on logistic loss.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{FeatureMap, ImpressionEvent};

#[derive(Debug, Error)]
pub enum CtrError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("hash bits must be in 1..=30, got {0}")]
    BadHashBits(u32),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    NumericalDivergence { epoch: usize, loss: f64 },
    #[error("model format {found:?}, expected {expected:?}")]
    FormatMismatch { found: String, expected: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path, source: std::io::Error) -> CtrError {
    CtrError::Io { path: path.display().to_string(), source }
}

/// FNV-1a, 64 bit. Hand-rolled so indices stay identical across toolchains.
fn fnv1a64(field: &str, token: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in field.bytes().chain(std::iter::once(b'=')).chain(token.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Hashing-trick feature indexer with a power-of-two dimension.
///
/// Each feature field contributes exactly one active index, so an encoded
/// event has one index per field. Distinct tokens may collide; at the
/// default 2^20 dimension the collision rate over realistic vocabularies
/// stays below a percent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureIndexer {
    bits: u32,
}

pub const DEFAULT_HASH_BITS: u32 = 20;

impl FeatureIndexer {
    pub fn new(bits: u32) -> Result<Self, CtrError> {
        if !(1..=30).contains(&bits) {
            return Err(CtrError::BadHashBits(bits));
        }
        Ok(FeatureIndexer { bits })
    }

    pub fn dim(&self) -> usize {
        1usize << self.bits
    }

    pub fn index(&self, field: &str, token: &str) -> usize {
        (fnv1a64(field, token) & (self.dim() as u64 - 1)) as usize
    }

    /// One index per field, in the feature map's field order.
    pub fn encode(&self, features: &FeatureMap) -> Vec<usize> {
        features.iter().map(|(f, t)| self.index(f, t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2_linear: f64,
    pub l2_factor: f64,
    /// Factor dimension.
    pub k: usize,
    pub init_sigma: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            learning_rate: 0.01,
            l2_linear: 1e-6,
            l2_factor: 1e-6,
            k: 10,
            init_sigma: 0.01,
            rng_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CtrError> {
        let bad = |msg: String| Err(CtrError::InvalidConfig(msg));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate={} must be positive", self.learning_rate));
        }
        if !(self.l2_linear >= 0.0 && self.l2_linear.is_finite())
            || !(self.l2_factor >= 0.0 && self.l2_factor.is_finite())
        {
            return bad("l2 terms must be nonnegative".into());
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if !(self.init_sigma >= 0.0 && self.init_sigma.is_finite()) {
            return bad(format!("init_sigma={} must be nonnegative", self.init_sigma));
        }
        Ok(())
    }
}

/// Clamped so the output stays strictly inside (0, 1) in f64.
pub fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-30.0, 30.0);
    1.0 / (1.0 + (-z).exp())
}

/// Logistic loss for a prediction strictly inside (0, 1).
pub fn log_loss(p: f64, label: f64) -> f64 {
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

/// Second-order factorization machine.
///
/// Score = w0 + sum of active linear weights + pairwise interactions between
/// active slots computed through the usual sum-of-squares identity. Slots
/// that collide into one index still interact, matching the per-slot view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FMModel {
    pub indexer: FeatureIndexer,
    pub k: usize,
    pub w0: f64,
    pub w: Vec<f64>,
    pub v: Vec<f64>,
}

impl FMModel {
    fn zeroed(indexer: FeatureIndexer, k: usize) -> Self {
        let dim = indexer.dim();
        FMModel { indexer, k, w0: 0.0, w: vec![0.0; dim], v: vec![0.0; dim * k] }
    }

    /// Raw score before the sigmoid.
    pub fn raw_score(&self, idxs: &[usize]) -> f64 {
        let mut z = self.w0;
        for &j in idxs {
            z += self.w[j];
        }
        for f in 0..self.k {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for &j in idxs {
                let x = self.v[j * self.k + f];
                sum += x;
                sumsq += x * x;
            }
            z += 0.5 * (sum * sum - sumsq);
        }
        z
    }

    pub fn predict_indices(&self, idxs: &[usize]) -> f64 {
        sigmoid(self.raw_score(idxs))
    }

    /// Predicted click probability, strictly inside (0, 1).
    pub fn predict(&self, event: &ImpressionEvent) -> f64 {
        self.predict_indices(&self.indexer.encode(&event.features))
    }

    /// Gradient of the unregularized logistic loss at one example, sparse
    /// over the active slots. Duplicate indices get one entry per slot; they
    /// sum to the multiplicity-weighted gradient.
    pub fn gradient(&self, idxs: &[usize], label: f64) -> FmGradient {
        let p = self.predict_indices(idxs);
        let g = p - label;
        let mut sums = vec![0.0; self.k];
        for &j in idxs {
            for (f, s) in sums.iter_mut().enumerate() {
                *s += self.v[j * self.k + f];
            }
        }
        let dw = idxs.iter().map(|&j| (j, g)).collect();
        let mut dv = Vec::with_capacity(idxs.len() * self.k);
        for &j in idxs {
            for f in 0..self.k {
                dv.push((j, f, g * (sums[f] - self.v[j * self.k + f])));
            }
        }
        FmGradient { dw0: g, dw, dv }
    }
}

/// Sparse loss gradient: `dw` holds (index, value), `dv` holds
/// (index, factor, value).
#[derive(Debug, Clone, PartialEq)]
pub struct FmGradient {
    pub dw0: f64,
    pub dw: Vec<(usize, f64)>,
    pub dv: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: FMModel,
    pub epoch_losses: Vec<f64>,
    pub final_log_loss: f64,
}

/// SGD on logistic loss with per-epoch seeded shuffles. Same data, config,
/// and seed give bit-identical parameters.
pub fn train(
    events: &[ImpressionEvent],
    indexer: FeatureIndexer,
    config: &TrainConfig,
) -> Result<TrainedModel, CtrError> {
    config.validate()?;
    if events.is_empty() {
        return Err(CtrError::EmptyTrainingSet);
    }
    let encoded: Vec<(Vec<usize>, f64)> = events
        .iter()
        .map(|e| (indexer.encode(&e.features), e.click as f64))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut model = FMModel::zeroed(indexer, config.k);
    for x in model.v.iter_mut() {
        *x = rng.sample::<f64, _>(StandardNormal) * config.init_sigma;
    }

    let lr = config.learning_rate;
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut sums = vec![0.0; config.k];
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (idxs, y) = &encoded[i];
            let p = model.predict_indices(idxs);
            let g = p - y;
            model.w0 -= lr * g;
            for &j in idxs.iter() {
                model.w[j] -= lr * (g + config.l2_linear * model.w[j]);
            }
            for (f, s) in sums.iter_mut().enumerate() {
                *s = idxs.iter().map(|&j| model.v[j * config.k + f]).sum();
            }
            for &j in idxs.iter() {
                for (f, &s) in sums.iter().enumerate() {
                    let vjf = model.v[j * config.k + f];
                    model.v[j * config.k + f] -= lr * (g * (s - vjf) + config.l2_factor * vjf);
                }
            }
        }
        let loss = encoded
            .iter()
            .map(|(idxs, y)| log_loss(model.predict_indices(idxs), *y))
            .sum::<f64>()
            / encoded.len() as f64;
        if !loss.is_finite() {
            return Err(CtrError::NumericalDivergence { epoch, loss });
        }
        epoch_losses.push(loss);
    }
    let final_log_loss = *epoch_losses.last().expect("epochs >= 1");
    Ok(TrainedModel { model, epoch_losses, final_log_loss })
}

/// Mean predicted click probability over the given events.
pub fn mean_train_ctr(model: &FMModel, events: &[ImpressionEvent]) -> Result<f64, CtrError> {
    if events.is_empty() {
        return Err(CtrError::EmptyTrainingSet);
    }
    Ok(events.iter().map(|e| model.predict(e)).sum::<f64>() / events.len() as f64)
}

pub const MODEL_FORMAT: &str = "fm-model/1";

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    train_config: TrainConfig,
    final_log_loss: f64,
    model: FMModel,
}

pub fn save_model(
    path: &Path,
    trained: &TrainedModel,
    config: &TrainConfig,
) -> Result<(), CtrError> {
    let file = ModelFile {
        format: MODEL_FORMAT.to_string(),
        train_config: config.clone(),
        final_log_loss: trained.final_log_loss,
        model: trained.model.clone(),
    };
    let out = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    serde_json::to_writer(out, &file)?;
    Ok(())
}

/// Loads a model artifact, rejecting other format tags.
pub fn load_model(path: &Path) -> Result<(FMModel, TrainConfig, f64), CtrError> {
    let reader = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let file: ModelFile = serde_json::from_reader(reader)?;
    if file.format != MODEL_FORMAT {
        return Err(CtrError::FormatMismatch { found: file.format, expected: MODEL_FORMAT });
    }
    Ok((file.model, file.train_config, file.final_log_loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_events, SynthParams};

    fn small_model(bits: u32, k: usize, seed: u64) -> FMModel {
        let indexer = FeatureIndexer::new(bits).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = indexer.dim();
        FMModel {
            indexer,
            k,
            w0: rng.sample::<f64, _>(StandardNormal) * 0.3,
            w: (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.3).collect(),
            v: (0..dim * k).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.3).collect(),
        }
    }

    #[test]
    fn indexer_is_deterministic_and_bounded() {
        let ix = FeatureIndexer::new(10).unwrap();
        assert_eq!(ix.dim(), 1024);
        let a = ix.index("region", "north");
        assert_eq!(a, ix.index("region", "north"));
        assert!(a < 1024);
        assert_ne!(ix.index("region", "north"), ix.index("city", "north"));
        assert!(FeatureIndexer::new(0).is_err());
        assert!(FeatureIndexer::new(31).is_err());
    }

    #[test]
    fn zero_model_predicts_half_and_gradient_matches_hand_value() {
        let indexer = FeatureIndexer::new(8).unwrap();
        let model = FMModel::zeroed(indexer, 4);
        let idxs = vec![3, 17, 200];
        assert_eq!(model.predict_indices(&idxs), 0.5);
        let grad = model.gradient(&idxs, 1.0);
        assert_eq!(grad.dw0, -0.5);
        assert!(grad.dw.iter().all(|&(_, g)| g == -0.5));
        assert!(grad.dv.iter().all(|&(_, _, g)| g == 0.0));
    }

    #[test]
    fn fast_pairwise_matches_naive_enumeration() {
        let model = small_model(8, 5, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..200 {
            let n = rng.random_range(1..10);
            let idxs: Vec<usize> =
                (0..n).map(|_| rng.random_range(0..model.indexer.dim())).collect();
            let mut naive = model.w0;
            for &j in &idxs {
                naive += model.w[j];
            }
            for a in 0..idxs.len() {
                for b in a + 1..idxs.len() {
                    let (ja, jb) = (idxs[a], idxs[b]);
                    for f in 0..model.k {
                        naive += model.v[ja * model.k + f] * model.v[jb * model.k + f];
                    }
                }
            }
            let fast = model.raw_score(&idxs);
            assert!((fast - naive).abs() < 1e-9, "case {case}: fast={fast} naive={naive}");
        }
    }

    #[test]
    fn prediction_stays_strictly_inside_unit_interval() {
        let indexer = FeatureIndexer::new(4).unwrap();
        let mut model = FMModel::zeroed(indexer, 2);
        model.w0 = 1e9;
        let p = model.predict_indices(&[0]);
        assert!(p < 1.0 && p > 0.0);
        model.w0 = -1e9;
        let p = model.predict_indices(&[0]);
        assert!(p > 0.0 && p < 1.0);
        assert!(log_loss(p, 0.0).is_finite());
        assert!(log_loss(p, 1.0).is_finite());
    }

    fn synth_training_set() -> Vec<ImpressionEvent> {
        let params = SynthParams { days: 4, events_per_day: 400, ..SynthParams::default() };
        synth_events(21, &params).unwrap().0
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let events = synth_training_set();
        let indexer = FeatureIndexer::new(12).unwrap();
        let config = TrainConfig { epochs: 4, k: 6, ..TrainConfig::default() };
        let a = train(&events, indexer, &config).unwrap();
        let first = a.epoch_losses[0];
        let base = {
            let pos = events.iter().filter(|e| e.click == 1).count() as f64;
            let rate = pos / events.len() as f64;
            log_loss(rate, 1.0) * rate + log_loss(rate, 0.0) * (1.0 - rate)
        };
        assert!(a.final_log_loss <= first);
        assert!(a.final_log_loss < base + 0.05, "final={} base={}", a.final_log_loss, base);

        let b = train(&events, indexer, &config).unwrap();
        assert_eq!(a.model.w0.to_bits(), b.model.w0.to_bits());
        assert!(a.model.w.iter().zip(&b.model.w).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.model.v.iter().zip(&b.model.v).all(|(x, y)| x.to_bits() == y.to_bits()));

        let c = train(&events, indexer, &TrainConfig { rng_seed: 2, ..config }).unwrap();
        assert_ne!(a.model.w0.to_bits(), c.model.w0.to_bits());
    }

    #[test]
    fn absurd_learning_rate_reports_divergence() {
        let events = synth_training_set();
        let indexer = FeatureIndexer::new(10).unwrap();
        let config =
            TrainConfig { learning_rate: 1e300, epochs: 3, k: 4, ..TrainConfig::default() };
        match train(&events, indexer, &config) {
            Err(CtrError::NumericalDivergence { .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(CtrError::InvalidConfig(_))));
        let bad = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { k: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn mean_ctr_is_a_probability() {
        let events = synth_training_set();
        let indexer = FeatureIndexer::new(12).unwrap();
        let trained =
            train(&events, indexer, &TrainConfig { epochs: 2, k: 4, ..TrainConfig::default() })
                .unwrap();
        let theta0 = mean_train_ctr(&trained.model, &events).unwrap();
        assert!(theta0 > 0.0 && theta0 < 1.0);
        assert!(mean_train_ctr(&trained.model, &[]).is_err());
    }

    #[test]
    fn model_file_roundtrip_and_format_tag() {
        let events = synth_training_set();
        let indexer = FeatureIndexer::new(8).unwrap();
        let config = TrainConfig { epochs: 1, k: 3, ..TrainConfig::default() };
        let trained = train(&events[..100], indexer, &config).unwrap();
        let dir = std::env::temp_dir().join(format!("fm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        save_model(&path, &trained, &config).unwrap();
        let (model, cfg, loss) = load_model(&path).unwrap();
        assert_eq!(model, trained.model);
        assert_eq!(cfg, config);
        assert_eq!(loss, trained.final_log_loss);

        let text = std::fs::read_to_string(&path).unwrap().replace(MODEL_FORMAT, "fm-model/9");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_model(&path), Err(CtrError::FormatMismatch { .. })));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn collision_rate_small_at_default_dim() {
        let ix = FeatureIndexer::new(DEFAULT_HASH_BITS).unwrap();
        let mut seen = std::collections::HashSet::new();
        let mut collisions = 0usize;
        for t in 0..10_000 {
            if !seen.insert(ix.index("token", &format!("t{t}"))) {
                collisions += 1;
            }
        }
        assert!(collisions < 100, "collisions={collisions}");
    }
}
