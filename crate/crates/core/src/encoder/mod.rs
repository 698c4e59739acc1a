//! The background and foreground towers.
//!
//! Both towers map an image to a unit-norm [`Embedding`]. They never share
//! parameters. The desk-scale backbone is [`ToyCnn`]; any external feature
//! extractor can stand in through [`PretrainedEncoder`].

pub mod checkpoint;
pub mod cnn;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{preprocess, InputTensor};
use crate::embedding::{l2_normalize, Embedding};
use crate::error::{GalaError, Result};
use crate::image::ImageTensor;
use crate::instance::{BackgroundQuery, ForegroundInstance};

pub use cnn::{Scalar, ToyCnn};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    ToyCnn,
    Pretrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TowerRole {
    Background,
    Foreground,
}

impl std::fmt::Display for TowerRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TowerRole::Background => "background",
            TowerRole::Foreground => "foreground",
        })
    }
}

/// Limits that keep parameter counts sane for untrusted configs.
const MAX_CHANNELS: usize = 4096;
const MAX_INPUT: usize = 4096;
const MAX_EMBED: usize = 65536;
const MAX_LAYERS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    pub embed_dim: usize,
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub mean: [f32; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::ToyCnn,
            embed_dim: 128,
            input_size: 224,
            channels: vec![16, 32, 64, 64],
            mean: [0.485, 0.456, 0.406],
        }
    }
}

impl EncoderConfig {
    /// Desk-scale configuration used for the synthetic experiments.
    pub fn desk() -> Self {
        Self {
            input_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim > MAX_EMBED {
            return Err(GalaError::invalid("embed_dim out of range"));
        }
        if self.input_size == 0 || self.input_size > MAX_INPUT {
            return Err(GalaError::invalid("input_size out of range"));
        }
        if self.channels.is_empty()
            || self.channels.len() > MAX_LAYERS
            || self.channels.iter().any(|c| *c == 0 || *c > MAX_CHANNELS)
        {
            return Err(GalaError::invalid("channels out of range"));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(GalaError::invalid("mean must be finite"));
        }
        Ok(())
    }

    pub fn network(&self) -> Result<ToyCnn> {
        self.validate()?;
        ToyCnn::new(self.input_size, &self.channels, self.embed_dim)
    }

    /// Short hash of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Anything that maps a raw image to a unit-norm embedding.
pub trait ImageEncoder: Send + Sync {
    fn embed_dim(&self) -> usize;

    fn encode(&self, image: &ImageTensor) -> Result<Embedding>;

    fn encode_batch(&self, images: &[&ImageTensor]) -> Result<Vec<Embedding>> {
        images.iter().map(|i| self.encode(i)).collect()
    }
}

impl<E: ImageEncoder + ?Sized> ImageEncoder for &E {
    fn embed_dim(&self) -> usize {
        (**self).embed_dim()
    }
    fn encode(&self, image: &ImageTensor) -> Result<Embedding> {
        (**self).encode(image)
    }
}

impl<E: ImageEncoder + ?Sized> ImageEncoder for Arc<E> {
    fn embed_dim(&self) -> usize {
        (**self).embed_dim()
    }
    fn encode(&self, image: &ImageTensor) -> Result<Embedding> {
        (**self).encode(image)
    }
}

/// Parameters of one toy-backbone tower plus the config they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerWeights {
    config: EncoderConfig,
    fingerprint: String,
    pub role: TowerRole,
    pub trainable: bool,
    params: Vec<f32>,
    network: ToyCnn,
}

impl TowerWeights {
    pub fn init(config: EncoderConfig, role: TowerRole, seed: u64) -> Result<Self> {
        if config.backbone != Backbone::ToyCnn {
            return Err(GalaError::invalid("only the toy backbone has trainable weights"));
        }
        let network = config.network()?;
        let params = network.init_params(seed);
        Ok(Self {
            fingerprint: config.fingerprint(),
            config,
            role,
            trainable: true,
            params,
            network,
        })
    }

    pub fn from_params(config: EncoderConfig, role: TowerRole, trainable: bool, params: Vec<f32>) -> Result<Self> {
        if config.backbone != Backbone::ToyCnn {
            return Err(GalaError::invalid("only the toy backbone has trainable weights"));
        }
        let network = config.network()?;
        if params.len() != network.param_count() {
            return Err(GalaError::DimensionMismatch {
                expected: network.param_count(),
                got: params.len(),
            });
        }
        Ok(Self {
            fingerprint: config.fingerprint(),
            config,
            role,
            trainable,
            params,
            network,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn network(&self) -> &ToyCnn {
        &self.network
    }

    /// Same parameters, different role (initializing one tower from another).
    pub fn with_role(&self, role: TowerRole) -> Self {
        Self {
            role,
            ..self.clone()
        }
    }

    pub fn frozen(&self) -> Self {
        Self {
            trainable: false,
            ..self.clone()
        }
    }

    /// Checks these weights belong to `config`.
    pub fn check_config(&self, config: &EncoderConfig) -> Result<()> {
        let expected = config.fingerprint();
        if self.fingerprint != expected {
            return Err(GalaError::FingerprintMismatch {
                expected,
                found: self.fingerprint.clone(),
            });
        }
        Ok(())
    }

    pub fn preprocess(&self, image: &ImageTensor) -> InputTensor {
        preprocess(image, self.config.input_size as u32, self.config.mean)
    }

    /// Pre-normalization output for a preprocessed input.
    pub fn raw_output(&self, input: &InputTensor) -> Result<Vec<f32>> {
        Ok(self.network.forward(&self.params, &input.data)?.output)
    }
}

impl ImageEncoder for TowerWeights {
    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn encode(&self, image: &ImageTensor) -> Result<Embedding> {
        if self.fingerprint != self.config.fingerprint() {
            return Err(GalaError::FingerprintMismatch {
                expected: self.config.fingerprint(),
                found: self.fingerprint.clone(),
            });
        }
        l2_normalize(&self.raw_output(&self.preprocess(image))?)
    }
}

/// N_f applied to a foreground cutout.
pub fn embed_foreground(fg: &ForegroundInstance, tower: &dyn ImageEncoder) -> Result<Embedding> {
    tower.encode(&fg.image)
}

/// N_b applied to a masked background. The box only matters through the
/// filled pixels; a query without a box needs the placement search instead.
pub fn embed_background(bg: &BackgroundQuery, tower: &dyn ImageEncoder) -> Result<Embedding> {
    if bg.bbox.is_none() {
        return Err(GalaError::PlacementRequired);
    }
    tower.encode(&bg.image)
}

/// A global feature extractor supplied from outside the crate.
pub trait FeatureExtractor: Send + Sync {
    fn feature_dim(&self) -> usize;
    fn extract(&self, input: &InputTensor) -> Result<Vec<f32>>;
}

/// Adapter: preprocess, extract, optionally project, normalize.
pub struct PretrainedEncoder<F> {
    extractor: F,
    input_size: u32,
    mean: [f32; 3],
    /// Row-major `embed_dim x feature_dim`.
    projection: Option<(usize, Vec<f32>)>,
}

impl<F: FeatureExtractor> PretrainedEncoder<F> {
    pub fn new(extractor: F, config: &EncoderConfig) -> Self {
        Self {
            extractor,
            input_size: config.input_size as u32,
            mean: config.mean,
            projection: None,
        }
    }

    pub fn with_projection(mut self, embed_dim: usize, weights: Vec<f32>) -> Result<Self> {
        if weights.len() != embed_dim * self.extractor.feature_dim() {
            return Err(GalaError::DimensionMismatch {
                expected: embed_dim * self.extractor.feature_dim(),
                got: weights.len(),
            });
        }
        self.projection = Some((embed_dim, weights));
        Ok(self)
    }
}

impl<F: FeatureExtractor> ImageEncoder for PretrainedEncoder<F> {
    fn embed_dim(&self) -> usize {
        self.projection
            .as_ref()
            .map(|(d, _)| *d)
            .unwrap_or_else(|| self.extractor.feature_dim())
    }

    fn encode(&self, image: &ImageTensor) -> Result<Embedding> {
        let features = self.extractor.extract(&preprocess(image, self.input_size, self.mean))?;
        if features.len() != self.extractor.feature_dim() {
            return Err(GalaError::DimensionMismatch {
                expected: self.extractor.feature_dim(),
                got: features.len(),
            });
        }
        match &self.projection {
            None => l2_normalize(&features),
            Some((d, w)) => {
                let f = features.len();
                let projected: Vec<f32> = (0..*d)
                    .map(|i| w[i * f..(i + 1) * f].iter().zip(&features).map(|(a, b)| a * b).sum())
                    .collect();
                l2_normalize(&projected)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine_similarity;
    use crate::instance::mask_rectangle;
    use crate::image::BoundingBox;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 16,
            input_size: 16,
            channels: vec![4, 8, 8, 8],
            ..EncoderConfig::default()
        }
    }

    fn random_image(rng: &mut impl Rng, w: u32, h: u32) -> ImageTensor {
        ImageTensor::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    #[test]
    fn deterministic_unit_norm() {
        let t = TowerWeights::init(small(), TowerRole::Foreground, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = random_image(&mut rng, 20, 20);
        let a = t.encode(&img).unwrap();
        let b = t.encode(&img).unwrap();
        assert_eq!(a, b);
        let n: f64 = a.values().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }

    #[test]
    fn distinct_images_do_not_collide() {
        let t = TowerWeights::init(EncoderConfig { input_size: 32, ..small() }, TowerRole::Foreground, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = t.encode(&random_image(&mut rng, 32, 32)).unwrap();
            let b = t.encode(&random_image(&mut rng, 32, 32)).unwrap();
            assert!(cosine_similarity(&a, &b).unwrap() < 1.0 - 1e-6);
        }
    }

    #[test]
    fn different_holes_give_different_backgrounds() {
        let t = TowerWeights::init(small(), TowerRole::Background, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scene = random_image(&mut rng, 64, 64);
        let b1 = BoundingBox::new(4, 4, 20, 20);
        let b2 = BoundingBox::new(30, 30, 20, 20);
        let q1 = BackgroundQuery::new("a", mask_rectangle(&scene, &b1), Some(b1), "s").unwrap();
        let q2 = BackgroundQuery::new("b", mask_rectangle(&scene, &b2), Some(b2), "s").unwrap();
        let e1 = embed_background(&q1, &t).unwrap();
        let e2 = embed_background(&q2, &t).unwrap();
        assert!(cosine_similarity(&e1, &e2).unwrap() < 1.0 - 1e-6);
        assert_eq!(e1, embed_background(&q1, &t).unwrap());
        let no_box = BackgroundQuery::new("c", scene, None, "s").unwrap();
        assert!(matches!(embed_background(&no_box, &t), Err(GalaError::PlacementRequired)));
    }

    #[test]
    fn zero_network_output_is_degenerate() {
        let cfg = small();
        let net = cfg.network().unwrap();
        let t = TowerWeights::from_params(cfg.clone(), TowerRole::Foreground, true, vec![0.0; net.param_count()]).unwrap();
        let img = ImageTensor::filled(16, 16, [0.5; 3]);
        assert!(matches!(t.encode(&img), Err(GalaError::DegenerateEmbedding)));
    }

    #[test]
    fn fingerprint_guard() {
        let t = TowerWeights::init(small(), TowerRole::Foreground, 1).unwrap();
        assert!(t.check_config(&small()).is_ok());
        let other = EncoderConfig { embed_dim: 8, ..small() };
        assert!(matches!(t.check_config(&other), Err(GalaError::FingerprintMismatch { .. })));
    }

    struct MeanColor;
    impl FeatureExtractor for MeanColor {
        fn feature_dim(&self) -> usize {
            3
        }
        fn extract(&self, input: &InputTensor) -> Result<Vec<f32>> {
            let plane = input.size * input.size;
            Ok((0..3).map(|c| input.data[c * plane..(c + 1) * plane].iter().sum::<f32>() / plane as f32 + 1.0).collect())
        }
    }

    #[test]
    fn pretrained_adapter_normalizes() {
        let enc = PretrainedEncoder::new(MeanColor, &small());
        let e = enc.encode(&ImageTensor::filled(8, 8, [0.485, 0.456, 0.406])).unwrap();
        let v = 1.0 / 3f32.sqrt();
        assert!(e.values().iter().all(|x| (x - v).abs() < 1e-6));
        let enc = enc.with_projection(2, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(enc.embed_dim(), 2);
    }
}
