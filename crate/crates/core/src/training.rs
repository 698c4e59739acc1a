//! Losses, the optimizer and the alternating training schedule.

use std::borrow::Cow;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{restore_background, InputTensor, PairRecord};
use crate::embedding::Embedding;
use crate::encoder::cnn::ForwardCache;
use crate::encoder::{EncoderConfig, TowerRole, TowerWeights};
use crate::error::{GalaError, Result};
use crate::image::ImageTensor;
use crate::transforms::{
    apply_record, augment_masks, corner_homography, draw_record, warp_image, DonorPool, MaskAugConfig, TransformConfig,
};

/// Hinge on a similarity gap: `max(0, s_neg - s_pos + margin)`.
pub fn triplet_loss(s_pos: f32, s_neg: f32, margin: f32) -> f32 {
    (s_neg - s_pos + margin).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub margin_t: f32,
    pub margin_c: f32,
    pub contrastive: bool,
    /// Use only the most similar in-batch negative per anchor.
    pub hardest_negative: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin_t: 0.3,
            margin_c: 0.1,
            contrastive: true,
            hardest_negative: false,
        }
    }
}

/// Background anchors, their foreground positives and (optionally) a
/// self-transformed copy of each positive.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub anchors: Vec<Embedding>,
    pub positives: Vec<Embedding>,
    /// Empty when the contrastive term is not used.
    pub transformed: Vec<Embedding>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub l_t: f64,
    pub l_c: f64,
    pub total: f64,
}

/// Gradients of the batch loss with respect to each input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub anchors: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub transformed: Vec<Vec<f64>>,
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_shapes<T>(a: &[Vec<T>], p: &[Vec<T>], t: &[Vec<T>]) -> Result<usize> {
    let b = a.len();
    if b < 2 {
        return Err(GalaError::invalid("batch needs at least two pairs for in-batch negatives"));
    }
    if p.len() != b {
        return Err(GalaError::DimensionMismatch { expected: b, got: p.len() });
    }
    if !t.is_empty() && t.len() != b {
        return Err(GalaError::DimensionMismatch { expected: b, got: t.len() });
    }
    let d = a[0].len();
    for v in a.iter().chain(p).chain(t) {
        if v.len() != d {
            return Err(GalaError::DimensionMismatch { expected: d, got: v.len() });
        }
    }
    Ok(b)
}

/// Loss over unit vectors; similarity is the plain dot product.
fn loss_on_unit(a: &[Vec<f64>], p: &[Vec<f64>], t: &[Vec<f64>], cfg: &LossConfig, mut grads: Option<&mut LossGradients>) -> LossValue {
    let b = a.len();
    let sim: Vec<Vec<f64>> = a.iter().map(|ai| p.iter().map(|pj| dot64(ai, pj)).collect()).collect();
    let mt = cfg.margin_t as f64;
    let mc = cfg.margin_c as f64;

    let add_term = |grads: &mut Option<&mut LossGradients>, i: usize, neg: &[f64], neg_slot: (bool, usize), w: f64| {
        if let Some(g) = grads.as_deref_mut() {
            for k in 0..a[i].len() {
                g.anchors[i][k] += w * (neg[k] - p[i][k]);
                g.positives[i][k] -= w * a[i][k];
            }
            let target = if neg_slot.0 { &mut g.transformed[neg_slot.1] } else { &mut g.positives[neg_slot.1] };
            for (x, ak) in target.iter_mut().zip(&a[i]) {
                *x += w * ak;
            }
        }
    };

    let mut l_t = 0.0;
    if cfg.hardest_negative {
        let w = 1.0 / b as f64;
        for i in 0..b {
            let j = (0..b)
                .filter(|&j| j != i)
                .fold(None::<usize>, |best, j| match best {
                    Some(k) if sim[i][k] >= sim[i][j] => Some(k),
                    _ => Some(j),
                })
                .expect("b >= 2");
            let h = sim[i][j] - sim[i][i] + mt;
            if h > 0.0 {
                l_t += h * w;
                add_term(&mut grads, i, &p[j], (false, j), w);
            }
        }
    } else {
        let w = 1.0 / (b * (b - 1)) as f64;
        for i in 0..b {
            for j in 0..b {
                if j == i {
                    continue;
                }
                let h = sim[i][j] - sim[i][i] + mt;
                if h > 0.0 {
                    l_t += h * w;
                    add_term(&mut grads, i, &p[j], (false, j), w);
                }
            }
        }
    }

    let mut l_c = 0.0;
    if cfg.contrastive && !t.is_empty() {
        let w = 1.0 / b as f64;
        for i in 0..b {
            let h = dot64(&a[i], &t[i]) - sim[i][i] + mc;
            if h > 0.0 {
                l_c += h * w;
                add_term(&mut grads, i, &t[i], (true, i), w);
            }
        }
    }
    LossValue { l_t, l_c, total: l_t + l_c }
}

/// Triplet term over all in-batch negatives plus the contrastive term that
/// treats each transformed positive as a negative for its own anchor.
pub fn batch_loss(batch: &TripletBatch, cfg: &LossConfig) -> Result<LossValue> {
    let conv = |v: &[Embedding]| -> Vec<Vec<f64>> { v.iter().map(|e| e.values().iter().map(|x| *x as f64).collect()).collect() };
    let (a, p, t) = (conv(&batch.anchors), conv(&batch.positives), conv(&batch.transformed));
    check_shapes(&a, &p, &t)?;
    Ok(loss_on_unit(&a, &p, &t, cfg, None))
}

fn normalize64(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = dot64(v, v).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(GalaError::DegenerateEmbedding);
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

/// Loss and gradients with respect to the raw (pre-normalization) tower
/// outputs.
pub fn loss_and_grad(raw_a: &[Vec<f64>], raw_p: &[Vec<f64>], raw_t: &[Vec<f64>], cfg: &LossConfig) -> Result<(LossValue, LossGradients)> {
    let b = check_shapes(raw_a, raw_p, raw_t)?;
    let norm_all = |v: &[Vec<f64>]| -> Result<Vec<(Vec<f64>, f64)>> { v.iter().map(|x| normalize64(x)).collect() };
    let (na, np, nt) = (norm_all(raw_a)?, norm_all(raw_p)?, norm_all(raw_t)?);
    let units = |v: &[(Vec<f64>, f64)]| -> Vec<Vec<f64>> { v.iter().map(|(u, _)| u.clone()).collect() };
    let (ua, up, ut) = (units(&na), units(&np), units(&nt));
    let d = raw_a[0].len();
    let mut g = LossGradients {
        anchors: vec![vec![0.0; d]; b],
        positives: vec![vec![0.0; d]; b],
        transformed: vec![vec![0.0; d]; raw_t.len()],
    };
    let value = loss_on_unit(&ua, &up, &ut, cfg, Some(&mut g));
    // d/dx (x/|x|) applied to the upstream gradient.
    let back = |grads: &mut [Vec<f64>], normed: &[(Vec<f64>, f64)]| {
        for (gv, (u, n)) in grads.iter_mut().zip(normed) {
            let ug = dot64(u, gv);
            for (gk, uk) in gv.iter_mut().zip(u) {
                *gk = (*gk - uk * ug) / n;
            }
        }
    };
    back(&mut g.anchors, &na);
    back(&mut g.positives, &np);
    back(&mut g.transformed, &nt);
    Ok((value, g))
}

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Linear learning-rate scaling relative to the reference setup of eight
/// devices with 40 samples each.
pub fn linear_scaled_lr(base_lr: f32, world_size: usize, batch_per_device: usize) -> f32 {
    base_lr * (world_size * batch_per_device) as f32 / (40.0 * 8.0)
}

// ---------------------------------------------------------------------------
// Schedule

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Background,
    Foreground,
    Joint,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Background => "background",
            Stage::Foreground => "foreground",
            Stage::Joint => "joint",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub margin_t: f32,
    pub margin_c: f32,
    pub lr: f32,
    pub batch_size: usize,
    pub rounds: usize,
    /// Epochs per stage.
    pub epochs: usize,
    /// Hard cap on optimizer steps per stage.
    pub max_steps: Option<usize>,
    pub contrastive_background: bool,
    pub contrastive_foreground: bool,
    pub hardest_negative: bool,
    /// `false` trains both towers jointly for one stage.
    pub alternating: bool,
    pub reverse_order: bool,
    pub mask_augmentation: bool,
    pub transforms: TransformConfig,
    pub mask_aug: MaskAugConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin_t: 0.3,
            margin_c: 0.1,
            lr: 8e-5,
            batch_size: 40,
            rounds: 1,
            epochs: 30,
            max_steps: None,
            contrastive_background: true,
            contrastive_foreground: true,
            hardest_negative: false,
            alternating: true,
            reverse_order: false,
            mask_augmentation: true,
            transforms: TransformConfig::default(),
            mask_aug: MaskAugConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin_t >= 0.0 && self.margin_c >= 0.0) {
            return Err(GalaError::invalid("margins must be non-negative"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(GalaError::invalid("learning rate must be positive"));
        }
        if self.batch_size < 2 {
            return Err(GalaError::invalid("batch size must be at least 2"));
        }
        Ok(())
    }

    pub fn set_contrastive(&mut self, on: bool) {
        self.contrastive_background = on;
        self.contrastive_foreground = on;
    }

    pub fn loss_config(&self, stage: Stage) -> LossConfig {
        LossConfig {
            margin_t: self.margin_t,
            margin_c: self.margin_c,
            contrastive: match stage {
                Stage::Background => self.contrastive_background,
                Stage::Foreground => self.contrastive_foreground,
                Stage::Joint => self.contrastive_background || self.contrastive_foreground,
            },
            hardest_negative: self.hardest_negative,
        }
    }

    /// Stages executed by [`alternating_train`], in order. Joint training
    /// runs one stage per round so each tower gets the same number of epochs
    /// as under alternation.
    pub fn stage_plan(&self) -> Vec<Stage> {
        if !self.alternating {
            return vec![Stage::Joint; self.rounds.max(1)];
        }
        if self.rounds == 0 {
            // Foreground tower stays at its initialization.
            return vec![Stage::Background];
        }
        let pair = if self.reverse_order {
            [Stage::Foreground, Stage::Background]
        } else {
            [Stage::Background, Stage::Foreground]
        };
        (0..self.rounds).flat_map(|_| pair).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub stage: Stage,
    #[serde(rename = "L_t")]
    pub l_t: f64,
    #[serde(rename = "L_c")]
    pub l_c: f64,
    pub total: f64,
}

/// Training pairs plus the donor images used for lighting transforms.
pub struct TrainData {
    pairs: Vec<PairRecord>,
    pool: DonorPool,
}

impl TrainData {
    /// Uses every pair's restored scene as a lighting donor.
    pub fn new(pairs: Vec<PairRecord>) -> Result<Self> {
        let mut donors: Vec<(String, ImageTensor)> = Vec::new();
        for p in &pairs {
            let id = &p.background.source_image_id;
            if donors.iter().all(|(d, _)| d != id) {
                donors.push((id.clone(), restore_background(&p.background, &p.foreground)?));
            }
        }
        Ok(Self::with_pool(pairs, DonorPool::new(donors)))
    }

    pub fn with_pool(pairs: Vec<PairRecord>, pool: DonorPool) -> Self {
        Self { pairs, pool }
    }

    pub fn pairs(&self) -> &[PairRecord] {
        &self.pairs
    }

    pub fn pool(&self) -> &DonorPool {
        &self.pool
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Towers {
    pub background: TowerWeights,
    pub foreground: TowerWeights,
}

impl Towers {
    /// Independent random initializations.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            background: TowerWeights::init(config.clone(), TowerRole::Background, seed)?,
            foreground: TowerWeights::init(config.clone(), TowerRole::Foreground, seed.wrapping_add(1))?,
        })
    }

    /// Both towers start from copies of the same weights.
    pub fn from_pretrained(weights: &TowerWeights) -> Self {
        Self {
            background: weights.with_role(TowerRole::Background),
            foreground: weights.with_role(TowerRole::Foreground),
        }
    }
}

struct Sample {
    bg: InputTensor,
    fg: InputTensor,
    transformed: Option<InputTensor>,
}

fn prepare_sample(towers: &Towers, data: &TrainData, index: usize, seed: u64, cfg: &TrainConfig, contrastive: bool) -> Result<Sample> {
    let pair = &data.pairs[index];
    let (fg, bg) = if cfg.mask_augmentation {
        match augment_masks(&pair.foreground, &pair.background, seed, &cfg.mask_aug) {
            Ok((f, b)) => (Cow::Owned(f), Cow::Owned(b)),
            Err(GalaError::ErosionExhausted(_)) => (Cow::Borrowed(&pair.foreground), Cow::Borrowed(&pair.background)),
            Err(e) => return Err(e),
        }
    } else {
        (Cow::Borrowed(&pair.foreground), Cow::Borrowed(&pair.background))
    };
    let transformed = if contrastive {
        let record = draw_record(seed ^ 0x9e37_79b9_7f4a_7c15, &data.pool, None, &cfg.transforms)?;
        let t = apply_record(&fg, &data.pool, &record)?;
        Some(towers.foreground.preprocess(&t.image))
    } else {
        None
    };
    Ok(Sample {
        bg: towers.background.preprocess(&bg.image),
        fg: towers.foreground.preprocess(&fg.image),
        transformed,
    })
}

fn forward_all(tower: &TowerWeights, inputs: &[&InputTensor]) -> Result<Vec<ForwardCache<f32>>> {
    inputs.iter().map(|x| tower.network().forward(tower.params(), &x.data)).collect()
}

fn to64(caches: &[ForwardCache<f32>]) -> Vec<Vec<f64>> {
    caches.iter().map(|c| c.output.iter().map(|v| *v as f64).collect()).collect()
}

fn accumulate(tower: &TowerWeights, caches: &[ForwardCache<f32>], grads: &[Vec<f64>], out: &mut [f32]) {
    for (c, g) in caches.iter().zip(grads) {
        let d: Vec<f32> = g.iter().map(|v| *v as f32).collect();
        tower.network().backward(tower.params(), c, &d, out);
    }
}

/// One stage of training: only the tower(s) named by `stage` that are
/// marked trainable are updated; everything else is returned untouched.
pub fn train_stage(
    stage: Stage,
    towers: &Towers,
    data: &TrainData,
    cfg: &TrainConfig,
    seed: u64,
    log: &mut dyn FnMut(&LogEntry),
) -> Result<Towers> {
    cfg.validate()?;
    let train_bg = matches!(stage, Stage::Background | Stage::Joint) && towers.background.trainable;
    let train_fg = matches!(stage, Stage::Foreground | Stage::Joint) && towers.foreground.trainable;
    let mut out = towers.clone();
    if !(train_bg || train_fg) || cfg.epochs == 0 || cfg.max_steps == Some(0) {
        return Ok(out);
    }
    if data.len() < 2 {
        return Err(GalaError::invalid("training needs at least two pairs"));
    }
    let loss_cfg = cfg.loss_config(stage);
    let mut opt_bg = Adam::new(out.background.params().len(), cfg.lr);
    let mut opt_fg = Adam::new(out.foreground.params().len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = cfg.batch_size.min(data.len());
    let mut step = 0;

    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let samples = chunk
                .iter()
                .map(|&i| prepare_sample(&out, data, i, rng.next_u64(), cfg, loss_cfg.contrastive))
                .collect::<Result<Vec<_>>>()?;
            let bg_in: Vec<&InputTensor> = samples.iter().map(|s| &s.bg).collect();
            let fg_in: Vec<&InputTensor> = samples.iter().map(|s| &s.fg).collect();
            let t_in: Vec<&InputTensor> = samples.iter().filter_map(|s| s.transformed.as_ref()).collect();

            let bg_c = forward_all(&out.background, &bg_in)?;
            let fg_c = forward_all(&out.foreground, &fg_in)?;
            let t_c = forward_all(&out.foreground, &t_in)?;
            let (value, grads) = match loss_and_grad(&to64(&bg_c), &to64(&fg_c), &to64(&t_c), &loss_cfg) {
                Ok(v) => v,
                Err(GalaError::DegenerateEmbedding) => {
                    return Err(GalaError::Divergence { step, stage: stage.to_string() })
                }
                Err(e) => return Err(e),
            };
            let entry = LogEntry {
                step,
                stage,
                l_t: value.l_t,
                l_c: value.l_c,
                total: value.total,
            };
            log(&entry);
            if !value.total.is_finite() {
                return Err(GalaError::Divergence { step, stage: stage.to_string() });
            }

            if train_bg {
                let mut g = vec![0f32; out.background.params().len()];
                accumulate(&out.background, &bg_c, &grads.anchors, &mut g);
                check_finite(&g, step, stage)?;
                opt_bg.step(out.background.params_mut(), &g);
            }
            if train_fg {
                let mut g = vec![0f32; out.foreground.params().len()];
                accumulate(&out.foreground, &fg_c, &grads.positives, &mut g);
                accumulate(&out.foreground, &t_c, &grads.transformed, &mut g);
                check_finite(&g, step, stage)?;
                opt_fg.step(out.foreground.params_mut(), &g);
            }
            step += 1;
        }
    }
    Ok(out)
}

fn check_finite(g: &[f32], step: usize, stage: Stage) -> Result<()> {
    if g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GalaError::Divergence { step, stage: stage.to_string() })
    }
}

/// Runs the stages of [`TrainConfig::stage_plan`] in order.
pub fn alternating_train(init: &Towers, data: &TrainData, cfg: &TrainConfig, seed: u64, log: &mut dyn FnMut(&LogEntry)) -> Result<Towers> {
    let mut towers = init.clone();
    for (k, stage) in cfg.stage_plan().into_iter().enumerate() {
        towers = train_stage(stage, &towers, data, cfg, seed.wrapping_add(k as u64 * 0x1000_0001), log)?;
    }
    Ok(towers)
}

// ---------------------------------------------------------------------------
// Pretraining

/// Instance discrimination on unlabeled images: two randomly flipped,
/// brightness-jittered and cropped views of the same image are pulled
/// together, views of different images pushed apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub margin: f32,
    pub flip_probability: f64,
    /// Views scale brightness by a factor in `[1 - b, 1 + b]`.
    pub brightness: f32,
    /// Views crop away up to this fraction of each side.
    pub crop_fraction: f32,
    /// Views move each corner by up to this fraction of the side.
    pub perspective: f32,
    pub max_steps: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            margin: 0.3,
            flip_probability: 0.5,
            brightness: 0.4,
            crop_fraction: 0.1,
            perspective: 0.15,
            max_steps: None,
        }
    }
}

fn random_view(image: &ImageTensor, rng: &mut impl Rng, cfg: &PretrainConfig) -> ImageTensor {
    let (w, h) = (image.width(), image.height());
    let cut = |rng: &mut dyn RngCore, side: u32| -> u32 {
        let max = (cfg.crop_fraction * side as f32).floor() as u32;
        if max == 0 {
            0
        } else {
            rng.random_range(0..=max)
        }
    };
    let (l, r, t, b) = (cut(rng, w), cut(rng, w), cut(rng, h), cut(rng, h));
    let rect = crate::image::BoundingBox::new(l, t, (w - l - r).max(1), (h - t - b).max(1));
    let mut view = image.crop(&rect).unwrap_or_else(|_| image.clone()).resize(w, h);
    if cfg.perspective > 0.0 {
        let mut offsets = [[0f32; 2]; 4];
        for o in offsets.iter_mut().flatten() {
            *o = rng.random_range(-cfg.perspective..=cfg.perspective);
        }
        if let Ok(h) = corner_homography(&offsets) {
            view = warp_image(&view, &h).unwrap_or(view);
        }
    }
    if rng.random_bool(cfg.flip_probability) {
        view = view.flip_horizontal();
    }
    let gain = if cfg.brightness > 0.0 {
        rng.random_range(1.0 - cfg.brightness..=1.0 + cfg.brightness)
    } else {
        1.0
    };
    ImageTensor::from_fn(w, h, |x, y| view.pixel(x, y).map(|v| v * gain))
}

/// Produces generic initial weights shared by both towers.
pub fn pretrain(
    images: &[ImageTensor],
    config: &EncoderConfig,
    cfg: &PretrainConfig,
    seed: u64,
    log: &mut dyn FnMut(&LogEntry),
) -> Result<TowerWeights> {
    if images.len() < 2 {
        return Err(GalaError::invalid("pretraining needs at least two images"));
    }
    let mut tower = TowerWeights::init(config.clone(), TowerRole::Foreground, seed)?;
    let loss_cfg = LossConfig {
        margin_t: cfg.margin,
        margin_c: 0.0,
        contrastive: false,
        hardest_negative: false,
    };
    let mut opt = Adam::new(tower.params().len(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let batch = cfg.batch_size.clamp(2, images.len());
    let mut step = 0;
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let mut va = Vec::with_capacity(chunk.len());
            let mut vb = Vec::with_capacity(chunk.len());
            for &i in chunk {
                va.push(tower.preprocess(&random_view(&images[i], &mut rng, cfg)));
                vb.push(tower.preprocess(&random_view(&images[i], &mut rng, cfg)));
            }
            let ca = forward_all(&tower, &va.iter().collect::<Vec<_>>())?;
            let cb = forward_all(&tower, &vb.iter().collect::<Vec<_>>())?;
            let (value, grads) = loss_and_grad(&to64(&ca), &to64(&cb), &[], &loss_cfg)
                .map_err(|_| GalaError::Divergence { step, stage: "pretrain".into() })?;
            log(&LogEntry {
                step,
                stage: Stage::Joint,
                l_t: value.l_t,
                l_c: 0.0,
                total: value.total,
            });
            let mut g = vec![0f32; tower.params().len()];
            accumulate(&tower, &ca, &grads.anchors, &mut g);
            accumulate(&tower, &cb, &grads.positives, &mut g);
            if !value.total.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(GalaError::Divergence { step, stage: "pretrain".into() });
            }
            opt.step(tower.params_mut(), &g);
            step += 1;
        }
    }
    Ok(tower)
}
