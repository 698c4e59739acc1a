//! Corpus ingestion: instance masks in, filtered background/foreground pairs out.
//!
//! A corpus directory holds `annotations.jsonl` (one [`CorpusRecord`] per
//! line) plus the images and masks it references. Ingestion writes a manifest
//! (one [`ManifestEntry`] per line) next to the extracted pair images.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GalaError, Result};
use crate::image::{BoundingBox, ImageTensor, SegMask, WHITE};
use crate::instance::{mask_rectangle, BackgroundQuery, ForegroundInstance};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const MANIFEST_VERSION: u32 = 1;

/// Cuts an instance out of its image.
///
/// The foreground is the mask-tight crop with non-object pixels whitened and
/// centered on a white square. The background is the original image with the
/// same rectangle filled by the image's per-channel mean.
pub fn extract_pair(
    image: &ImageTensor,
    mask: &SegMask,
    source_image_id: &str,
    pair_id: &str,
    category: &str,
) -> Result<(BackgroundQuery, ForegroundInstance)> {
    if mask.width() != image.width() || mask.height() != image.height() {
        return Err(GalaError::invalid("mask size differs from image"));
    }
    let rect = mask.tight_box().ok_or(GalaError::EmptyInstance)?;

    let crop = image.crop(&rect)?;
    let crop_mask = mask.crop(&rect)?;
    let (fg_image, fg_mask) = pad_to_square(&crop, &crop_mask);
    let background = mask_rectangle(image, &rect);

    let bg = BackgroundQuery::new(pair_id, background, Some(rect), source_image_id)?;
    let fg = ForegroundInstance::new(pair_id, fg_image, fg_mask, category, source_image_id)?;
    Ok((bg, fg))
}

/// Whitens pixels outside `mask` and centers the result on a white square.
pub fn pad_to_square(crop: &ImageTensor, mask: &SegMask) -> (ImageTensor, SegMask) {
    let side = crop.width().max(crop.height());
    let ox = (side - crop.width()) / 2;
    let oy = (side - crop.height()) / 2;
    let mut image = ImageTensor::filled(side, side, WHITE);
    image.paste_masked(crop, mask, ox, oy);
    let padded = SegMask::from_fn(side, side, |x, y| {
        x >= ox
            && y >= oy
            && x - ox < mask.width()
            && y - oy < mask.height()
            && mask.get(x - ox, y - oy)
    });
    (image, padded)
}

/// The un-padded object crop of a foreground and its mask.
pub fn unpad(fg: &ForegroundInstance) -> Result<(ImageTensor, SegMask)> {
    let rect = fg.mask.tight_box().ok_or(GalaError::EmptyInstance)?;
    Ok((fg.image.crop(&rect)?, fg.mask.crop(&rect)?))
}

/// Pastes a foreground back into its own background hole. Hole pixels outside
/// the object mask keep the fill color.
pub fn restore_background(bg: &BackgroundQuery, fg: &ForegroundInstance) -> Result<ImageTensor> {
    let rect = bg.bbox.ok_or(GalaError::PlacementRequired)?;
    let (crop, mask) = unpad(fg)?;
    if crop.width() != rect.width || crop.height() != rect.height {
        return Err(GalaError::invalid("foreground does not match the background box"));
    }
    let mut image = bg.image.clone();
    image.paste_masked(&crop, &mask, rect.left, rect.top);
    Ok(image)
}

/// Network input: `3 x size x size`, channel-planar, mean subtracted.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    pub size: usize,
    pub data: Vec<f32>,
}

/// Bilinear resize to `target x target`, then per-channel mean subtraction.
pub fn preprocess(image: &ImageTensor, target: u32, mean: [f32; 3]) -> InputTensor {
    let resized = image.resize(target, target);
    let plane = target as usize * target as usize;
    let mut data = vec![0.0; plane * 3];
    for (i, px) in resized.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] - mean[c];
        }
    }
    InputTensor {
        size: target as usize,
        data,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskSource {
    Path { mask_path: String },
    Polygon { polygon: Vec<[f32; 2]> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInstance {
    #[serde(flatten)]
    pub mask: MaskSource,
    #[serde(default)]
    pub category: String,
    pub confidence: f32,
}

/// One annotated image of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub image_id: String,
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<CorpusInstance>,
}

impl CorpusRecord {
    pub fn from_json(line: &str) -> Result<Self> {
        let rec: CorpusRecord = serde_json::from_str(line)?;
        if rec.width == 0 || rec.height == 0 {
            return Err(GalaError::format("corpus record", "image dimensions must be positive"));
        }
        if rec.image_id.is_empty() {
            return Err(GalaError::format("corpus record", "empty image_id"));
        }
        for inst in &rec.instances {
            if !(0.0..=1.0).contains(&inst.confidence) {
                return Err(GalaError::format("corpus record", "confidence outside [0, 1]"));
            }
            if let MaskSource::Polygon { polygon } = &inst.mask {
                if polygon.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(GalaError::format("corpus record", "non-finite polygon vertex"));
                }
            }
        }
        Ok(rec)
    }

    /// Decodes instance `k`'s mask, checking it matches the image size.
    pub fn load_mask(&self, k: usize, root: &Path) -> Result<SegMask> {
        let inst = self
            .instances
            .get(k)
            .ok_or_else(|| GalaError::invalid(format!("no instance {k}")))?;
        let mask = match &inst.mask {
            MaskSource::Path { mask_path } => SegMask::load(root.join(mask_path))?,
            MaskSource::Polygon { polygon } => SegMask::from_polygon(self.width, self.height, polygon),
        };
        if mask.width() != self.width || mask.height() != self.height {
            return Err(GalaError::invalid(format!(
                "mask of {}#{k} is {}x{}, image is {}x{}",
                self.image_id,
                mask.width(),
                mask.height(),
                self.width,
                self.height
            )));
        }
        Ok(mask)
    }
}

pub fn read_corpus(dir: &Path) -> Result<Vec<CorpusRecord>> {
    let path = dir.join(ANNOTATIONS_FILE);
    let file = fs::File::open(&path).map_err(|e| GalaError::io(&path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| GalaError::io(&path, e))?;
        if !line.trim().is_empty() {
            out.push(CorpusRecord::from_json(&line)?);
        }
    }
    Ok(out)
}

pub fn write_corpus(dir: &Path, records: &[CorpusRecord]) -> Result<()> {
    let path = dir.join(ANNOTATIONS_FILE);
    let mut f = fs::File::create(&path).map_err(|e| GalaError::io(&path, e))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| GalaError::io(&path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub min_confidence: f32,
    pub area_min: f64,
    pub area_max: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_confidence: 0.6,
            area_min: 0.05,
            area_max: 0.50,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(GalaError::invalid("min confidence must be in [0, 1]"));
        }
        if !(self.area_min > 0.0 && self.area_min < self.area_max && self.area_max <= 1.0) {
            return Err(GalaError::invalid("area range must satisfy 0 < min < max <= 1"));
        }
        Ok(())
    }

    pub fn keeps(&self, confidence: f32, area_fraction: f64) -> bool {
        confidence > self.min_confidence
            && area_fraction >= self.area_min
            && area_fraction <= self.area_max
    }
}

/// Fraction of the image covered by the instance's mask-tight box
/// (0 for an empty mask).
pub fn box_area_fraction(mask: &SegMask) -> f64 {
    mask.tight_box()
        .map(|b| b.area() as f64 / (mask.width() as f64 * mask.height() as f64))
        .unwrap_or(0.0)
}

/// Drops instances below the confidence threshold or outside the area range,
/// then drops records left without instances.
pub fn filter_corpus(records: &[CorpusRecord], cfg: &FilterConfig, root: &Path) -> Result<Vec<CorpusRecord>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for rec in records {
        let mut kept = Vec::new();
        for (k, inst) in rec.instances.iter().enumerate() {
            if inst.confidence <= cfg.min_confidence {
                continue;
            }
            let mask = rec.load_mask(k, root)?;
            if cfg.keeps(inst.confidence, box_area_fraction(&mask)) {
                kept.push(inst.clone());
            }
        }
        if !kept.is_empty() {
            out.push(CorpusRecord {
                instances: kept,
                ..rec.clone()
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub bg_path: String,
    pub fg_path: String,
    pub mask_path: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub category: String,
    pub split: Split,
}

impl ManifestEntry {
    pub fn parse(line: &str) -> Result<Self> {
        let e: ManifestEntry = serde_json::from_str(line)?;
        if e.pair_id.is_empty() {
            return Err(GalaError::format("manifest line", "empty pair_id"));
        }
        Ok(e)
    }

    /// Source image id encoded as the pair id's prefix (`<image_id>:<k>`).
    pub fn source_image_id(&self) -> &str {
        source_of(&self.pair_id)
    }
}

pub fn source_of(pair_id: &str) -> &str {
    pair_id.rsplit_once(':').map(|(s, _)| s).unwrap_or(pair_id)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.pair_id.as_str()) {
                return Err(GalaError::DuplicateId(e.pair_id.clone()));
            }
        }
        Ok(Self {
            version: MANIFEST_VERSION,
            entries,
        })
    }

    pub fn category_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.category.clone()).or_insert(0) += 1;
        }
        counts
    }

    pub fn split_counts(&self) -> (usize, usize) {
        let train = self.entries.iter().filter(|e| e.split == Split::Train).count();
        (train, self.entries.len() - train)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(ManifestEntry::parse)
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GalaError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()?).map_err(|e| GalaError::io(path, e))
    }
}

/// Assigns `round(train_fraction * n)` randomly chosen records to train and
/// the rest to eval. Deterministic per seed.
pub fn split_dataset(manifest: &DatasetManifest, train_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(GalaError::invalid("train fraction must be in (0, 1)"));
    }
    let n = manifest.entries.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut entries = manifest.entries.clone();
    for (rank, &i) in order.iter().enumerate() {
        entries[i].split = if rank < n_train { Split::Train } else { Split::Eval };
    }
    Ok(DatasetManifest {
        version: manifest.version,
        entries,
    })
}

/// A loaded training/evaluation pair.
#[derive(Debug, Clone)]
pub struct PairRecord {
    pub pair_id: String,
    pub background: BackgroundQuery,
    pub foreground: ForegroundInstance,
    pub split: Split,
}

impl PairRecord {
    pub fn category(&self) -> &str {
        &self.foreground.category
    }
}

fn file_stem(pair_id: &str) -> String {
    pair_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[derive(Debug, Clone)]
pub struct IngestConfig {
    pub filter: FilterConfig,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            filter: FilterConfig::default(),
            train_fraction: 0.9,
            seed: 0,
        }
    }
}

/// Filters a corpus, extracts every surviving instance and writes the pair
/// images plus a split manifest to `manifest_path`'s directory.
pub fn ingest(corpus_dir: &Path, manifest_path: &Path, cfg: &IngestConfig) -> Result<DatasetManifest> {
    let records = read_corpus(corpus_dir)?;
    // Keep original instance indices so pair ids are stable under filtering.
    let mut entries = Vec::new();
    let out_dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    for sub in ["bg", "fg", "mask"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| GalaError::io(&d, e))?;
    }
    cfg.filter.validate()?;
    for rec in &records {
        let mut image: Option<ImageTensor> = None;
        for (k, inst) in rec.instances.iter().enumerate() {
            if inst.confidence <= cfg.filter.min_confidence {
                continue;
            }
            let mask = rec.load_mask(k, corpus_dir)?;
            if !cfg.filter.keeps(inst.confidence, box_area_fraction(&mask)) {
                continue;
            }
            if image.is_none() {
                let img = ImageTensor::load(corpus_dir.join(&rec.image_path))?;
                if img.width() != rec.width || img.height() != rec.height {
                    return Err(GalaError::invalid(format!(
                        "{} is {}x{}, annotation says {}x{}",
                        rec.image_path,
                        img.width(),
                        img.height(),
                        rec.width,
                        rec.height
                    )));
                }
                image = Some(img);
            }
            let pair_id = format!("{}:{k}", rec.image_id);
            let (bg, fg) = extract_pair(image.as_ref().unwrap(), &mask, &rec.image_id, &pair_id, &inst.category)?;
            let stem = file_stem(&pair_id);
            let entry = ManifestEntry {
                pair_id,
                bg_path: format!("bg/{stem}.png"),
                fg_path: format!("fg/{stem}.png"),
                mask_path: format!("mask/{stem}.png"),
                bbox: bg.bbox.expect("extracted background has a box"),
                category: inst.category.clone(),
                split: Split::Train,
            };
            bg.image.save(out_dir.join(&entry.bg_path))?;
            fg.image.save(out_dir.join(&entry.fg_path))?;
            fg.mask.save(out_dir.join(&entry.mask_path))?;
            entries.push(entry);
        }
    }
    let manifest = split_dataset(&DatasetManifest::new(entries)?, cfg.train_fraction, cfg.seed)?;
    manifest.write(manifest_path)?;
    Ok(manifest)
}

/// Loads every pair of a manifest from disk.
pub fn load_pairs(manifest_path: &Path) -> Result<Vec<PairRecord>> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    manifest.entries.iter().map(|e| load_pair(e, root)).collect()
}

pub fn load_pair(e: &ManifestEntry, root: &Path) -> Result<PairRecord> {
    let source = e.source_image_id();
    let bg_image = ImageTensor::load(root.join(&e.bg_path))?;
    let fg_image = ImageTensor::load(root.join(&e.fg_path))?;
    let fg_mask = SegMask::load(root.join(&e.mask_path))?;
    Ok(PairRecord {
        pair_id: e.pair_id.clone(),
        background: BackgroundQuery::new(e.pair_id.clone(), bg_image, Some(e.bbox), source)?,
        foreground: ForegroundInstance::new(e.pair_id.clone(), fg_image, fg_mask, e.category.clone(), source)?,
        split: e.split,
    })
}
