//! Gallery index and exact top-k cosine search.
//!
//! Index file layout: `b"GIDX"`, version `u32`, dimension `u32`, row count
//! `u32`, the row-major `f32` matrix (little-endian), then a JSON block with
//! ids and per-object metadata running to the end of the file.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{dot, Embedding};
use crate::encoder::{embed_background, ImageEncoder};
use crate::error::{GalaError, Result};
use crate::instance::{BackgroundQuery, ForegroundInstance};

pub const MAGIC: &[u8; 4] = b"GIDX";
pub const VERSION: u32 = 1;
const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectMeta {
    pub category: String,
    /// Width over height of the mask-tight box.
    pub aspect_ratio: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thumbnail_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MetaBlock {
    ids: Vec<String>,
    meta: Vec<ObjectMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    dim: usize,
    ids: Vec<String>,
    embeddings: Vec<f32>,
    meta: Vec<ObjectMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub id: String,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub ranked: Vec<ScoredId>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<&str> {
        self.ranked.iter().map(|r| r.id.as_str()).collect()
    }

    /// 1-based rank of `id`, if present.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.ranked.iter().position(|r| r.id == id).map(|p| p + 1)
    }
}

/// Descending score, then ascending id.
pub fn rank_order(a: &ScoredId, b: &ScoredId) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.id.cmp(&b.id))
}

impl GalleryIndex {
    pub fn new(ids: Vec<String>, embeddings: Vec<Embedding>, meta: Vec<ObjectMeta>) -> Result<Self> {
        if ids.is_empty() {
            return Err(GalaError::EmptyIndex);
        }
        if embeddings.len() != ids.len() || meta.len() != ids.len() {
            return Err(GalaError::invalid("ids, embeddings and meta must have equal lengths"));
        }
        let dim = embeddings[0].dim();
        let mut flat = Vec::with_capacity(dim * ids.len());
        for e in &embeddings {
            if e.dim() != dim {
                return Err(GalaError::DimensionMismatch { expected: dim, got: e.dim() });
            }
            flat.extend_from_slice(e.values());
        }
        Self::from_parts(dim, ids, flat, meta)
    }

    fn from_parts(dim: usize, ids: Vec<String>, embeddings: Vec<f32>, meta: Vec<ObjectMeta>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(GalaError::DuplicateId(id.clone()));
            }
        }
        for (k, row) in embeddings.chunks_exact(dim).enumerate() {
            let n = dot(row, row).sqrt();
            if !((n - 1.0).abs() <= NORM_TOLERANCE) {
                return Err(GalaError::invalid(format!("row {k} is not unit-norm")));
            }
        }
        Ok(Self { dim, ids, embeddings, meta })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.embeddings[i * self.dim..(i + 1) * self.dim]
    }

    pub fn meta(&self, i: usize) -> &ObjectMeta {
        &self.meta[i]
    }

    pub fn meta_mut(&mut self, i: usize) -> &mut ObjectMeta {
        &mut self.meta[i]
    }

    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim != expected {
            return Err(GalaError::DimensionMismatch { expected, got: self.dim });
        }
        Ok(())
    }

    /// Cosine similarity of `query` to every row, in row order.
    pub fn scores(&self, query: &Embedding) -> Result<Vec<f32>> {
        self.check_dim(query.dim())?;
        Ok((0..self.len())
            .map(|i| dot(self.row(i), query.values()).clamp(-1.0, 1.0) as f32)
            .collect())
    }

    /// The `k` best rows for a query embedding.
    pub fn search(&self, query: &Embedding, k: usize, query_id: &str) -> Result<RetrievalResult> {
        if self.is_empty() {
            return Err(GalaError::EmptyIndex);
        }
        if k == 0 || k > self.len() {
            return Err(GalaError::invalid(format!("k must be in 1..={}", self.len())));
        }
        let mut ranked: Vec<ScoredId> = self
            .scores(query)?
            .into_iter()
            .zip(&self.ids)
            .map(|(score, id)| ScoredId { id: id.clone(), score })
            .collect();
        ranked.sort_by(rank_order);
        ranked.truncate(k);
        Ok(RetrievalResult {
            query_id: query_id.to_string(),
            ranked,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let block = serde_json::to_vec(&MetaBlock {
            ids: self.ids.clone(),
            meta: self.meta.clone(),
        })
        .expect("meta serializes");
        let mut out = Vec::with_capacity(16 + 4 * self.embeddings.len() + block.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for v in &self.embeddings {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&block);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let err = |r: &str| GalaError::format("index", r);
        if bytes.len() < 16 {
            return Err(err("truncated header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(err("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        if word(4) != VERSION as usize {
            return Err(err(&format!("unsupported version {}", word(4))));
        }
        let (dim, count) = (word(8), word(12));
        if dim == 0 || count == 0 {
            return Err(err("empty dimension or row count"));
        }
        let matrix_bytes = dim
            .checked_mul(count)
            .and_then(|n| n.checked_mul(4))
            .filter(|n| *n <= bytes.len() - 16)
            .ok_or_else(|| err("truncated matrix"))?;
        let embeddings: Vec<f32> = bytes[16..16 + matrix_bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let block: MetaBlock = serde_json::from_slice(&bytes[16 + matrix_bytes..]).map_err(|e| err(&e.to_string()))?;
        if block.ids.len() != count || block.meta.len() != count {
            return Err(err("id block does not match row count"));
        }
        Self::from_parts(dim, block.ids, embeddings, block.meta)
    }
}

/// Embeds every gallery object with the foreground tower.
pub fn build_index(gallery: &[ForegroundInstance], encoder: &dyn ImageEncoder) -> Result<GalleryIndex> {
    if gallery.is_empty() {
        return Err(GalaError::EmptyIndex);
    }
    let images: Vec<_> = gallery.iter().map(|f| &f.image).collect();
    let embeddings = encoder.encode_batch(&images)?;
    let meta = gallery
        .iter()
        .map(|f| ObjectMeta {
            category: f.category.clone(),
            aspect_ratio: f.aspect_ratio(),
            thumbnail_path: None,
            mask_path: None,
        })
        .collect();
    GalleryIndex::new(gallery.iter().map(|f| f.id.clone()).collect(), embeddings, meta)
}

/// Ranks the gallery for a background with a box.
pub fn query_topk(bg: &BackgroundQuery, index: &GalleryIndex, k: usize, encoder: &dyn ImageEncoder) -> Result<RetrievalResult> {
    if index.is_empty() {
        return Err(GalaError::EmptyIndex);
    }
    let q = embed_background(bg, encoder)?;
    index.search(&q, k, &bg.id)
}

pub fn save_index(index: &GalleryIndex, path: &Path) -> Result<()> {
    std::fs::write(path, index.encode()).map_err(|e| GalaError::io(path, e))
}

pub fn load_index(path: &Path) -> Result<GalleryIndex> {
    let bytes = std::fs::read(path).map_err(|e| GalaError::io(path, e))?;
    GalleryIndex::decode(&bytes)
}

/// Loads an index and checks it matches the configured embedding size.
pub fn load_index_for(path: &Path, embed_dim: usize) -> Result<GalleryIndex> {
    let index = load_index(path)?;
    index.check_dim(embed_dim)?;
    Ok(index)
}
