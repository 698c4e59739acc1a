//! Request handling behind the HTTP service, independent of any transport.
//!
//! An [`Engine`] owns a loaded gallery index and background tower and turns
//! JSON request bodies into JSON response bodies. Everything except the
//! `elapsed_ms` field is a pure function of the request and the loaded state.

use std::path::{Path, PathBuf};
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::unpad;
use crate::encoder::checkpoint::load_checkpoint;
use crate::encoder::{TowerRole, TowerWeights};
use crate::error::GalaError;
use crate::image::{BoundingBox, ImageTensor, SegMask};
use crate::instance::{mask_rectangle, BackgroundQuery, ForegroundInstance};
use crate::placement::{heatmap_png, place, PlacementConfig};
use crate::retrieval::{load_index, query_topk, GalleryIndex, RetrievalResult};

pub const MAX_K: usize = 50;
pub const DEFAULT_K: usize = 10;

/// File name of the background tower inside a weights directory.
pub const BACKGROUND_CHECKPOINT: &str = "background.ckpt";
pub const FOREGROUND_CHECKPOINT: &str = "foreground.ckpt";

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("service unavailable: {0}")]
    Unavailable(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> u16 {
        match self {
            ApiError::BadRequest(_) => 400,
            ApiError::NotFound(_) => 404,
            ApiError::Unavailable(_) => 503,
            ApiError::Internal(_) => 500,
        }
    }
}

impl From<GalaError> for ApiError {
    fn from(e: GalaError) -> Self {
        match e {
            GalaError::UnknownId(id) => ApiError::NotFound(format!("object `{id}`")),
            GalaError::EmptyIndex => ApiError::Unavailable("index is empty".into()),
            GalaError::Image(_) | GalaError::Format { .. } | GalaError::Invalid(_) | GalaError::Json(_) => {
                ApiError::BadRequest(e.to_string())
            }
            other => ApiError::Internal(other.to_string()),
        }
    }
}

fn default_k() -> usize {
    DEFAULT_K
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    /// Base64-encoded PNG or JPEG.
    pub image: String,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[u32; 4]>,
    #[serde(default = "default_k")]
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHit {
    pub id: String,
    pub score: f32,
    pub thumbnail_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub results: Vec<QueryHit>,
    /// Predicted box, only for queries without one.
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[u32; 4]>,
    /// Object chosen for placement, only for queries without a box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heatmap_png_b64: Option<String>,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeRequest {
    pub image: String,
    pub object_id: String,
    #[serde(rename = "box")]
    pub bbox: [u32; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub index_size: usize,
    pub embed_dim: usize,
}

pub fn thumbnail_url(id: &str) -> String {
    format!("/v1/objects/{id}/thumbnail")
}

pub fn decode_image_b64(data: &str) -> Result<ImageTensor, ApiError> {
    let bytes = B64
        .decode(data.trim())
        .map_err(|e| ApiError::BadRequest(format!("image is not valid base64: {e}")))?;
    ImageTensor::decode(&bytes).map_err(|e| ApiError::BadRequest(format!("undecodable image: {e}")))
}

fn checked_box(raw: [u32; 4], image: &ImageTensor) -> Result<BoundingBox, ApiError> {
    let b = BoundingBox::try_from(raw).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    if !b.fits_in(image.width(), image.height()) {
        return Err(ApiError::BadRequest(format!(
            "box {b} outside {}x{} image",
            image.width(),
            image.height()
        )));
    }
    Ok(b)
}

fn hits(result: RetrievalResult) -> Vec<QueryHit> {
    result
        .ranked
        .into_iter()
        .map(|s| QueryHit {
            thumbnail_url: thumbnail_url(&s.id),
            id: s.id,
            score: s.score,
        })
        .collect()
}

/// Loaded index plus background tower.
pub struct Engine {
    index: GalleryIndex,
    background: TowerWeights,
    placement: PlacementConfig,
    asset_root: PathBuf,
}

impl Engine {
    /// `asset_root` resolves relative thumbnail and mask paths in the index.
    pub fn new(
        index: GalleryIndex,
        background: TowerWeights,
        placement: PlacementConfig,
        asset_root: impl Into<PathBuf>,
    ) -> crate::Result<Self> {
        index.check_dim(background.config().embed_dim)?;
        placement.validate()?;
        Ok(Self {
            index,
            background: background.with_role(TowerRole::Background),
            placement,
            asset_root: asset_root.into(),
        })
    }

    /// `weights` is a background checkpoint or a directory holding one.
    pub fn load(index_path: &Path, weights: &Path, placement: PlacementConfig) -> crate::Result<Self> {
        let ckpt = if weights.is_dir() {
            weights.join(BACKGROUND_CHECKPOINT)
        } else {
            weights.to_path_buf()
        };
        let background = load_checkpoint(&ckpt)?;
        let index = load_index(index_path)?;
        let root = index_path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Engine::new(index, background, placement, root)
    }

    pub fn index(&self) -> &GalleryIndex {
        &self.index
    }

    pub fn placement(&self) -> &PlacementConfig {
        &self.placement
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            index_size: self.index.len(),
            embed_dim: self.index.dim(),
        }
    }

    pub fn query(&self, req: &QueryRequest) -> Result<QueryResponse, ApiError> {
        let started = Instant::now();
        if req.k == 0 {
            return Err(ApiError::BadRequest("k must be at least 1".into()));
        }
        let k = req.k.min(MAX_K).min(self.index.len());
        let image = decode_image_b64(&req.image)?;
        let mut response = match req.bbox {
            Some(raw) => {
                let rect = checked_box(raw, &image)?;
                let bg = BackgroundQuery::new("query", mask_rectangle(&image, &rect), Some(rect), "query")?;
                QueryResponse {
                    results: hits(query_topk(&bg, &self.index, k, &self.background)?),
                    bbox: None,
                    object_id: None,
                    heatmap_png_b64: None,
                    elapsed_ms: 0,
                }
            }
            None => {
                let placed = place(&image, &self.index, &self.background, &self.placement)?;
                let rect = placed.bbox;
                let bg = BackgroundQuery::new("query", mask_rectangle(&image, &rect), Some(rect), "query")?;
                let png = heatmap_png(&placed.heatmap, placed.heatmap_width, placed.heatmap_height)?;
                QueryResponse {
                    results: hits(query_topk(&bg, &self.index, k, &self.background)?),
                    bbox: Some([rect.left, rect.top, rect.width, rect.height]),
                    object_id: Some(placed.object_id),
                    heatmap_png_b64: Some(B64.encode(png)),
                    elapsed_ms: 0,
                }
            }
        };
        response.elapsed_ms = started.elapsed().as_millis() as u64;
        Ok(response)
    }

    /// JSON in, JSON out.
    pub fn query_json(&self, body: &[u8]) -> Result<Vec<u8>, ApiError> {
        let req: QueryRequest =
            serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed query: {e}")))?;
        let resp = self.query(&req)?;
        serde_json::to_vec(&resp).map_err(|e| ApiError::Internal(e.to_string()))
    }

    fn asset(&self, rel: &Option<String>, id: &str, what: &str) -> Result<PathBuf, ApiError> {
        let rel = rel
            .as_ref()
            .ok_or_else(|| ApiError::NotFound(format!("object `{id}` has no {what}")))?;
        Ok(self.asset_root.join(rel))
    }

    fn position(&self, id: &str) -> Result<usize, ApiError> {
        self.index
            .position(id)
            .ok_or_else(|| ApiError::NotFound(format!("object `{id}`")))
    }

    /// The object's stored white-padded cutout and mask.
    pub fn foreground(&self, id: &str) -> Result<ForegroundInstance, ApiError> {
        let i = self.position(id)?;
        let meta = self.index.meta(i);
        let image = ImageTensor::load(self.asset(&meta.thumbnail_path, id, "thumbnail")?)
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        let mask = SegMask::load(self.asset(&meta.mask_path, id, "mask")?).map_err(|e| ApiError::Internal(e.to_string()))?;
        ForegroundInstance::new(id, image, mask, meta.category.clone(), "").map_err(|e| ApiError::Internal(e.to_string()))
    }

    pub fn thumbnail(&self, id: &str) -> Result<Vec<u8>, ApiError> {
        let i = self.position(id)?;
        let path = self.asset(&self.index.meta(i).thumbnail_path, id, "thumbnail")?;
        std::fs::read(&path).map_err(|e| ApiError::Internal(format!("{}: {e}", path.display())))
    }

    /// Pastes the object's masked cutout, resized to the box, onto the image.
    pub fn composite(&self, req: &CompositeRequest) -> Result<Vec<u8>, ApiError> {
        let fg = self.foreground(&req.object_id)?;
        let image = decode_image_b64(&req.image)?;
        let rect = checked_box(req.bbox, &image)?;
        Ok(composite(&image, &fg, &rect)?.encode_png()?)
    }
}

/// Alpha-pastes `fg` (un-padded, resized to `rect`) onto a copy of `image`.
pub fn composite(image: &ImageTensor, fg: &ForegroundInstance, rect: &BoundingBox) -> crate::Result<ImageTensor> {
    let (crop, mask) = unpad(fg)?;
    let (crop, mask) = if crop.width() == rect.width && crop.height() == rect.height {
        (crop, mask)
    } else {
        (crop.resize(rect.width, rect.height), mask.resize(rect.width, rect.height))
    };
    let mut out = image.clone();
    out.paste_masked(&crop, &mask, rect.left, rect.top);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::extract_pair;
    use crate::encoder::EncoderConfig;
    use crate::retrieval::{build_index, save_index};
    use crate::synthetic::{generate_scene, SynthConfig};

    fn b64_png(image: &ImageTensor) -> String {
        B64.encode(image.encode_png().unwrap())
    }

    fn engine_with_assets(dir: &Path) -> (Engine, Vec<(ImageTensor, BoundingBox, String)>) {
        let cfg = SynthConfig::default();
        let mut fgs = Vec::new();
        let mut sources = Vec::new();
        for seed in 0..6 {
            let scene = generate_scene(seed, &cfg).unwrap();
            let (mask, cat) = &scene.instances[0];
            let id = format!("s{seed}");
            let (bg, fg) = extract_pair(&scene.image, mask, &id, &id, cat).unwrap();
            fg.image.save(dir.join(format!("{id}.png"))).unwrap();
            fg.mask.save(dir.join(format!("{id}_mask.png"))).unwrap();
            sources.push((scene.image.clone(), bg.bbox.unwrap(), id));
            fgs.push(fg);
        }
        let enc = EncoderConfig::desk();
        let bg_tower = TowerWeights::init(enc.clone(), TowerRole::Background, 1).unwrap();
        let fg_tower = TowerWeights::init(enc, TowerRole::Foreground, 2).unwrap();
        let mut index = build_index(&fgs, &fg_tower).unwrap();
        for i in 0..index.len() {
            let id = index.ids()[i].clone();
            let meta = index.meta_mut(i);
            meta.thumbnail_path = Some(format!("{id}.png"));
            meta.mask_path = Some(format!("{id}_mask.png"));
        }
        save_index(&index, &dir.join("index.gidx")).unwrap();
        let engine = Engine::new(index, bg_tower, PlacementConfig { grid_k: 4, ..Default::default() }, dir).unwrap();
        (engine, sources)
    }

    #[test]
    fn boxed_query_is_deterministic_and_capped() {
        let dir = tempfile::tempdir().unwrap();
        let (engine, sources) = engine_with_assets(dir.path());
        let (image, rect, _) = &sources[0];
        let req = QueryRequest {
            image: b64_png(image),
            bbox: Some([rect.left, rect.top, rect.width, rect.height]),
            k: 500,
        };
        let a = engine.query(&req).unwrap();
        let b = engine.query(&req).unwrap();
        assert_eq!(a.results, b.results);
        assert_eq!(a.results.len(), 6);
        assert!(a.bbox.is_none() && a.heatmap_png_b64.is_none());
        assert_eq!(a.results[0].thumbnail_url, thumbnail_url(&a.results[0].id));
        let one = engine.query(&QueryRequest { k: 1, ..req }).unwrap();
        assert_eq!(one.results.len(), 1);
    }

    #[test]
    fn boxless_query_predicts_a_box_in_range() {
        let dir = tempfile::tempdir().unwrap();
        let (engine, sources) = engine_with_assets(dir.path());
        let (image, _, _) = &sources[2];
        let resp = engine
            .query(&QueryRequest {
                image: b64_png(image),
                bbox: None,
                k: 3,
            })
            .unwrap();
        let [l, t, w, h] = resp.bbox.unwrap();
        assert!(l + w <= image.width() && t + h <= image.height());
        let frac = (w * h) as f64 / image.area() as f64;
        let init = engine.placement().init_area_fraction as f64;
        assert!(frac >= init * 1.2f64.powi(-4) - 1e-12 && frac <= init * 1.2f64.powi(4) + 1e-12, "{frac}");
        let png = B64.decode(resp.heatmap_png_b64.unwrap()).unwrap();
        assert!(image::load_from_memory(&png).is_ok());
        assert!(engine.index().position(&resp.object_id.unwrap()).is_some());
    }

    #[test]
    fn malformed_requests_are_bad_requests() {
        let dir = tempfile::tempdir().unwrap();
        let (engine, sources) = engine_with_assets(dir.path());
        let img = b64_png(&sources[0].0);
        let cases = [
            QueryRequest { image: "%%%".into(), bbox: None, k: 1 },
            QueryRequest { image: B64.encode(b"not an image"), bbox: None, k: 1 },
            QueryRequest { image: img.clone(), bbox: Some([60, 60, 10, 10]), k: 1 },
            QueryRequest { image: img.clone(), bbox: Some([0, 0, 0, 5]), k: 1 },
            QueryRequest { image: img, bbox: Some([0, 0, 5, 5]), k: 0 },
        ];
        for c in cases {
            assert_eq!(engine.query(&c).unwrap_err().status(), 400, "{c:?}");
        }
        assert_eq!(engine.query_json(b"{").unwrap_err().status(), 400);
    }

    #[test]
    fn composite_at_the_source_box_reproduces_the_source() {
        let dir = tempfile::tempdir().unwrap();
        let (engine, sources) = engine_with_assets(dir.path());
        let (image, rect, id) = &sources[1];
        let holed = mask_rectangle(image, rect);
        let png = engine
            .composite(&CompositeRequest {
                image: b64_png(&holed),
                object_id: id.clone(),
                bbox: [rect.left, rect.top, rect.width, rect.height],
            })
            .unwrap();
        let out = ImageTensor::decode(&png).unwrap();
        let fg = engine.foreground(id).unwrap();
        let (_, mask) = unpad(&fg).unwrap();
        for y in 0..rect.height {
            for x in 0..rect.width {
                if mask.get(x, y) {
                    let (px, py) = (rect.left + x, rect.top + y);
                    let (a, b) = (out.pixel(px, py), image.pixel(px, py));
                    assert!(a.iter().zip(&b).all(|(u, v)| (u - v).abs() < 1.5 / 255.0));
                }
            }
        }
    }

    #[test]
    fn composite_handles_tiny_boxes_and_unknown_ids() {
        let dir = tempfile::tempdir().unwrap();
        let (engine, sources) = engine_with_assets(dir.path());
        let img = b64_png(&sources[0].0);
        let png = engine
            .composite(&CompositeRequest {
                image: img.clone(),
                object_id: sources[0].2.clone(),
                bbox: [5, 5, 1, 1],
            })
            .unwrap();
        assert_eq!(ImageTensor::decode(&png).unwrap().width(), 64);
        let err = engine
            .composite(&CompositeRequest {
                image: img,
                object_id: "nope".into(),
                bbox: [0, 0, 4, 4],
            })
            .unwrap_err();
        assert_eq!(err.status(), 404);
        assert_eq!(engine.thumbnail("nope").unwrap_err().status(), 404);
    }

    #[test]
    fn thumbnails_are_square_and_health_reports_the_index() {
        let dir = tempfile::tempdir().unwrap();
        let (engine, sources) = engine_with_assets(dir.path());
        let bytes = engine.thumbnail(&sources[3].2).unwrap();
        let thumb = ImageTensor::decode(&bytes).unwrap();
        assert_eq!(thumb.width(), thumb.height());
        let h = engine.health();
        assert_eq!(h.index_size, 6);
        assert_eq!(h.embed_dim, 128);
    }
}
