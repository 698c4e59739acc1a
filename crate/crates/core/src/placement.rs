//! Object, location and scale selection for backgrounds without a box.
//!
//! Every candidate window is scored by filling it like a training hole,
//! embedding the result with the background tower and comparing it to the
//! object's foreground embedding.

use std::io::Cursor;

use image::{GrayImage, ImageFormat, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_similarity, Embedding};
use crate::encoder::ImageEncoder;
use crate::error::{GalaError, Result};
use crate::image::{BoundingBox, ImageTensor};
use crate::retrieval::GalleryIndex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlacementConfig {
    pub n_seeds: usize,
    pub aspect_ratios: Vec<f32>,
    /// Seed box areas as fractions of the image area.
    pub seed_scales: Vec<f32>,
    pub grid_k: usize,
    pub init_area_fraction: f32,
    pub scale_ratio: f64,
    pub num_scales: usize,
    pub refine: bool,
    pub seed: u64,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            n_seeds: 10,
            aspect_ratios: vec![0.5, 1.0, 2.0],
            seed_scales: vec![1.0 / 50.0, 1.0 / 25.0, 1.0 / 10.0],
            grid_k: 10,
            init_area_fraction: 1.0 / 25.0,
            scale_ratio: 1.2,
            num_scales: 9,
            refine: true,
            seed: 0,
        }
    }
}

impl PlacementConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |f: f32| f > 0.0 && f < 1.0;
        if self.grid_k < 2 {
            return Err(GalaError::invalid("grid_k must be at least 2"));
        }
        if !frac(self.init_area_fraction) || !self.seed_scales.iter().all(|f| frac(*f)) {
            return Err(GalaError::invalid("area fractions must lie in (0, 1)"));
        }
        if self.n_seeds == 0 || self.aspect_ratios.is_empty() || self.seed_scales.is_empty() {
            return Err(GalaError::invalid("seed search needs seeds, ratios and scales"));
        }
        if !self.aspect_ratios.iter().all(|r| *r > 0.0 && r.is_finite()) {
            return Err(GalaError::invalid("aspect ratios must be positive"));
        }
        if self.num_scales == 0 || !(self.scale_ratio > 0.0) {
            return Err(GalaError::invalid("scale sweep needs a positive ratio and at least one scale"));
        }
        Ok(())
    }

    /// Area multiplier of scale index `k`: `ratio^(k - center)`.
    pub fn scale(&self, k: usize) -> f64 {
        let center = (self.num_scales / 2) as i32;
        self.scale_ratio.powi(k as i32 - center)
    }
}

/// Scores candidate windows of one background for one object.
pub trait WindowScorer {
    fn image_size(&self) -> (u32, u32);
    fn score(&self, window: &BoundingBox) -> Result<f32>;
}

/// Fills the window with the image mean and compares the background
/// embedding to a fixed foreground embedding.
pub struct HoleScorer<'a> {
    image: &'a ImageTensor,
    fill: [f32; 3],
    target: &'a Embedding,
    encoder: &'a dyn ImageEncoder,
}

impl<'a> HoleScorer<'a> {
    pub fn new(image: &'a ImageTensor, target: &'a Embedding, encoder: &'a dyn ImageEncoder) -> Self {
        Self {
            image,
            fill: image.channel_mean(),
            target,
            encoder,
        }
    }
}

impl WindowScorer for HoleScorer<'_> {
    fn image_size(&self) -> (u32, u32) {
        (self.image.width(), self.image.height())
    }

    fn score(&self, window: &BoundingBox) -> Result<f32> {
        let mut holed = self.image.clone();
        holed.fill_rect(window, self.fill);
        cosine_similarity(&self.encoder.encode(&holed)?, self.target)
    }
}

/// Real-valued window sides for an aspect ratio and area fraction.
fn ideal_size(aspect: f32, area_fraction: f64, img_w: u32, img_h: u32) -> (f64, f64) {
    let area = area_fraction * img_w as f64 * img_h as f64;
    let aspect = aspect as f64;
    ((area * aspect).sqrt(), (area / aspect).sqrt())
}

fn round_side(v: f64, limit: u32) -> u32 {
    (v.round() as u32).clamp(1, limit)
}

/// Integer window size with the given aspect ratio covering `area_fraction`
/// of the image.
pub fn window_size(aspect: f32, area_fraction: f32, img_w: u32, img_h: u32) -> (u32, u32) {
    let (w, h) = ideal_size(aspect, area_fraction as f64, img_w, img_h);
    (round_side(w, img_w), round_side(h, img_h))
}

/// Window size at area multiplier `scale`. Sides round away from the
/// initial size so the area stays within the configured scale range.
pub fn scaled_window_size(aspect: f32, area_fraction: f32, scale: f64, img_w: u32, img_h: u32) -> (u32, u32) {
    let (w, h) = ideal_size(aspect, area_fraction as f64 * scale, img_w, img_h);
    let side = |v: f64, limit: u32| -> u32 {
        let r = if scale < 1.0 {
            v.ceil()
        } else if scale > 1.0 {
            v.floor()
        } else {
            v.round()
        };
        (r as u32).clamp(1, limit)
    };
    (side(w, img_w), side(h, img_h))
}

// ---------------------------------------------------------------------------
// Object selection

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSelection {
    pub object_id: String,
    pub score: f32,
    pub seed_box: BoundingBox,
}

/// Candidate boxes of the random-seed search, in evaluation order.
pub fn seed_boxes(img_w: u32, img_h: u32, cfg: &PlacementConfig) -> Vec<BoundingBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut boxes = Vec::with_capacity(cfg.n_seeds * cfg.aspect_ratios.len() * cfg.seed_scales.len());
    for _ in 0..cfg.n_seeds {
        let cx = rng.random_range(0.0..img_w as f32);
        let cy = rng.random_range(0.0..img_h as f32);
        for &ratio in &cfg.aspect_ratios {
            for &scale in &cfg.seed_scales {
                let (w, h) = window_size(ratio, scale, img_w, img_h);
                if let Some(b) = BoundingBox::centered_within(cx, cy, w, h, img_w, img_h) {
                    boxes.push(b);
                }
            }
        }
    }
    boxes
}

/// Queries the gallery with every seed box and keeps the single best
/// (score, then smallest id) object over all of them.
pub fn seed_select(image: &ImageTensor, index: &GalleryIndex, encoder: &dyn ImageEncoder, cfg: &PlacementConfig) -> Result<SeedSelection> {
    cfg.validate()?;
    if index.is_empty() {
        return Err(GalaError::EmptyIndex);
    }
    let fill = image.channel_mean();
    let mut best: Option<(f32, usize, BoundingBox)> = None;
    for b in seed_boxes(image.width(), image.height(), cfg) {
        let mut holed = image.clone();
        holed.fill_rect(&b, fill);
        let q = encoder.encode(&holed)?;
        for (i, s) in index.scores(&q)?.into_iter().enumerate() {
            let better = match &best {
                None => true,
                Some((bs, bi, _)) => s > *bs || (s == *bs && index.ids()[i] < index.ids()[*bi]),
            };
            if better {
                best = Some((s, i, b));
            }
        }
    }
    let (score, i, seed_box) = best.ok_or_else(|| GalaError::invalid("no seed box fits the image"))?;
    Ok(SeedSelection {
        object_id: index.ids()[i].clone(),
        score,
        seed_box,
    })
}

// ---------------------------------------------------------------------------
// Location search

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub grid_k: usize,
    pub window: (u32, u32),
    /// Row-major `grid_k x grid_k`.
    pub scores: Vec<f32>,
    pub best_cell: usize,
    /// All cells scored the same.
    pub degenerate: bool,
}

impl GridSearch {
    pub fn min_max(&self) -> (f32, f32) {
        self.scores
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
    }

    /// Scores scaled to `[0, 1]`; all zeros when degenerate.
    pub fn normalized(&self) -> Vec<f32> {
        let (lo, hi) = self.min_max();
        if !(hi > lo) {
            return vec![0.0; self.scores.len()];
        }
        self.scores.iter().map(|v| (v - lo) / (hi - lo)).collect()
    }
}

/// Step between neighbouring window positions along each axis.
pub fn grid_stride(window: (u32, u32), img: (u32, u32), k: usize) -> (f64, f64) {
    let steps = (k - 1) as f64;
    (
        (img.0 - window.0) as f64 / steps,
        (img.1 - window.1) as f64 / steps,
    )
}

/// Window of grid cell `cell` (row-major).
pub fn cell_box(cell: usize, window: (u32, u32), img: (u32, u32), k: usize) -> BoundingBox {
    let (sx, sy) = grid_stride(window, img, k);
    let (row, col) = (cell / k, cell % k);
    let left = ((col as f64 * sx).round() as u32).min(img.0 - window.0);
    let top = ((row as f64 * sy).round() as u32).min(img.1 - window.1);
    BoundingBox::new(left, top, window.0, window.1)
}

fn argmax_first(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, s) in v.iter().enumerate() {
        if *s > v[best] {
            best = i;
        }
    }
    best
}

/// Scores a `k x k` grid of window positions spanning the image.
pub fn grid_search(scorer: &dyn WindowScorer, window: (u32, u32), k: usize) -> Result<GridSearch> {
    let img = scorer.image_size();
    if k < 2 {
        return Err(GalaError::invalid("grid_k must be at least 2"));
    }
    if window.0 == 0 || window.1 == 0 || window.0 > img.0 || window.1 > img.1 {
        return Err(GalaError::invalid(format!(
            "window {}x{} does not fit the {}x{} image",
            window.0, window.1, img.0, img.1
        )));
    }
    let scores = (0..k * k)
        .map(|c| scorer.score(&cell_box(c, window, img, k)))
        .collect::<Result<Vec<f32>>>()?;
    let (lo, hi) = scores
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    Ok(GridSearch {
        grid_k: k,
        window,
        best_cell: argmax_first(&scores),
        degenerate: !(hi > lo),
        scores,
    })
}

/// Bilinear upsampling of a `k x k` grid onto `width x height` pixels with
/// grid corners pinned to image corners.
pub fn upsample_grid(grid: &[f32], k: usize, width: u32, height: u32) -> Vec<f32> {
    let mut out = Vec::with_capacity(width as usize * height as usize);
    let coord = |p: u32, n: u32| -> (usize, usize, f32) {
        let g = if n > 1 { p as f32 * (k - 1) as f32 / (n - 1) as f32 } else { 0.0 };
        let g0 = (g.floor() as usize).min(k - 1);
        let g1 = (g0 + 1).min(k - 1);
        (g0, g1, g - g0 as f32)
    };
    for y in 0..height {
        let (y0, y1, ty) = coord(y, height);
        for x in 0..width {
            let (x0, x1, tx) = coord(x, width);
            let top = grid[y0 * k + x0] * (1.0 - tx) + grid[y0 * k + x1] * tx;
            let bot = grid[y1 * k + x0] * (1.0 - tx) + grid[y1 * k + x1] * tx;
            out.push((top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0));
        }
    }
    out
}

/// Grid search plus its heatmap at image resolution.
pub fn grid_heatmap(scorer: &dyn WindowScorer, window: (u32, u32), k: usize) -> Result<(GridSearch, Vec<f32>)> {
    let grid = grid_search(scorer, window, k)?;
    let (w, h) = scorer.image_size();
    let heat = upsample_grid(&grid.normalized(), k, w, h);
    Ok((grid, heat))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub window: BoundingBox,
    pub score: f32,
}

/// Searches the neighbourhood of the best cell (half a stride each way) at
/// `1/k` of the grid stride. The cell itself is a candidate, so the result
/// never scores below it.
pub fn refine_location(scorer: &dyn WindowScorer, grid: &GridSearch) -> Result<Location> {
    let img = scorer.image_size();
    let k = grid.grid_k;
    let start = cell_box(grid.best_cell, grid.window, img, k);
    let mut best = Location {
        window: start,
        score: grid.scores[grid.best_cell],
    };
    let (sx, sy) = grid_stride(grid.window, img, k);
    let half = (k / 2) as i64;
    let max_left = (img.0 - grid.window.0) as f64;
    let max_top = (img.1 - grid.window.1) as f64;
    let mut seen = vec![(start.left, start.top)];
    for dy in -half..=half {
        for dx in -half..=half {
            let left = (start.left as f64 + dx as f64 * sx / k as f64).round().clamp(0.0, max_left) as u32;
            let top = (start.top as f64 + dy as f64 * sy / k as f64).round().clamp(0.0, max_top) as u32;
            if seen.contains(&(left, top)) {
                continue;
            }
            seen.push((left, top));
            let window = BoundingBox::new(left, top, grid.window.0, grid.window.1);
            let score = scorer.score(&window)?;
            if score > best.score {
                best = Location { window, score };
            }
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Scale selection

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSelection {
    pub window: BoundingBox,
    pub scale_index: usize,
    pub scale: f64,
    pub scores: Vec<f32>,
}

/// Candidate windows of the scale sweep centered at `center`.
pub fn scale_boxes(center: (f32, f32), aspect: f32, img: (u32, u32), cfg: &PlacementConfig) -> Vec<Option<BoundingBox>> {
    (0..cfg.num_scales)
        .map(|k| {
            let (w, h) = scaled_window_size(aspect, cfg.init_area_fraction, cfg.scale(k), img.0, img.1);
            BoundingBox::centered_within(center.0, center.1, w, h, img.0, img.1)
        })
        .collect()
}

/// Best of the scaled windows; ties go to the smaller scale.
pub fn scale_select(scorer: &dyn WindowScorer, center: (f32, f32), aspect: f32, cfg: &PlacementConfig) -> Result<ScaleSelection> {
    let img = scorer.image_size();
    let boxes = scale_boxes(center, aspect, img, cfg);
    let mut scores = Vec::with_capacity(boxes.len());
    let mut best: Option<(usize, BoundingBox, f32)> = None;
    for (k, b) in boxes.iter().enumerate() {
        let Some(b) = b else {
            scores.push(f32::NEG_INFINITY);
            continue;
        };
        let s = scorer.score(b)?;
        scores.push(s);
        if best.is_none_or(|(_, _, bs)| s > bs) {
            best = Some((k, *b, s));
        }
    }
    let (k, window, _) = best.ok_or_else(|| GalaError::invalid("no scaled window fits the image"))?;
    Ok(ScaleSelection {
        window,
        scale_index: k,
        scale: cfg.scale(k),
        scores,
    })
}

// ---------------------------------------------------------------------------
// Full pipeline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementResult {
    pub object_id: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub heatmap_width: u32,
    pub heatmap_height: u32,
    /// Row-major heatmap values in `[0, 1]`.
    pub heatmap: Vec<f32>,
    pub grid_scores: Vec<f32>,
    pub scale_scores: Vec<f32>,
    pub degenerate: bool,
}

/// Location and scale for a known gallery object.
pub fn place_object(
    image: &ImageTensor,
    index: &GalleryIndex,
    object_id: &str,
    encoder: &dyn ImageEncoder,
    cfg: &PlacementConfig,
) -> Result<PlacementResult> {
    cfg.validate()?;
    let i = index
        .position(object_id)
        .ok_or_else(|| GalaError::UnknownId(object_id.to_string()))?;
    let target = Embedding::from_unit(index.row(i).to_vec())?;
    let aspect = index.meta(i).aspect_ratio;
    let scorer = HoleScorer::new(image, &target, encoder);
    let window = window_size(aspect, cfg.init_area_fraction, image.width(), image.height());
    let (grid, heatmap) = grid_heatmap(&scorer, window, cfg.grid_k)?;
    let location = if cfg.refine {
        refine_location(&scorer, &grid)?
    } else {
        Location {
            window: cell_box(grid.best_cell, window, (image.width(), image.height()), cfg.grid_k),
            score: grid.scores[grid.best_cell],
        }
    };
    let scale = scale_select(&scorer, location.window.center(), aspect, cfg)?;
    Ok(PlacementResult {
        object_id: object_id.to_string(),
        bbox: scale.window,
        heatmap_width: image.width(),
        heatmap_height: image.height(),
        heatmap,
        grid_scores: grid.scores,
        scale_scores: scale.scores,
        degenerate: grid.degenerate,
    })
}

/// Object, location and scale for a background without a box.
pub fn place(image: &ImageTensor, index: &GalleryIndex, encoder: &dyn ImageEncoder, cfg: &PlacementConfig) -> Result<PlacementResult> {
    let seed = seed_select(image, index, encoder, cfg)?;
    place_object(image, index, &seed.object_id, encoder, cfg)
}

/// Grayscale PNG of a heatmap.
pub fn heatmap_png(values: &[f32], width: u32, height: u32) -> Result<Vec<u8>> {
    if values.len() != width as usize * height as usize {
        return Err(GalaError::DimensionMismatch {
            expected: width as usize * height as usize,
            got: values.len(),
        });
    }
    let img = GrayImage::from_fn(width, height, |x, y| {
        Luma([(values[(y * width + x) as usize].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}
