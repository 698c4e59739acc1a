//! Self-transformations used as synthetic negatives, and mask augmentation.
//!
//! Geometry: a random homography from perturbed unit-square corners, followed
//! by an optional left-right flip. Lighting: a blurred, min-max normalized
//! luminance map from an unrelated donor image, exponentiated so its values
//! span `[1, peak_gain]`, multiplies the object pixels.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GalaError, Result};
use crate::image::{BoundingBox, ImageTensor, SegMask, WHITE};
use crate::instance::{BackgroundQuery, ForegroundInstance};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryParams {
    /// Offsets of the TL, TR, BR, BL corners as fractions of the side length.
    pub corner_offsets: [[f32; 2]; 4],
    pub flip: bool,
}

impl GeometryParams {
    pub const IDENTITY: GeometryParams = GeometryParams {
        corner_offsets: [[0.0; 2]; 4],
        flip: false,
    };

    pub fn flip_only() -> Self {
        GeometryParams {
            flip: true,
            ..Self::IDENTITY
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightingParams {
    pub source_image_id: String,
    pub blur_radius: f32,
    pub peak_gain: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Geometry,
    Lighting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum TransformParams {
    Geometry(GeometryParams),
    Lighting(LightingParams),
    /// Geometry followed by lighting on the warped result.
    Composed(GeometryParams, LightingParams),
}

/// Everything needed to replay one self-transformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    #[serde(flatten)]
    pub params: TransformParams,
    pub seed: u64,
}

impl TransformRecord {
    pub fn kind(&self) -> Option<TransformKind> {
        match self.params {
            TransformParams::Geometry(_) => Some(TransformKind::Geometry),
            TransformParams::Lighting(_) => Some(TransformKind::Lighting),
            TransformParams::Composed(..) => None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: TransformRecord = serde_json::from_str(s)?;
        let check_light = |l: &LightingParams| {
            if !(l.blur_radius.is_finite() && l.blur_radius >= 0.0 && l.peak_gain.is_finite() && l.peak_gain > 1.0) {
                return Err(GalaError::format("transform record", "invalid lighting parameters"));
            }
            Ok(())
        };
        let check_geom = |g: &GeometryParams| {
            if g.corner_offsets.iter().flatten().any(|v| !v.is_finite()) {
                return Err(GalaError::format("transform record", "non-finite corner offset"));
            }
            Ok(())
        };
        match &rec.params {
            TransformParams::Geometry(g) => check_geom(g)?,
            TransformParams::Lighting(l) => check_light(l)?,
            TransformParams::Composed(g, l) => {
                check_geom(g)?;
                check_light(l)?
            }
        }
        Ok(rec)
    }
}

// ---------------------------------------------------------------------------
// Geometry

/// Row-major 3x3 projective matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub [f64; 9]);

impl Homography {
    pub const IDENTITY: Homography = Homography([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    /// Direct linear transform from four point correspondences.
    pub fn from_correspondences(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> Result<Homography> {
        let mut a = [[0f64; 9]; 8];
        for i in 0..4 {
            let [x, y] = src[i];
            let [u, v] = dst[i];
            a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
            a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
        }
        let h = solve8(a).ok_or(GalaError::DegenerateHomography)?;
        let m = Homography([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0]);
        if m.determinant().abs() < 1e-9 || m.0.iter().any(|v| !v.is_finite()) {
            return Err(GalaError::DegenerateHomography);
        }
        Ok(m)
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    pub fn inverse(&self) -> Result<Homography> {
        let m = &self.0;
        let det = self.determinant();
        if det.abs() < 1e-12 {
            return Err(GalaError::DegenerateHomography);
        }
        let inv = [
            m[4] * m[8] - m[5] * m[7],
            m[2] * m[7] - m[1] * m[8],
            m[1] * m[5] - m[2] * m[4],
            m[5] * m[6] - m[3] * m[8],
            m[0] * m[8] - m[2] * m[6],
            m[2] * m[3] - m[0] * m[5],
            m[3] * m[7] - m[4] * m[6],
            m[1] * m[6] - m[0] * m[7],
            m[0] * m[4] - m[1] * m[3],
        ];
        Ok(Homography(inv.map(|v| v / det)))
    }

    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.0;
        let w = m[6] * x + m[7] * y + m[8];
        if w.abs() < 1e-12 {
            return None;
        }
        Some(((m[0] * x + m[1] * y + m[2]) / w, (m[3] * x + m[4] * y + m[5]) / w))
    }
}

/// Gaussian elimination with partial pivoting on an 8x9 augmented system.
fn solve8(mut a: [[f64; 9]; 8]) -> Option<[f64; 8]> {
    for col in 0..8 {
        let pivot = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        for row in 0..8 {
            if row != col {
                let f = a[row][col] / a[col][col];
                if f != 0.0 {
                    for k in col..9 {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
    }
    let mut x = [0f64; 8];
    for i in 0..8 {
        x[i] = a[i][8] / a[i][i];
    }
    Some(x)
}

const UNIT_SQUARE: [[f64; 2]; 4] = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];

/// Homography in unit-square coordinates mapping the corners to
/// `corners + offsets`. Rejects non-convex or folded quads.
pub fn corner_homography(offsets: &[[f32; 2]; 4]) -> Result<Homography> {
    let mut dst = UNIT_SQUARE;
    for (d, o) in dst.iter_mut().zip(offsets) {
        d[0] += o[0] as f64;
        d[1] += o[1] as f64;
    }
    // Consistent turn direction around the quad means it is convex and not folded.
    let mut sign = 0.0;
    for i in 0..4 {
        let [ax, ay] = dst[i];
        let [bx, by] = dst[(i + 1) % 4];
        let [cx, cy] = dst[(i + 2) % 4];
        let cross = (bx - ax) * (cy - by) - (by - ay) * (cx - bx);
        if cross.abs() < 1e-9 || (sign != 0.0 && cross.signum() != sign) {
            return Err(GalaError::DegenerateHomography);
        }
        sign = cross.signum();
    }
    Homography::from_correspondences(&UNIT_SQUARE, &dst)
}

fn warp(image: &ImageTensor, mask: &SegMask, h: &Homography) -> Result<(ImageTensor, SegMask)> {
    let inv = h.inverse()?;
    let (w, ht) = (image.width(), image.height());
    let (wf, hf) = (w as f64, ht as f64);
    let mut out = ImageTensor::filled(w, ht, WHITE);
    let mut out_mask = SegMask::empty(w, ht);
    for y in 0..ht {
        for x in 0..w {
            let u = (x as f64 + 0.5) / wf;
            let v = (y as f64 + 0.5) / hf;
            let Some((su, sv)) = inv.apply(u, v) else { continue };
            let sx = su * wf - 0.5;
            let sy = sv * hf - 0.5;
            if sx < -0.5 || sy < -0.5 || sx > wf - 0.5 || sy > hf - 0.5 {
                continue;
            }
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
            let mut rgb = [0f32; 3];
            let mut coverage = 0f32;
            for (dx, dy, wgt) in [
                (0, 0, (1.0 - fx) * (1.0 - fy)),
                (1, 0, fx * (1.0 - fy)),
                (0, 1, (1.0 - fx) * fy),
                (1, 1, fx * fy),
            ] {
                let px = (x0 as i64 + dx).clamp(0, w as i64 - 1) as u32;
                let py = (y0 as i64 + dy).clamp(0, ht as i64 - 1) as u32;
                let p = image.pixel(px, py);
                for c in 0..3 {
                    rgb[c] += wgt * p[c];
                }
                if mask.get(px, py) {
                    coverage += wgt;
                }
            }
            if coverage >= 0.5 {
                out_mask.set(x, y, true);
                out.set_pixel(x, y, rgb);
            }
        }
    }
    Ok((out, out_mask))
}

/// Warps a whole image by a unit-square homography, white outside the source.
pub fn warp_image(image: &ImageTensor, h: &Homography) -> Result<ImageTensor> {
    let full = SegMask::from_fn(image.width(), image.height(), |_, _| true);
    Ok(warp(image, &full, h)?.0)
}

/// Homography warp (white fill outside the source), then optional flip.
/// Pixels that fall outside the warped mask are whitened so the output keeps
/// the foreground padding invariant.
pub fn geometry_transform(fg: &ForegroundInstance, params: &GeometryParams) -> Result<ForegroundInstance> {
    let identity = params.corner_offsets.iter().flatten().all(|v| *v == 0.0);
    let (mut image, mut mask) = if identity {
        (fg.image.clone(), fg.mask.clone())
    } else {
        let h = corner_homography(&params.corner_offsets)?;
        warp(&fg.image, &fg.mask, &h)?
    };
    if mask.is_empty() {
        return Err(GalaError::DegenerateHomography);
    }
    if params.flip {
        image = image.flip_horizontal();
        mask = mask.flip_horizontal();
    }
    Ok(ForegroundInstance {
        image,
        mask,
        ..fg.clone()
    })
}

// ---------------------------------------------------------------------------
// Lighting

/// Normalized 1-D Gaussian kernel with sigma = radius / 3, truncated at 3 sigma.
pub fn gaussian_kernel(radius: f32) -> Vec<f32> {
    if radius <= 0.0 {
        return vec![1.0];
    }
    let sigma = radius as f64 / 3.0;
    let half = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|v| (v / sum) as f32).collect()
}

/// Separable Gaussian blur of a single-channel plane, replicating edges.
pub fn gaussian_blur(plane: &[f32], width: usize, height: usize, radius: f32) -> Vec<f32> {
    let kernel = gaussian_kernel(radius);
    let half = (kernel.len() / 2) as i64;
    let pass = |src: &[f32], horizontal: bool| {
        let mut dst = vec![0f32; src.len()];
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0f32;
                for (k, w) in kernel.iter().enumerate() {
                    let d = k as i64 - half;
                    let (sx, sy) = if horizontal {
                        ((x as i64 + d).clamp(0, width as i64 - 1) as usize, y)
                    } else {
                        (x, (y as i64 + d).clamp(0, height as i64 - 1) as usize)
                    };
                    acc += w * src[sy * width + sx];
                }
                dst[y * width + x] = acc;
            }
        }
        dst
    };
    pass(&pass(plane, true), false)
}

/// Donor images for lighting maps, with their blurred luminance cached per radius.
#[derive(Debug, Default)]
pub struct DonorPool {
    donors: Vec<(String, Arc<ImageTensor>)>,
    blurred: Mutex<HashMap<(usize, u32), Arc<Vec<f32>>>>,
}

impl DonorPool {
    pub fn new(donors: Vec<(String, ImageTensor)>) -> Self {
        Self {
            donors: donors.into_iter().map(|(id, img)| (id, Arc::new(img))).collect(),
            blurred: Mutex::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.donors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.donors.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.donors[i].0
    }

    pub fn find(&self, id: &str) -> Option<usize> {
        self.donors.iter().position(|(d, _)| d == id)
    }

    pub fn image(&self, i: usize) -> &ImageTensor {
        &self.donors[i].1
    }

    fn blurred_luminance(&self, i: usize, radius: f32) -> Arc<Vec<f32>> {
        let key = (i, radius.to_bits());
        if let Some(v) = self.blurred.lock().unwrap().get(&key) {
            return v.clone();
        }
        let img = self.image(i);
        let v = Arc::new(gaussian_blur(
            &img.luminance(),
            img.width() as usize,
            img.height() as usize,
            radius,
        ));
        self.blurred.lock().unwrap().insert(key, v.clone());
        v
    }
}

fn resize_plane(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    if sw == dw && sh == dh {
        return src.to_vec();
    }
    let (fx, fy) = (sw as f32 / dw as f32, sh as f32 / dh as f32);
    let mut out = Vec::with_capacity(dw * dh);
    for y in 0..dh {
        let cy = ((y as f32 + 0.5) * fy - 0.5).clamp(0.0, (sh - 1) as f32);
        let (y0, ty) = (cy.floor() as usize, cy - cy.floor());
        let y1 = (y0 + 1).min(sh - 1);
        for x in 0..dw {
            let cx = ((x as f32 + 0.5) * fx - 0.5).clamp(0.0, (sw - 1) as f32);
            let (x0, tx) = (cx.floor() as usize, cx - cx.floor());
            let x1 = (x0 + 1).min(sw - 1);
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bot = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// The multiplicative illumination map (before masking and clipping), one
/// value per foreground pixel in `[1, peak_gain]`. A flat donor yields all
/// ones.
pub fn lighting_map_from_blurred(blurred: &[f32], donor_w: usize, donor_h: usize, width: u32, height: u32, peak_gain: f32) -> Vec<f32> {
    let resized = resize_plane(blurred, donor_w, donor_h, width as usize, height as usize);
    let (lo, hi) = resized
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if !(hi > lo) {
        return vec![1.0; resized.len()];
    }
    let ln_gain = (peak_gain as f64).ln();
    resized
        .iter()
        .map(|v| {
            let m = ((v - lo) / (hi - lo)).clamp(0.0, 1.0) as f64;
            (m * ln_gain).exp() as f32
        })
        .collect()
}

pub fn lighting_map(donor: &ImageTensor, width: u32, height: u32, params: &LightingParams) -> Vec<f32> {
    let blurred = gaussian_blur(
        &donor.luminance(),
        donor.width() as usize,
        donor.height() as usize,
        params.blur_radius,
    );
    lighting_map_from_blurred(&blurred, donor.width() as usize, donor.height() as usize, width, height, params.peak_gain)
}

fn apply_lighting(fg: &ForegroundInstance, map: &[f32]) -> ForegroundInstance {
    let mut image = fg.image.clone();
    let w = image.width();
    for y in 0..image.height() {
        for x in 0..w {
            if fg.mask.get(x, y) {
                let g = map[(y * w + x) as usize];
                let p = image.pixel(x, y);
                image.set_pixel(x, y, p.map(|v| (v * g).min(1.0)));
            }
        }
    }
    ForegroundInstance {
        image,
        ..fg.clone()
    }
}

pub fn lighting_transform(fg: &ForegroundInstance, donor: &ImageTensor, params: &LightingParams) -> ForegroundInstance {
    let map = lighting_map(donor, fg.image.width(), fg.image.height(), params);
    apply_lighting(fg, &map)
}

fn lighting_from_pool(fg: &ForegroundInstance, pool: &DonorPool, donor: usize, params: &LightingParams) -> ForegroundInstance {
    let img = pool.image(donor);
    let blurred = pool.blurred_luminance(donor, params.blur_radius);
    let map = lighting_map_from_blurred(
        &blurred,
        img.width() as usize,
        img.height() as usize,
        fg.image.width(),
        fg.image.height(),
        params.peak_gain,
    );
    apply_lighting(fg, &map)
}

// ---------------------------------------------------------------------------
// Sampling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformConfig {
    pub max_corner_offset: f32,
    pub flip_probability: f64,
    pub blur_radius: f32,
    pub peak_gain: f32,
    /// Apply geometry then lighting to every sample instead of picking one.
    pub compose: bool,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            max_corner_offset: 0.25,
            flip_probability: 0.5,
            blur_radius: 100.0,
            peak_gain: 5.0,
            compose: false,
        }
    }
}

pub fn sample_geometry(rng: &mut impl Rng, cfg: &TransformConfig) -> GeometryParams {
    let rho = cfg.max_corner_offset;
    let mut corner_offsets = [[0f32; 2]; 4];
    for o in corner_offsets.iter_mut().flatten() {
        *o = if rho > 0.0 { rng.random_range(-rho..=rho) } else { 0.0 };
    }
    GeometryParams {
        corner_offsets,
        flip: rng.random_bool(cfg.flip_probability),
    }
}

fn sample_lighting(rng: &mut impl Rng, pool: &DonorPool, cfg: &TransformConfig) -> (usize, LightingParams) {
    let donor = rng.random_range(0..pool.len());
    (
        donor,
        LightingParams {
            source_image_id: pool.id(donor).to_string(),
            blur_radius: cfg.blur_radius,
            peak_gain: cfg.peak_gain,
        },
    )
}

/// Draws and applies a transform of the given kind (or a uniformly chosen
/// kind when `kind` is `None`). The record's seed replays the draw.
pub fn sample_transform_of(
    fg: &ForegroundInstance,
    pool: &DonorPool,
    kind: Option<TransformKind>,
    rng: &mut impl RngCore,
    cfg: &TransformConfig,
) -> Result<(ForegroundInstance, TransformRecord)> {
    let seed = rng.next_u64();
    let record = draw_record(seed, pool, kind, cfg)?;
    let out = apply_record(fg, pool, &record)?;
    Ok((out, record))
}

pub fn sample_transform(
    fg: &ForegroundInstance,
    pool: &DonorPool,
    rng: &mut impl RngCore,
    cfg: &TransformConfig,
) -> Result<(ForegroundInstance, TransformRecord)> {
    sample_transform_of(fg, pool, None, rng, cfg)
}

/// Parameters drawn from `seed`. Geometry draws that happen to be degenerate
/// are redrawn from the same stream.
pub fn draw_record(seed: u64, pool: &DonorPool, kind: Option<TransformKind>, cfg: &TransformConfig) -> Result<TransformRecord> {
    if pool.is_empty() {
        return Err(GalaError::invalid("donor pool is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = kind.unwrap_or_else(|| {
        if rng.random_bool(0.5) {
            TransformKind::Geometry
        } else {
            TransformKind::Lighting
        }
    });
    let mut geometry = || {
        for _ in 0..16 {
            let g = sample_geometry(&mut rng, cfg);
            if corner_homography(&g.corner_offsets).is_ok() || g.corner_offsets == [[0.0; 2]; 4] {
                return Ok(g);
            }
        }
        Err(GalaError::DegenerateHomography)
    };
    let params = if cfg.compose {
        let g = geometry()?;
        let (_, l) = sample_lighting(&mut rng, pool, cfg);
        TransformParams::Composed(g, l)
    } else {
        match kind {
            TransformKind::Geometry => TransformParams::Geometry(geometry()?),
            TransformKind::Lighting => TransformParams::Lighting(sample_lighting(&mut rng, pool, cfg).1),
        }
    };
    Ok(TransformRecord { params, seed })
}

pub fn apply_record(fg: &ForegroundInstance, pool: &DonorPool, record: &TransformRecord) -> Result<ForegroundInstance> {
    let donor = |l: &LightingParams| {
        pool.find(&l.source_image_id)
            .ok_or_else(|| GalaError::UnknownId(l.source_image_id.clone()))
    };
    match &record.params {
        TransformParams::Geometry(g) => geometry_transform(fg, g),
        TransformParams::Lighting(l) => Ok(lighting_from_pool(fg, pool, donor(l)?, l)),
        TransformParams::Composed(g, l) => {
            let warped = geometry_transform(fg, g)?;
            Ok(lighting_from_pool(&warped, pool, donor(l)?, l))
        }
    }
}

// ---------------------------------------------------------------------------
// Mask augmentation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskAugConfig {
    /// Maximum erosion radius as a fraction of the mask-tight box diagonal.
    pub erode_fraction: f32,
    /// Maximum per-side hole extension as a fraction of the box side.
    pub extend_fraction: f32,
}

impl Default for MaskAugConfig {
    fn default() -> Self {
        Self {
            erode_fraction: 0.03,
            extend_fraction: 0.10,
        }
    }
}

fn disk_offsets(radius: f32) -> Vec<(i64, i64)> {
    let r = radius.floor() as i64;
    let r2 = radius * radius;
    (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| ((dx * dx + dy * dy) as f32) <= r2)
        .collect()
}

/// Binary erosion by a disk; pixels outside the mask bounds count as unset.
pub fn erode(mask: &SegMask, radius: f32) -> SegMask {
    if radius < 1.0 {
        return mask.clone();
    }
    let offsets = disk_offsets(radius);
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    SegMask::from_fn(mask.width(), mask.height(), |x, y| {
        mask.get(x, y)
            && offsets.iter().all(|(dx, dy)| {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                nx >= 0 && ny >= 0 && nx < w && ny < h && mask.get(nx as u32, ny as u32)
            })
    })
}

/// Randomly erodes the foreground mask (whitening what it removes) and grows
/// the background hole by independent per-side margins, clamped to the image.
pub fn augment_masks(
    fg: &ForegroundInstance,
    bg: &BackgroundQuery,
    seed: u64,
    cfg: &MaskAugConfig,
) -> Result<(ForegroundInstance, BackgroundQuery)> {
    let rect = bg.bbox.ok_or(GalaError::PlacementRequired)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let tight = fg.mask.tight_box().ok_or(GalaError::EmptyInstance)?;
    let diag = ((tight.width as f32).powi(2) + (tight.height as f32).powi(2)).sqrt();
    let max_r = cfg.erode_fraction * diag;
    let mut radius = if max_r > 0.0 { rng.random_range(0.0..=max_r) } else { 0.0 };
    let mut retries = 0;
    let eroded = loop {
        let m = erode(&fg.mask, radius);
        if !m.is_empty() {
            break m;
        }
        if retries == 3 {
            return Err(GalaError::ErosionExhausted(retries));
        }
        retries += 1;
        radius /= 2.0;
    };
    let mut fg_image = fg.image.clone();
    for y in 0..fg_image.height() {
        for x in 0..fg_image.width() {
            if fg.mask.get(x, y) && !eroded.get(x, y) {
                fg_image.set_pixel(x, y, WHITE);
            }
        }
    }

    let mut margin = |side: u32| -> u32 {
        let max = cfg.extend_fraction * side as f32;
        if max > 0.0 {
            rng.random_range(0.0..=max).floor() as u32
        } else {
            0
        }
    };
    let (ml, mr, mt, mb) = (
        margin(rect.width),
        margin(rect.width),
        margin(rect.height),
        margin(rect.height),
    );
    let (iw, ih) = (bg.image.width(), bg.image.height());
    let left = rect.left.saturating_sub(ml);
    let top = rect.top.saturating_sub(mt);
    let right = (rect.right() + mr).min(iw);
    let bottom = (rect.bottom() + mb).min(ih);
    let grown = BoundingBox::new(left, top, right - left, bottom - top);
    let mut bg_image = bg.image.clone();
    if grown != rect {
        let fill = bg.fill_color().expect("box present");
        bg_image.fill_rect(&grown, fill);
    }

    Ok((
        ForegroundInstance {
            image: fg_image,
            mask: eroded,
            ..fg.clone()
        },
        BackgroundQuery {
            image: bg_image,
            bbox: Some(grown),
            ..bg.clone()
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::extract_pair;
    use proptest::prelude::*;

    fn checker_fg(side: u32) -> ForegroundInstance {
        let image = ImageTensor::from_fn(side, side, |x, y| {
            if (x / 4 + y / 4) % 2 == 0 { [0.1, 0.2, 0.3] } else { [0.6, 0.5, 0.4] }
        });
        let mask = SegMask::from_fn(side, side, |_, _| true);
        ForegroundInstance::new("c", image, mask, "", "s").unwrap()
    }

    fn blob_fg(side: u32) -> ForegroundInstance {
        let c = side as f32 / 2.0;
        let mask = SegMask::from_fn(side, side, |x, y| {
            ((x as f32 + 0.5 - c).powi(2) + (y as f32 + 0.5 - c).powi(2)).sqrt() < c * 0.8
        });
        let image = ImageTensor::from_fn(side, side, |x, y| {
            if mask.get(x, y) { [x as f32 / side as f32 * 0.5, 0.3, y as f32 / side as f32 * 0.5] } else { WHITE }
        });
        ForegroundInstance::new("b", image, mask, "", "s").unwrap()
    }

    #[test]
    fn identity_geometry_is_exact() {
        let fg = blob_fg(24);
        assert_eq!(geometry_transform(&fg, &GeometryParams::IDENTITY).unwrap(), fg);
    }

    #[test]
    fn double_flip_is_identity() {
        let fg = blob_fg(21);
        let once = geometry_transform(&fg, &GeometryParams::flip_only()).unwrap();
        assert_ne!(once, fg);
        assert_eq!(geometry_transform(&once, &GeometryParams::flip_only()).unwrap(), fg);
    }

    #[test]
    fn inward_corner_leaves_white_wedge() {
        let fg = checker_fg(32);
        let mut params = GeometryParams::IDENTITY;
        params.corner_offsets[0] = [0.25, 0.25];
        let out = geometry_transform(&fg, &params).unwrap();
        assert_eq!(out.image.pixel(0, 0), WHITE);
        assert!(!out.mask.get(0, 0));
        let (a, b) = (out.image.pixel(31, 31), fg.image.pixel(31, 31));
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-5));
    }

    #[test]
    fn small_nonzero_offsets_approximate_identity() {
        let fg = checker_fg(32);
        let mut params = GeometryParams::IDENTITY;
        params.corner_offsets[2] = [1e-6, 0.0];
        let out = geometry_transform(&fg, &params).unwrap();
        let diff: f32 = out.image.data().iter().zip(fg.image.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff < 1e-2, "{diff}");
    }

    #[test]
    fn folded_quad_is_degenerate() {
        let mut params = GeometryParams::IDENTITY;
        params.corner_offsets[0] = [1.5, 1.5];
        assert!(matches!(
            geometry_transform(&blob_fg(16), &params),
            Err(GalaError::DegenerateHomography)
        ));
    }

    #[test]
    fn homography_maps_corners() {
        let offsets = [[0.1, 0.05], [-0.2, 0.1], [0.0, -0.1], [0.05, 0.0]];
        let h = corner_homography(&offsets).unwrap();
        for (c, o) in UNIT_SQUARE.iter().zip(offsets) {
            let (u, v) = h.apply(c[0], c[1]).unwrap();
            assert!((u - (c[0] + o[0] as f64)).abs() < 1e-9);
            assert!((v - (c[1] + o[1] as f64)).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_donor_is_identity_lighting() {
        let fg = blob_fg(20);
        let donor = ImageTensor::filled(50, 40, [0.3, 0.3, 0.3]);
        let p = LightingParams { source_image_id: "d".into(), blur_radius: 100.0, peak_gain: 5.0 };
        assert_eq!(lighting_transform(&fg, &donor, &p), fg);
    }

    #[test]
    fn lighting_map_spans_one_to_peak() {
        let donor = ImageTensor::from_fn(64, 48, |x, y| [x as f32 / 63.0, y as f32 / 47.0, 0.5]);
        let p = LightingParams { source_image_id: "d".into(), blur_radius: 100.0, peak_gain: 5.0 };
        let map = lighting_map(&donor, 30, 30, &p);
        let lo = map.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = map.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!((lo - 1.0).abs() < 1e-6 && (hi - 5.0).abs() < 1e-6, "{lo} {hi}");
    }

    #[test]
    fn lighting_gain_applies_inside_mask_only() {
        // Left half dark, right half bright: gain 1 at the left edge, 5 at the right.
        let fg = blob_fg(20);
        let donor = ImageTensor::from_fn(20, 20, |x, _| [x as f32 / 19.0; 3]);
        let p = LightingParams { source_image_id: "d".into(), blur_radius: 0.0, peak_gain: 5.0 };
        let map = lighting_map(&donor, 20, 20, &p);
        assert!((map[0] - 1.0).abs() < 1e-6);
        assert!((map[19] - 5.0).abs() < 1e-5);
        let out = lighting_transform(&fg, &donor, &p);
        for y in 0..20 {
            for x in 0..20 {
                let (a, b) = (fg.image.pixel(x, y), out.image.pixel(x, y));
                if !fg.mask.get(x, y) {
                    assert_eq!(a, b);
                } else {
                    let g = map[(y * 20 + x) as usize];
                    for c in 0..3 {
                        assert!((b[c] - (a[c] * g).min(1.0)).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn kernel_is_normalized() {
        let k = gaussian_kernel(100.0);
        assert_eq!(k.len(), 201);
        assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        assert_eq!(gaussian_kernel(0.0), vec![1.0]);
    }

    fn pool() -> DonorPool {
        DonorPool::new(vec![
            ("d0".into(), ImageTensor::from_fn(32, 32, |x, _| [x as f32 / 31.0; 3])),
            ("d1".into(), ImageTensor::from_fn(32, 32, |_, y| [y as f32 / 31.0; 3])),
        ])
    }

    #[test]
    fn sampling_is_deterministic_and_replayable() {
        let fg = blob_fg(24);
        let p = pool();
        let cfg = TransformConfig::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..8 {
            let (a, ra) = sample_transform(&fg, &p, &mut r1, &cfg).unwrap();
            let (b, rb) = sample_transform(&fg, &p, &mut r2, &cfg).unwrap();
            assert_eq!(a, b);
            assert_eq!(ra, rb);
            let replayed = TransformRecord::from_json(&ra.to_json().unwrap()).unwrap();
            assert_eq!(apply_record(&fg, &p, &replayed).unwrap(), a);
        }
    }

    #[test]
    fn record_json_shape() {
        let r = TransformRecord { params: TransformParams::Geometry(GeometryParams::flip_only()), seed: 3 };
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(v["kind"], "geometry");
        assert_eq!(v["params"]["flip"], true);
        assert_eq!(v["seed"], 3);
    }

    #[test]
    fn empty_pool_is_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_transform(&blob_fg(8), &DonorPool::default(), &mut rng, &TransformConfig::default()).is_err());
    }

    fn pair() -> (ForegroundInstance, BackgroundQuery) {
        let img = ImageTensor::from_fn(64, 64, |x, y| [x as f32 / 63.0, y as f32 / 63.0, 0.5]);
        let mask = SegMask::from_fn(64, 64, |x, y| {
            ((x as f32 - 20.0).powi(2) + (y as f32 - 30.0).powi(2)).sqrt() < 12.0
        });
        let (bg, fg) = extract_pair(&img, &mask, "s", "s:0", "").unwrap();
        (fg, bg)
    }

    #[test]
    fn zero_augmentation_is_identity() {
        let (fg, bg) = pair();
        let cfg = MaskAugConfig { erode_fraction: 0.0, extend_fraction: 0.0 };
        let (f2, b2) = augment_masks(&fg, &bg, 5, &cfg).unwrap();
        assert_eq!(f2, fg);
        assert_eq!(b2, bg);
    }

    #[test]
    fn edge_box_growth_is_clamped() {
        let img = ImageTensor::from_fn(40, 40, |x, _| [x as f32 / 39.0; 3]);
        let mask = SegMask::from_rect(40, 40, &BoundingBox::new(0, 30, 10, 10));
        let (bg, fg) = extract_pair(&img, &mask, "s", "s:0", "").unwrap();
        let cfg = MaskAugConfig { erode_fraction: 0.0, extend_fraction: 1.0 };
        for seed in 0..20 {
            let (_, b2) = augment_masks(&fg, &bg, seed, &cfg).unwrap();
            let r = b2.bbox.unwrap();
            assert!(r.fits_in(40, 40));
            assert!(r.left == 0 && r.bottom() == 40);
            let fill = bg.fill_color().unwrap();
            assert!((r.top..r.bottom()).all(|y| (r.left..r.right()).all(|x| b2.image.pixel(x, y) == fill)));
        }
    }

    #[test]
    fn over_erosion_retries_then_fails() {
        let img = ImageTensor::filled(20, 20, [0.5; 3]);
        let mask = SegMask::from_rect(20, 20, &BoundingBox::new(5, 5, 3, 3));
        let (bg, fg) = extract_pair(&img, &mask, "s", "s:0", "").unwrap();
        let cfg = MaskAugConfig { erode_fraction: 100.0, extend_fraction: 0.0 };
        let errs = (0..20).filter(|s| augment_masks(&fg, &bg, *s, &cfg).is_err()).count();
        assert!(errs > 0);
    }

    proptest! {
        #[test]
        fn eroded_mask_is_subset(cells in prop::collection::vec(any::<bool>(), 256), r in 0.0f32..4.0) {
            let mask = SegMask::new(16, 16, cells).unwrap();
            prop_assert!(erode(&mask, r).is_subset_of(&mask));
        }

        #[test]
        fn augment_keeps_invariants(seed in any::<u64>()) {
            let (fg, bg) = pair();
            let (f2, b2) = augment_masks(&fg, &bg, seed, &MaskAugConfig::default()).unwrap();
            prop_assert!(f2.mask.is_subset_of(&fg.mask));
            for y in 0..f2.image.height() { for x in 0..f2.image.width() {
                if !f2.mask.get(x, y) { prop_assert_eq!(f2.image.pixel(x, y), WHITE); }
            }}
            let (r0, r1) = (bg.bbox.unwrap(), b2.bbox.unwrap());
            prop_assert!(r1.left <= r0.left && r1.top <= r0.top && r1.right() >= r0.right() && r1.bottom() >= r0.bottom());
            prop_assert_eq!(augment_masks(&fg, &bg, seed, &MaskAugConfig::default()).unwrap().1, b2);
        }

        #[test]
        fn transforms_preserve_dimensions(seed in any::<u64>()) {
            let fg = blob_fg(24);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, _) = sample_transform(&fg, &pool(), &mut rng, &TransformConfig::default()).unwrap();
            prop_assert_eq!((out.image.width(), out.image.height()), (24, 24));
            prop_assert_eq!((out.mask.width(), out.mask.height()), (24, 24));
        }
    }
}
