//! Procedural scenes with a known light direction and vanishing point.
//!
//! Each scene is a floor/sky backdrop lit by a linear ramp, a few floor lines
//! converging on a vanishing point and one or two shaded shapes standing on
//! the floor. Shapes are shaded along the scene's light direction, lean away
//! from the vanishing point, shrink toward the horizon and cast a shadow, so
//! a flipped or warped cutout no longer agrees with the scene around its hole.
//! Object hues follow the floor hue and a colored light tints everything,
//! which gives retrieval a scene-level appearance cue to learn.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{extract_pair, box_area_fraction, write_corpus, CorpusInstance, CorpusRecord, MaskSource, PairRecord, Split};
use crate::error::{GalaError, Result};
use crate::image::{ImageTensor, SegMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Quad,
    Ellipse,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Quad, Shape::Ellipse, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Quad => "quad",
            Shape::Ellipse => "ellipse",
            Shape::Triangle => "triangle",
        }
    }

    /// Membership in the unit shape, `u, v` in `[-1, 1]`, `v` pointing down.
    fn contains(self, u: f32, v: f32) -> bool {
        match self {
            Shape::Quad => u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::Ellipse => u * u + v * v <= 1.0,
            Shape::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) * 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: [f32; 3],
    pub center: [f32; 2],
    pub half_size: [f32; 2],
    /// Horizontal offset per pixel of height above the object's center.
    pub shear: f32,
}

impl ObjectSpec {
    fn covers(&self, x: f32, y: f32) -> bool {
        let dy = y - self.center[1];
        let u = (x - self.center[0] + self.shear * dy) / self.half_size[0];
        let v = dy / self.half_size[1];
        self.shape.contains(u, v)
    }

    fn base_y(&self) -> f32 {
        self.center[1] + self.half_size[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    /// Unit vector pointing toward the light, image coordinates.
    pub light: [f32; 2],
    /// Light color, multiplied into every pixel.
    pub tint: [f32; 3],
    pub horizon: f32,
    pub vanishing_x: f32,
    pub sky: [f32; 3],
    pub floor: [f32; 3],
    pub objects: Vec<ObjectSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub size: u32,
    pub max_objects: usize,
    /// Allowed mask-tight box area as a fraction of the image.
    pub area_range: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            max_objects: 2,
            area_range: (0.06, 0.40),
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> [f32; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6 as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

impl SceneSpec {
    pub fn sample(seed: u64, cfg: &SynthConfig) -> Result<SceneSpec> {
        if cfg.size < 32 || cfg.max_objects == 0 {
            return Err(GalaError::invalid("synthetic scenes need size >= 32 and at least one object"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.size as f32;
        let side = if rng.random_bool(0.5) { 1.0f32 } else { -1.0 };
        let elevation: f32 = rng.random_range(-0.7..0.5);
        let light = [side * elevation.cos(), elevation.sin()];
        let tint = random_color(&mut rng, 0.7, 1.0);
        let horizon = rng.random_range(0.25..0.45) * s;
        let vanishing_x = rng.random_range(0.15..0.85) * s;
        // Objects take the scene's hue, so appearance depends on the scene.
        let hue: f32 = rng.random();
        let sky = random_color(&mut rng, 0.55, 0.85);
        let floor = hsv(hue, rng.random_range(0.25..0.45), rng.random_range(0.4..0.6));

        let wanted = rng.random_range(1..=cfg.max_objects);
        let mut objects: Vec<ObjectSpec> = Vec::new();
        let img_area = (cfg.size * cfg.size) as f64;
        for _ in 0..60 {
            if objects.len() == wanted {
                break;
            }
            let base = rng.random_range(horizon + 0.2 * (s - horizon)..s - 2.0);
            let depth = (base - horizon) / (s - horizon);
            let scale = 0.45 + 0.55 * depth;
            let hw = rng.random_range(0.12..0.26) * s * scale;
            let hh = rng.random_range(0.14..0.30) * s * scale;
            let cy = base - hh;
            if cy - hh < 1.0 {
                continue;
            }
            let shear_span = 0.5 * (2.0 * hh);
            let margin = hw + 0.5 * shear_span + 1.0;
            if margin * 2.0 >= s {
                continue;
            }
            let cx = rng.random_range(margin..s - margin);
            let shear = 0.5 * (cx - vanishing_x) / s;
            let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
            let obj = ObjectSpec {
                shape,
                color: hsv(
                    hue + rng.random_range(-0.06..0.06),
                    rng.random_range(0.6..0.9),
                    rng.random_range(0.75..0.95),
                ),
                center: [cx, cy],
                half_size: [hw, hh],
                shear,
            };
            let mask = object_mask(&obj, cfg.size, cfg.size);
            let area = mask.tight_box().map(|b| b.area() as f64 / img_area).unwrap_or(0.0);
            if area < cfg.area_range.0 || area > cfg.area_range.1 {
                continue;
            }
            let overlaps = objects.iter().any(|o| {
                let m = object_mask(o, cfg.size, cfg.size);
                match (m.tight_box(), mask.tight_box()) {
                    (Some(a), Some(b)) => a.intersection_area(&b) > 0,
                    _ => false,
                }
            });
            if !overlaps {
                objects.push(obj);
            }
        }
        if objects.is_empty() {
            return Err(GalaError::invalid(format!("scene {seed}: no object fits the area range")));
        }
        // Paint far objects first.
        objects.sort_by(|a, b| a.base_y().total_cmp(&b.base_y()));
        Ok(SceneSpec {
            width: cfg.size,
            height: cfg.size,
            light,
            tint,
            horizon,
            vanishing_x,
            sky,
            floor,
            objects,
        })
    }

    fn ramp(&self, x: f32, y: f32) -> f32 {
        let s = self.width.max(self.height) as f32;
        let dx = (x - 0.5 * self.width as f32) / s;
        let dy = (y - 0.5 * self.height as f32) / s;
        1.0 + 0.6 * (dx * self.light[0] + dy * self.light[1])
    }

    fn on_floor_line(&self, x: f32, y: f32) -> bool {
        if y <= self.horizon + 1.0 {
            return false;
        }
        let w = self.width as f32;
        let t = (y - self.horizon) / (self.height as f32 - self.horizon);
        (0..7).any(|i| {
            let foot = -0.5 * w + i as f32 * w / 3.0;
            let lx = self.vanishing_x + t * (foot - self.vanishing_x);
            (x - lx).abs() < 0.5
        })
    }

    fn in_shadow(&self, x: f32, y: f32) -> bool {
        self.objects.iter().any(|o| {
            let len = 1.3 * o.half_size[0];
            let cx = o.center[0] - self.light[0] * len;
            let cy = o.base_y() - 0.5;
            let rx = 1.4 * o.half_size[0];
            let ry = 0.18 * o.half_size[1] + 1.0;
            let u = (x - cx) / rx;
            let v = (y - cy) / ry;
            u * u + v * v <= 1.0
        })
    }

    fn backdrop(&self, x: f32, y: f32) -> [f32; 3] {
        let mut c = if y < self.horizon {
            let t = y / self.horizon.max(1.0);
            self.sky.map(|v| v * (1.05 - 0.15 * t))
        } else {
            self.floor
        };
        if self.on_floor_line(x, y) {
            c = c.map(|v| v * 0.75);
        }
        if y >= self.horizon && self.in_shadow(x, y) {
            c = c.map(|v| v * 0.55);
        }
        let g = self.ramp(x, y);
        self.lit(c, g)
    }

    fn object_color(&self, o: &ObjectSpec, x: f32, y: f32) -> [f32; 3] {
        let r = o.half_size[0].hypot(o.half_size[1]).max(1.0);
        let t = ((x - o.center[0]) * self.light[0] + (y - o.center[1]) * self.light[1]) / r;
        let g = 0.7 + 0.45 * t.clamp(-1.0, 1.0);
        self.lit(o.color, g * self.ramp(o.center[0], o.center[1]))
    }

    fn lit(&self, c: [f32; 3], gain: f32) -> [f32; 3] {
        std::array::from_fn(|i| (c[i] * gain * self.tint[i]).clamp(0.0, 1.0))
    }

    /// Renders the scene and the pixel-exact visible mask of every object.
    pub fn render(&self) -> (ImageTensor, Vec<SegMask>) {
        let (w, h) = (self.width, self.height);
        let mut owner = vec![usize::MAX; (w * h) as usize];
        for (k, o) in self.objects.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if o.covers(x as f32 + 0.5, y as f32 + 0.5) {
                        owner[(y * w + x) as usize] = k;
                    }
                }
            }
        }
        let image = ImageTensor::from_fn(w, h, |x, y| {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            match owner[(y * w + x) as usize] {
                usize::MAX => self.backdrop(px, py),
                k => self.object_color(&self.objects[k], px, py),
            }
        });
        let masks = (0..self.objects.len())
            .map(|k| SegMask::from_fn(w, h, |x, y| owner[(y * w + x) as usize] == k))
            .collect();
        (image, masks)
    }
}

fn object_mask(o: &ObjectSpec, w: u32, h: u32) -> SegMask {
    SegMask::from_fn(w, h, |x, y| o.covers(x as f32 + 0.5, y as f32 + 0.5))
}

/// A rendered scene with one `(mask, category)` per visible object.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub image: ImageTensor,
    pub instances: Vec<(SegMask, String)>,
}

pub fn generate_scene(seed: u64, cfg: &SynthConfig) -> Result<Scene> {
    let spec = SceneSpec::sample(seed, cfg)?;
    let (image, masks) = spec.render();
    let instances = masks
        .into_iter()
        .zip(&spec.objects)
        .filter(|(m, _)| !m.is_empty())
        .map(|(m, o)| (m, o.shape.name().to_string()))
        .collect();
    Ok(Scene { spec, image, instances })
}

fn scene_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64)
}

pub fn scene_id(i: usize) -> String {
    format!("scene{i:05}")
}

/// Writes `n` scenes as a corpus directory: `annotations.jsonl`, `images/`
/// and `masks/`.
pub fn write_synthetic_corpus(dir: &Path, n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<CorpusRecord>> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| GalaError::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let scene = generate_scene(scene_seed(seed, i), cfg)?;
        let id = scene_id(i);
        let image_path = format!("images/{id}.png");
        scene.image.save(dir.join(&image_path))?;
        let mut instances = Vec::new();
        for (k, (mask, category)) in scene.instances.iter().enumerate() {
            let mask_path = format!("masks/{id}_{k}.png");
            mask.save(dir.join(&mask_path))?;
            instances.push(CorpusInstance {
                mask: MaskSource::Path { mask_path },
                category: category.clone(),
                confidence: 1.0,
            });
        }
        records.push(CorpusRecord {
            image_id: id,
            image_path,
            width: scene.image.width(),
            height: scene.image.height(),
            instances,
        });
    }
    write_corpus(dir, &records)?;
    Ok(records)
}

/// Builds train/eval pairs in memory, splitting `round(train_fraction * n)`
/// random pairs into train. Pair ids match what `ingest` would produce for
/// the same corpus.
pub fn synthetic_pairs(n_scenes: usize, seed: u64, train_fraction: f64, cfg: &SynthConfig) -> Result<Vec<PairRecord>> {
    use rand::seq::SliceRandom;
    let mut scenes = Vec::with_capacity(n_scenes);
    let mut slots = Vec::new();
    for i in 0..n_scenes {
        let scene = generate_scene(scene_seed(seed, i), cfg)?;
        for (k, (mask, _)) in scene.instances.iter().enumerate() {
            if (0.05..=0.50).contains(&box_area_fraction(mask)) {
                slots.push((i, k));
            }
        }
        scenes.push(scene);
    }
    let n = slots.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let mut split = vec![Split::Eval; n];
    for &j in &order[..n_train] {
        split[j] = Split::Train;
    }
    slots
        .iter()
        .zip(split)
        .map(|(&(i, k), split)| {
            let scene = &scenes[i];
            let (mask, category) = &scene.instances[k];
            let id = scene_id(i);
            let pair_id = format!("{id}:{k}");
            let (background, foreground) = extract_pair(&scene.image, mask, &id, &pair_id, category)?;
            Ok(PairRecord {
                pair_id,
                background,
                foreground,
                split,
            })
        })
        .collect()
}
