//! Pixel containers: RGB images in `[0, 1]`, binary masks and integer boxes.
//!
//! Everything is row-major. Images are interleaved RGB. File loaders convert
//! 8-bit data to floats at the boundary so nothing downstream deals with the
//! 0..255 scale.

use std::fmt;
use std::io::Cursor;
use std::path::Path;
use std::str::FromStr;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{GalaError, Result};

pub const WHITE: [f32; 3] = [1.0, 1.0, 1.0];

/// An `H x W x 3` image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GalaError::invalid("image dimensions must be positive"));
        }
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(GalaError::DimensionMismatch {
                expected,
                got: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(GalaError::invalid(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [f32; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let rgb = rgb.map(|v| v.clamp(0.0, 1.0));
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for _ in 0..width as usize * height as usize {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Builds an image from a per-pixel function; values are clamped to `[0, 1]`.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [f32; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                let px = f(x, y);
                data.extend(px.iter().map(|v| {
                    if v.is_finite() {
                        v.clamp(0.0, 1.0)
                    } else {
                        0.0
                    }
                }));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        let o = self.offset(x, y);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [f32; 3]) {
        let o = self.offset(x, y);
        for c in 0..3 {
            self.data[o + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    /// Per-channel mean over every pixel.
    pub fn channel_mean(&self) -> [f32; 3] {
        let mut acc = [0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c] as f64;
            }
        }
        let n = self.area() as f64;
        acc.map(|v| (v / n) as f32)
    }

    /// Rec. 601 luma, one value per pixel.
    pub fn luminance(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
            .collect()
    }

    pub fn fill_rect(&mut self, rect: &BoundingBox, rgb: [f32; 3]) {
        let r = rect.clamp_to(self.width, self.height);
        if let Some(r) = r {
            for y in r.top..r.bottom() {
                for x in r.left..r.right() {
                    self.set_pixel(x, y, rgb);
                }
            }
        }
    }

    pub fn crop(&self, rect: &BoundingBox) -> Result<ImageTensor> {
        if !rect.fits_in(self.width, self.height) {
            return Err(GalaError::invalid(format!(
                "crop {rect} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(rect.area() as usize * 3);
        for y in rect.top..rect.bottom() {
            let start = self.offset(rect.left, y);
            data.extend_from_slice(&self.data[start..start + rect.width as usize * 3]);
        }
        Ok(ImageTensor {
            width: rect.width,
            height: rect.height,
            data,
        })
    }

    pub fn flip_horizontal(&self) -> ImageTensor {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integers), clamping to the border.
    #[inline]
    pub fn sample_bilinear(&self, x: f32, y: f32) -> [f32; 3] {
        let (x0, x1, fx) = bilinear_taps(x, self.width);
        let (y0, y1, fy) = bilinear_taps(y, self.height);
        let a = self.pixel(x0, y0);
        let b = self.pixel(x1, y0);
        let c = self.pixel(x0, y1);
        let d = self.pixel(x1, y1);
        let mut out = [0.0; 3];
        for ch in 0..3 {
            let top = a[ch] + (b[ch] - a[ch]) * fx;
            let bottom = c[ch] + (d[ch] - c[ch]) * fx;
            out[ch] = top + (bottom - top) * fy;
        }
        out
    }

    /// Bilinear resize with half-pixel centers. Same-size resizes are exact.
    pub fn resize(&self, width: u32, height: u32) -> ImageTensor {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        ImageTensor::from_fn(width, height, |x, y| {
            self.sample_bilinear((x as f32 + 0.5) * sx - 0.5, (y as f32 + 0.5) * sy - 0.5)
        })
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width, self.height, |x, y| {
            Rgb(self.pixel(x, y).map(to_u8))
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> ImageTensor {
        ImageTensor::from_fn(img.width(), img.height(), |x, y| {
            img.get_pixel(x, y).0.map(|v| v as f32 / 255.0)
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<ImageTensor> {
        let img = image::load_from_memory(bytes)?;
        if img.width() == 0 || img.height() == 0 {
            return Err(GalaError::invalid("decoded image is empty"));
        }
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ImageTensor> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| GalaError::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Writes PNG or JPEG depending on the extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save(path.as_ref())?;
        Ok(())
    }

    /// Copies every pixel of `src` where `mask` is set into `self` at `(left, top)`.
    pub fn paste_masked(&mut self, src: &ImageTensor, mask: &SegMask, left: u32, top: u32) {
        for y in 0..src.height {
            for x in 0..src.width {
                let (tx, ty) = (left + x, top + y);
                if tx < self.width && ty < self.height && mask.get(x, y) {
                    self.set_pixel(tx, ty, src.pixel(x, y));
                }
            }
        }
    }
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
fn bilinear_taps(c: f32, size: u32) -> (u32, u32, f32) {
    let max = (size - 1) as f32;
    let c = c.clamp(0.0, max);
    let c0 = c.floor();
    let i0 = c0 as u32;
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, c - c0)
}

/// Binary segmentation mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl SegMask {
    pub fn new(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GalaError::invalid("mask dimensions must be positive"));
        }
        let expected = width as usize * height as usize;
        if data.len() != expected {
            return Err(GalaError::DimensionMismatch {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be positive");
        Self {
            width,
            height,
            data: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut m = Self::empty(width, height);
        for y in 0..height {
            for x in 0..width {
                m.set(x, y, f(x, y));
            }
        }
        m
    }

    pub fn from_rect(width: u32, height: u32, rect: &BoundingBox) -> Self {
        Self::from_fn(width, height, |x, y| rect.contains(x, y))
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let w = self.width as usize;
        self.data[y as usize * w + x as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|v| *v)
    }

    /// Smallest box containing every set pixel.
    pub fn tight_box(&self) -> Option<BoundingBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        any.then(|| BoundingBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }

    pub fn crop(&self, rect: &BoundingBox) -> Result<SegMask> {
        if !rect.fits_in(self.width, self.height) {
            return Err(GalaError::invalid(format!(
                "crop {rect} outside {}x{} mask",
                self.width, self.height
            )));
        }
        Ok(SegMask::from_fn(rect.width, rect.height, |x, y| {
            self.get(rect.left + x, rect.top + y)
        }))
    }

    pub fn flip_horizontal(&self) -> SegMask {
        SegMask::from_fn(self.width, self.height, |x, y| {
            self.get(self.width - 1 - x, y)
        })
    }

    /// Every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &SegMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.data.iter().zip(&other.data).all(|(a, b)| !*a || *b)
    }

    /// Nearest-neighbour resize (half-pixel centers).
    pub fn resize(&self, width: u32, height: u32) -> SegMask {
        if width == self.width && height == self.height {
            return self.clone();
        }
        SegMask::from_fn(width, height, |x, y| {
            let sx = (((x as f32 + 0.5) * self.width as f32 / width as f32) as u32)
                .min(self.width - 1);
            let sy = (((y as f32 + 0.5) * self.height as f32 / height as f32) as u32)
                .min(self.height - 1);
            self.get(sx, sy)
        })
    }

    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    /// Any non-zero luma counts as foreground.
    pub fn decode(bytes: &[u8]) -> Result<SegMask> {
        let img = image::load_from_memory(bytes)?.to_luma8();
        if img.width() == 0 || img.height() == 0 {
            return Err(GalaError::invalid("decoded mask is empty"));
        }
        Ok(SegMask::from_fn(img.width(), img.height(), |x, y| {
            img.get_pixel(x, y).0[0] >= 128
        }))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SegMask> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| GalaError::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_gray8().save(path.as_ref())?;
        Ok(())
    }

    /// Rasterizes a polygon with the even-odd rule, sampling pixel centers.
    pub fn from_polygon(width: u32, height: u32, points: &[[f32; 2]]) -> SegMask {
        let mut mask = SegMask::empty(width, height);
        if points.len() < 3 {
            return mask;
        }
        let mut crossings = Vec::new();
        for y in 0..height {
            let py = y as f32 + 0.5;
            crossings.clear();
            for i in 0..points.len() {
                let [x0, y0] = points[i];
                let [x1, y1] = points[(i + 1) % points.len()];
                if (y0 <= py) != (y1 <= py) {
                    crossings.push(x0 + (py - y0) / (y1 - y0) * (x1 - x0));
                }
            }
            crossings.sort_by(|a, b| a.total_cmp(b));
            for span in crossings.chunks_exact(2) {
                let start = (span[0] - 0.5).ceil().max(0.0) as u32;
                let end = (span[1] - 0.5).ceil().min(width as f32).max(0.0) as u32;
                for x in start..end.min(width) {
                    mask.set(x, y, true);
                }
            }
        }
        mask
    }
}

/// Axis-aligned integer box `(left, top, width, height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "[u32; 4]", try_from = "[u32; 4]")]
pub struct BoundingBox {
    pub left: u32,
    pub top: u32,
    pub width: u32,
    pub height: u32,
}

impl BoundingBox {
    pub const fn new(left: u32, top: u32, width: u32, height: u32) -> Self {
        Self {
            left,
            top,
            width,
            height,
        }
    }

    pub fn right(&self) -> u32 {
        self.left + self.width
    }

    pub fn bottom(&self) -> u32 {
        self.top + self.height
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    pub fn center(&self) -> (f32, f32) {
        (
            self.left as f32 + self.width as f32 / 2.0,
            self.top as f32 + self.height as f32 / 2.0,
        )
    }

    pub fn aspect_ratio(&self) -> f32 {
        self.width as f32 / self.height as f32
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.left && x < self.right() && y >= self.top && y < self.bottom()
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.width > 0 && self.height > 0 && self.right() <= width && self.bottom() <= height
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> u64 {
        let w = self.right().min(other.right()).saturating_sub(self.left.max(other.left));
        let h = self
            .bottom()
            .min(other.bottom())
            .saturating_sub(self.top.max(other.top));
        w as u64 * h as u64
    }

    /// Intersects with the image rectangle; `None` if nothing is left.
    pub fn clamp_to(&self, width: u32, height: u32) -> Option<BoundingBox> {
        let right = self.right().min(width);
        let bottom = self.bottom().min(height);
        (right > self.left && bottom > self.top)
            .then(|| BoundingBox::new(self.left, self.top, right - self.left, bottom - self.top))
    }

    /// A `width x height` box centered at `(cx, cy)`, shrunk to the image if
    /// larger and shifted so it lies fully inside.
    pub fn centered_within(cx: f32, cy: f32, width: u32, height: u32, img_w: u32, img_h: u32) -> Option<BoundingBox> {
        if width == 0 || height == 0 || img_w == 0 || img_h == 0 {
            return None;
        }
        let w = width.min(img_w);
        let h = height.min(img_h);
        let left = (cx - w as f32 / 2.0).round().clamp(0.0, (img_w - w) as f32) as u32;
        let top = (cy - h as f32 / 2.0).round().clamp(0.0, (img_h - h) as f32) as u32;
        Some(BoundingBox::new(left, top, w, h))
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.left, self.top, self.width, self.height)
    }
}

impl From<BoundingBox> for [u32; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.left, b.top, b.width, b.height]
    }
}

impl TryFrom<[u32; 4]> for BoundingBox {
    type Error = GalaError;

    fn try_from([left, top, width, height]: [u32; 4]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GalaError::format("box", "width and height must be positive"));
        }
        left.checked_add(width)
            .zip(top.checked_add(height))
            .ok_or_else(|| GalaError::format("box", "coordinates overflow"))?;
        Ok(BoundingBox::new(left, top, width, height))
    }
}

/// Parses `l,t,w,h`.
impl FromStr for BoundingBox {
    type Err = GalaError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(GalaError::format("box", "expected four comma-separated integers"));
        }
        let mut v = [0u32; 4];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .parse()
                .map_err(|_| GalaError::format("box", format!("`{p}` is not a non-negative integer")))?;
        }
        BoundingBox::try_from(v)
    }
}
