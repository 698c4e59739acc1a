//! The two search units: foreground cutouts and background queries.

use crate::error::{GalaError, Result};
use crate::image::{BoundingBox, ImageTensor, SegMask, WHITE};

/// An object cutout on a white square canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundInstance {
    pub id: String,
    pub image: ImageTensor,
    pub mask: SegMask,
    pub category: String,
    pub source_image_id: String,
}

impl ForegroundInstance {
    /// Checks squareness, mask pairing and white padding.
    pub fn new(
        id: impl Into<String>,
        image: ImageTensor,
        mask: SegMask,
        category: impl Into<String>,
        source_image_id: impl Into<String>,
    ) -> Result<Self> {
        if !image.is_square() {
            return Err(GalaError::invalid("foreground image must be square"));
        }
        if mask.width() != image.width() || mask.height() != image.height() {
            return Err(GalaError::invalid("foreground mask size differs from image"));
        }
        if mask.is_empty() {
            return Err(GalaError::EmptyInstance);
        }
        for y in 0..image.height() {
            for x in 0..image.width() {
                if !mask.get(x, y) && image.pixel(x, y) != WHITE {
                    return Err(GalaError::invalid(format!(
                        "foreground pixel ({x},{y}) outside the mask is not white"
                    )));
                }
            }
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
            category: category.into(),
            source_image_id: source_image_id.into(),
        })
    }

    /// Aspect ratio (w/h) of the mask-tight box.
    pub fn aspect_ratio(&self) -> f32 {
        self.mask
            .tight_box()
            .map(|b| b.aspect_ratio())
            .unwrap_or(1.0)
    }
}

/// A background image with an optional mean-filled hole.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundQuery {
    pub id: String,
    pub image: ImageTensor,
    pub bbox: Option<BoundingBox>,
    pub source_image_id: String,
}

impl BackgroundQuery {
    pub fn new(
        id: impl Into<String>,
        image: ImageTensor,
        bbox: Option<BoundingBox>,
        source_image_id: impl Into<String>,
    ) -> Result<Self> {
        if let Some(b) = &bbox {
            if !b.fits_in(image.width(), image.height()) {
                return Err(GalaError::invalid(format!(
                    "box {b} outside {}x{} image",
                    image.width(),
                    image.height()
                )));
            }
        }
        Ok(Self {
            id: id.into(),
            image,
            bbox,
            source_image_id: source_image_id.into(),
        })
    }

    /// Color inside the hole (uniform by construction); `None` without a box.
    pub fn fill_color(&self) -> Option<[f32; 3]> {
        self.bbox.map(|b| self.image.pixel(b.left, b.top))
    }
}

/// Replaces `rect` of `image` with the whole image's per-channel mean.
pub fn mask_rectangle(image: &ImageTensor, rect: &BoundingBox) -> ImageTensor {
    let mut out = image.clone();
    out.fill_rect(rect, image.channel_mean());
    out
}
