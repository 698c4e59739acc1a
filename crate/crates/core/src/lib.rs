//! Geometry- and lighting-aware foreground object search.
//!
//! Two encoders map masked backgrounds and foreground cutouts into a shared
//! embedding space; retrieval ranks a gallery by cosine similarity and a
//! sliding-window search handles queries without a box.

pub mod api;
pub mod dataset;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod instance;
pub mod placement;
pub mod retrieval;
pub mod synthetic;
pub mod training;
pub mod transforms;

pub use embedding::{cosine_similarity, l2_normalize, sensitivity_distance, Embedding};
pub use encoder::{EncoderConfig, ImageEncoder, TowerRole, TowerWeights};
pub use error::{GalaError, Result};
pub use image::{BoundingBox, ImageTensor, SegMask};
pub use instance::{BackgroundQuery, ForegroundInstance};
