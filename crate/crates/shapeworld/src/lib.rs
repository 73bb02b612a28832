//! Shape-world: small scenes of coloured, textured geometric shapes with
//! exact visible masks, the four location formats derived from them, a
//! deterministic detector that reads the attributes back from pixels, and
//! checksummed dataset shards.

pub mod derive;
pub mod image;
pub mod oracle;
pub mod palette;
pub mod scene;
pub mod shard;

pub use derive::{derive_location_formats, layout_spec, scene_layout};
pub use image::RgbImage;
pub use oracle::{ground_truth, mask_iou, match_detections, oracle_detect, Detection, MatchSummary};
pub use palette::{Category, Color, Texture};
pub use scene::{generate_scene, rasterize, scene_for_index, Rendered, Scene, SceneConfig, ShapeInstance};
pub use shard::{build_shard, read_shard, write_shard, DatasetShard, ShardHeader, ShardRecord};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("generation failed: {0}")]
    Generation(String),

    #[error("shard checksum mismatch")]
    Checksum,

    #[error("shard config hash {found} does not match expected {expected}")]
    ConfigMismatch { expected: String, found: String },

    #[error("shard format: {0}")]
    Format(String),

    #[error("png: {0}")]
    Png(String),

    #[error(transparent)]
    Core(#[from] instdiff_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
