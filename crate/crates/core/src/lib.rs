//! Compression of voxel radiance fields: importance-based pruning,
//! importance-weighted vector quantization with joint finetuning, and an
//! entropy-coded container.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`). The aliases at the
//! crate root pin the production precision.

pub mod container;
pub mod error;
pub mod field;
pub mod finetune;
pub mod image;
pub mod importance;
pub mod optim;
pub mod pipeline;
pub mod render;
pub mod scalar;
pub mod scene;
pub mod sh;
pub mod vq;

pub use container::{decode_container, encode_container, pack_bits, quantize_u8, unpack_bits};
pub use error::{Error, Result};
pub use field::{
    expand_vq_model, feature_dim, voxel_center, ClassCounts, Codebook, DenseGrid, GridDims,
    ImportanceField, VQModel, VoxelClass, VoxelClassMask,
};
pub use finetune::{joint_finetune, scatter_code_gradients, FinetuneConfig};
pub use image::{psnr, Image};
pub use importance::{
    classify_voxels, compute_importance, cumulative_score_rate, quantile_threshold,
    ImportanceConfig, RaySelection, Thresholds,
};
pub use optim::OptimizerKind;
pub use render::{
    intersect_aabb, render_image, render_ray, render_ray_backward, trilerp, Ray, RenderConfig,
    VoxelSource,
};
pub use scalar::Real;
pub use scene::{Camera, Dataset, SceneSpec, TrainConfig};
pub use sh::eval_sh;
pub use vq::{
    assign, build_vq_model, compression_rate, ema_update, expire_codes, init_codebook,
    weighted_wcss, VQConfig,
};

/// Production scalar.
pub type Scalar = f32;
pub type Grid = DenseGrid<Scalar>;
pub type Model = VQModel<Scalar>;
pub type Importance = ImportanceField<Scalar>;
pub type Book = Codebook<Scalar>;
/// Double precision variants used by gradient checks.
pub type Grid64 = DenseGrid<f64>;
pub type Model64 = VQModel<f64>;
