//! Bed removal, bias-field correction and intensity-based registration.

mod bed;
mod bias;
mod register;
mod transform;

pub use bed::{connected_components, remove_bed};
pub use bias::correct_bias;
pub use register::{
    mse, mutual_information, register, register_from, warp_onto, RegistrationMode, RegistrationResult, SimilarityMetric,
    EVALUATIONS_PER_LEVEL, MI_BINS, PYRAMID_LEVELS,
};
pub use transform::{apply_transform, euler_from_matrix, mat_mul, mat_vec, mm_to_voxel, voxel_to_mm, Mat3, SimilarityTransform, Transformable};
