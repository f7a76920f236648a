//! Voxel-response prediction from image patch tokens, ROI bookkeeping and
//! the noise-ceiling-normalized encoding score.

pub mod model;
pub mod roi;
pub mod scoring;
pub mod teacher;

pub use model::{
    evaluate_brain_encoder, pretrain_brain_encoder, stack_patches, BrainEncoder, BrainEncoderConfig,
    BrainPretrainReport, PREFIX,
};
pub use roi::{select_rois, FmriRecord, Hemisphere, RoiEntry, RoiMap, RoiSubset, Stream};
pub use scoring::{encoding_score, encoding_score_slices, voxel_correlations, EncodingScore};
pub use teacher::SyntheticTeacher;
