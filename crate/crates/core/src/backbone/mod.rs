//! Small stand-in for a pretrained geometry transformer: patch tokenizer,
//! attention stack with key/value hooks, and prediction heads.

mod groups;
mod heads;
mod model;
mod tokens;

pub use groups::{ParamGroup, Trainable};
pub use heads::{heads, HeadParams, Pose, PredVars, Predictions};
pub use model::{aggregate, embed_window, Aggregated, BackboneConfig, BackboneParams, BlockParams, KvHook};
pub use tokens::{
    embed_patches, patch_grid, patch_matrix, patchify, position_encoding, temporal_encoding, Frame, PatchTokens,
};
