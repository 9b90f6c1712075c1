//! Minimal reverse-mode autodiff over dense tensors plus the networks built
//! on top of it: the d-headed colorizer U-Net `f`, the confidence-guided
//! refiner `g`, the frozen random-feature perceptual extractor, Adam, and
//! binary weight persistence.

mod adam;
mod features;
mod nets;
mod tape;
mod tensor;
mod weights;

pub use adam::{adam_step, AdamParams, AdamState};
pub use features::{
    stage_weighted_l1, stage_weighted_l1_node, FeatureExtractor, FeatureParams,
    HYPERCOLUMN_CHANNELS, STAGE_BOUNDS, STAGE_WEIGHTS,
};
pub use nets::{
    BoundWeightsHandle, ColorizerNet, ColorizerParams, RefinerNet, REFINER_IN_CHANNELS,
    UNET_WIDTHS,
};
pub use tape::{NodeId, Tape};
pub use tensor::{image_to_planar, planar_to_image, Tensor};
pub use weights::{load_weights, save_weights, NetworkWeights};
