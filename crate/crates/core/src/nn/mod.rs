//! Small convolutional networks: the step estimator, the focus
//! discriminator, their training, and the fully convolutional conversion.

mod global;
mod io;
mod net;
mod spec;
mod train;

pub use global::{global_forward, to_global};
pub use io::{decode_weights, encode_weights, load_weights, save_weights};
pub use net::{LayerParams, NetworkWeights, Tensor, Trace};
pub use spec::{
    build_discriminator_spec, build_estimator_spec, Head, LayerSpec, NetForm, NetSpec, ParamShape,
    Shape3,
};
pub use train::{
    batch_gradient, generate_training_set, train, AdamParams, DatasetConfig, LabelKind,
    LabeledPatch, NearFocus, TrainReport, TrainingConfig, DESK_CONTRAST_JITTER, DESK_EPOCHS,
    DESK_SAMPLES, DESK_TEXTURES, LR_FLOOR,
};
