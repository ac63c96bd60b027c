//! The network engine: layers with manual gradients, SGD training,
//! checkpointing, and the intervention-aware forward pass.

mod checkpoint;
mod layers;
mod model;
mod train;

pub use checkpoint::{models_bit_equal, Checkpoint, RunningStats, FORMAT_VERSION};
pub use layers::{
    argmax_class, batch_metrics, softmax_xent, LayerCache, LayerGrads, LayerParams, LayerSpec,
};
pub use model::{ForwardTrace, Gradients, Layer, Mode, Model};
pub use train::{
    evaluate, train, train_with_observer, Evaluation, EpochMetrics, TrainConfig, TrainFlow,
    EVAL_BATCH,
};
