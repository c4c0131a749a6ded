//! Acceptance prediction: per-candidate features, the MLP head, training data
//! generation and training.

pub mod dataset;
pub mod features;
pub mod head;
pub mod train;

pub use dataset::{
    binary_kl, eval_binary_kl, gen_dataset, read_jsonl, write_jsonl, DatasetConfig, LabelPrefix, TrainingExample,
};
pub use features::{FeatureVec, FEATURE_DIM, FEATURE_NAMES};
pub use head::{weighted_bce, HeadGrad, LossWeights, PredictorHead, LOGIT_CLAMP};
pub use train::{train_head, TrainConfig, TrainReport};
