//! Synthetic shape corpus, the conditional noise-prediction networks and the
//! image classifiers attacked by the samplers.

mod classifier;
mod corpus;
mod denoiser;
mod layers;
mod train;

pub use classifier::{
    accuracy_on, classify, predict_labels, train_classifier, Classifier, ClassifierArch, ClassifierParams,
};
pub use corpus::{gen_corpus, Dataset, Jitter, ShapeCorpusSpec, SHAPE_FAMILIES, SHAPE_LEAVES};
pub use denoiser::{sample_ddim, train_denoiser, DenoiserArch, DenoiserParams, UNCOND_DROPOUT};
pub use layers::{load_checkpoint, save_checkpoint, ArchText};
pub use train::{Adam, LossHistory, TrainConfig};
