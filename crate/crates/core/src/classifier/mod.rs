//! Image classifier with feature taps, plus the two manifold-consistency
//! heads: a contrastively trained loss predictor and a DUQ kernel head.

mod bundle;
mod contrastive;
mod duq;
mod loss_predictor;
mod model;
mod train;

pub use bundle::{
    predict_with_taps, BundleManifest, BundleSeeds, LossStats, TrainMode, TrainedBundle, MANIFEST_FILE, SCHEMA_VERSION,
    WEIGHTS_FILE,
};
pub use contrastive::{batch_pairs, contrastive_aux_loss, contrastive_aux_loss_tensor};
pub use duq::{kernel_similarity, uncertainty, DuqConfig, DuqHead};
pub use loss_predictor::LossPredictor;
pub use model::{Backbone, ClassifierModel, ClassifierSpec, ForwardOutput};
pub use train::{
    accuracy, duq_accuracy, duq_kernels, duq_uncertainty, loss_estimates, per_sample_losses, train, train_classifier,
    train_duq, train_joint_dep, TrainConfig,
};
