//! Data handling, losses, optimizer, metrics, self-ensemble, training
//! loop, and checkpoint persistence.

pub mod adam;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod degrade;
pub mod ensemble;
pub mod io;
pub mod metrics;
pub mod synth;
pub mod train;

pub use adam::{AdamHyper, AdamState};
pub use augment::{augment, dihedral_apply, dihedral_inverse};
pub use checkpoint::Checkpoint;
pub use config::{lr_at_step, RunConfig, TrainConfig};
pub use degrade::{add_gaussian_noise, area_downsample, bilinear_upsample, clamp01, degrade};
pub use ensemble::{restore_image, self_ensemble_infer};
pub use io::{image_read, image_write, quantize};
pub use metrics::{luma_255, psnr_y, ssim_y};
pub use synth::{synth_corpus, synth_image};
pub use train::{build_eval_pairs, evaluate, list_images, train, train_step_loss, EvalPair, MetricReport, TrainOptions};
