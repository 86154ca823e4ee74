//! Cross-modal representation learning on synthetic scene data.
//!
//! Several data modalities (dense sensor-like channels plus one hostile
//! text-like channel) are rendered from a common latent scene model. Each
//! modality gets its own small encoder; all encoders feed one shared trunk
//! ending in a classifier. The crate trains that family of networks under a
//! range of alignment strategies and measures how modality-agnostic the
//! learned representation is.
//!
//! The pieces:
//!
//! * [`tensor`], [`rng`]: dense f64 tensors and a fully deterministic,
//!   forkable random stream. Same seed, same bytes, every time.
//! * [`nn`]: linear stacks with per-layer activation taps, softmax
//!   cross-entropy, SGD with weight decay, finite-difference checking.
//! * [`density`]: diagonal Gaussian and diagonal Gaussian-mixture models over
//!   activations, fitted by EM, plus the penalty terms and their gradients.
//! * [`synthdata`]: the synthetic unpaired multi-modal dataset generator and
//!   its binary serialization.
//! * [`crossmodal`]: the shared-trunk network, the training strategies
//!   (private baselines, trunk transfer with curriculum freezing, activation
//!   statistics regularization, and their combination), checkpoints.
//! * [`evalkit`]: cross-modal retrieval (mAP, precision@k), chance
//!   calibration, zero-shot transfer to held-out classes, per-unit
//!   consistency analysis, embedding export.
//! * [`runner`]: run-directory pipeline used by the `xmodal` binary.
//!
//! Runnable walkthroughs live in `examples/`; start with
//! `cargo run --release -p xmodal --example train_and_retrieve`.

mod binio;

pub mod crossmodal;
pub mod density;
pub mod error;
pub mod evalkit;
pub mod nn;
pub mod rng;
pub mod runner;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::Tensor;
