//! Attentional super-resolution GAN built from first principles.
//!
//! The crate provides a small reverse-mode autodiff engine over `f64`
//! tensors, the layers of an SRGAN-style generator and discriminator with
//! spectral normalization, a flexible self-attention layer that pools before
//! attending so it scales to large feature maps, PNG imaging utilities with
//! bicubic resampling and aligned crop sampling, PSNR/SSIM metrics, and a
//! deterministic simulated data-parallel trainer.
//!
//! Runnable walkthroughs of each capability live under `examples/`:
//!
//! ```text
//! cargo run --release -p asrgan --example flexible_attention
//! cargo run --release -p asrgan --example spectral_norm
//! cargo run --release -p asrgan --example gradient_check
//! cargo run --release -p asrgan --example model_summary
//! cargo run --release -p asrgan --example crop_sampling
//! cargo run --release -p asrgan --example quality_metrics
//! cargo run --release -p asrgan --example train_srresnet
//! cargo run --release -p asrgan --example distributed_gan
//! cargo run --release -p asrgan --example checkpoint_resume
//! cargo run --release -p asrgan --example super_resolve
//! ```

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod fixtures;
pub mod gradcheck;
pub mod imaging;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
