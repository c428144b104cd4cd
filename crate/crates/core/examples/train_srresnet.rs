//! Trains a small attentional SRResNet on synthetic room images with the
//! content loss and compares it with bicubic upsampling on the training set.
//!
//! ```text
//! cargo run --release -p asrgan --example train_srresnet -- [steps] [batch] [spectral_norm]
//! ```

use asrgan::attention::FsaConfig;
use asrgan::fixtures::synthetic_pairs;
use asrgan::metrics::{evaluate_pairs, Bicubic, GeneratorResolver};
use asrgan::models::GeneratorConfig;
use asrgan::train::{TrainConfig, Trainer};

fn main() -> asrgan::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map_or(200, |s| s.parse().expect("steps"));
    let batch: usize = args.next().map_or(8, |s| s.parse().expect("batch"));
    let spectral_norm: bool = args.next().map_or(true, |s| s.parse().expect("spectral_norm"));

    let data = synthetic_pairs(8, 64, 7)?;
    let config = TrainConfig {
        steps,
        batch_size: batch,
        learning_rate: 1e-4,
        crop_size: 24,
        generator: GeneratorConfig {
            residual_blocks: 4,
            features: 32,
            use_spectral_norm: spectral_norm,
            ..GeneratorConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config)?;
    let start = std::time::Instant::now();
    for _ in 0..steps {
        let log = trainer.step_once(&data)?;
        if log.step % 250 == 0 || log.step == 1 {
            println!("{log}");
        }
    }
    println!("trained {steps} steps in {:.1}s", start.elapsed().as_secs_f64());

    let resolver = GeneratorResolver {
        generator: &trainer.generator,
        store: &trainer.g_store,
        attention: FsaConfig::PLAIN,
    };
    let model = evaluate_pairs(&resolver, &data).summary;
    let bicubic = evaluate_pairs(&Bicubic, &data).summary;
    println!("model   psnr {:.3} dB  ssim {:.4}", model.mean_psnr, model.mean_ssim);
    println!("bicubic psnr {:.3} dB  ssim {:.4}", bicubic.mean_psnr, bicubic.mean_ssim);
    Ok(())
}
