//! Briefly trains a small attentional generator, then upscales a held-out
//! room image 4× and writes the result next to the bicubic baseline.
//!
//! ```text
//! cargo run --release -p asrgan --example super_resolve -- [out_dir] [steps]
//! ```

use asrgan::attention::FsaConfig;
use asrgan::fixtures::{room_image, synthetic_pairs};
use asrgan::imaging::{downscale, save_image, upscale_bicubic};
use asrgan::metrics::{psnr, ssim, GeneratorResolver, SuperResolver};
use asrgan::models::GeneratorConfig;
use asrgan::train::{TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "sr_out".into());
    let steps: u64 = args.next().map_or(100, |s| s.parse().expect("steps"));
    std::fs::create_dir_all(&out)?;

    let config = TrainConfig {
        steps,
        learning_rate: 1e-3,
        crop_size: 16,
        generator: GeneratorConfig {
            residual_blocks: 2,
            features: 16,
            ..GeneratorConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config)?;
    trainer.run(&synthetic_pairs(6, 48, 1)?, &mut |_| Ok(()))?;

    let hr = room_image(192, 128, 99)?;
    let lr = downscale(&hr)?;
    let resolver = GeneratorResolver {
        generator: &trainer.generator,
        store: &trainer.g_store,
        attention: FsaConfig::new(2)?,
    };
    let sr = resolver.super_resolve(&lr)?;
    let bicubic = upscale_bicubic(&lr)?;
    save_image(&lr, format!("{out}/lr.png"))?;
    save_image(&sr, format!("{out}/sr.png"))?;
    save_image(&bicubic, format!("{out}/bicubic.png"))?;
    println!("model   psnr {:.3} dB  ssim {:.4}", psnr(&sr, &hr)?, ssim(&sr, &hr)?);
    println!("bicubic psnr {:.3} dB  ssim {:.4}", psnr(&bicubic, &hr)?, ssim(&bicubic, &hr)?);
    Ok(())
}
