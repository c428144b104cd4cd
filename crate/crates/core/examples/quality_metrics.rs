//! PSNR and SSIM of bicubic upsampling and of increasingly noisy copies of
//! a synthetic room image.

use asrgan::fixtures::room_image;
use asrgan::imaging::{downscale, upscale_bicubic, Image};
use asrgan::metrics::{psnr, ssim};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> asrgan::Result<()> {
    let hr = room_image(256, 192, 4)?;
    let bicubic = upscale_bicubic(&downscale(&hr)?)?;
    println!("bicubic x4     psnr {:>7.3} dB  ssim {:.4}", psnr(&bicubic, &hr)?, ssim(&bicubic, &hr)?);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for amp in [1i16, 4, 16, 64] {
        let noisy = Image::from_fn(hr.width(), hr.height(), |x, y| {
            hr.pixel(x, y).map(|v| (v as i16 + rng.random_range(-amp..=amp)).clamp(0, 255) as u8)
        })?;
        println!("noise ±{amp:<3}     psnr {:>7.3} dB  ssim {:.4}", psnr(&noisy, &hr)?, ssim(&noisy, &hr)?);
    }
    println!("identical      psnr {}", psnr(&hr, &hr)?);
    Ok(())
}
