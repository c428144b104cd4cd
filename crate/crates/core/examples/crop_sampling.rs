//! Draws aligned LR/HR training crops from a synthetic room image and saves
//! a few of them as PNG files.
//!
//! ```text
//! cargo run --release -p asrgan --example crop_sampling -- [out_dir]
//! ```

use asrgan::fixtures::room_image;
use asrgan::imaging::{random_crop_pair, save_image, ImagePair};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "crops".into());
    std::fs::create_dir_all(&out)?;
    let pair = ImagePair::from_hr("room", room_image(384, 256, 11)?)?;
    println!("lr {}x{}  hr {}x{}", pair.lr.width(), pair.lr.height(), pair.hr.width(), pair.hr.height());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for k in 0..4 {
        let crop = random_crop_pair(&pair, 24, &mut rng)?;
        println!("crop {k}: lr at {:?}, hr at {:?}", crop.lr_origin, crop.hr_origin);
        save_image(&crop.lr, format!("{out}/crop{k}_lr.png"))?;
        save_image(&crop.hr, format!("{out}/crop{k}_hr.png"))?;
    }
    Ok(())
}
