//! Stops training halfway, saves a checkpoint, resumes from the file, and
//! compares the result with an uninterrupted run.

use asrgan::fixtures::synthetic_pairs;
use asrgan::models::GeneratorConfig;
use asrgan::train::{Checkpoint, TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = synthetic_pairs(3, 8, 21)?;
    let config = TrainConfig {
        steps: 8,
        batch_size: 2,
        crop_size: 4,
        generator: GeneratorConfig {
            residual_blocks: 1,
            features: 8,
            ..GeneratorConfig::default()
        },
        ..TrainConfig::default()
    };
    let whole = Trainer::new(config.clone())?.run(&data, &mut |_| Ok(()))?;

    let half_config = TrainConfig { steps: 4, ..config.clone() };
    let path = std::env::temp_dir().join("asrgan_resume_example.ckpt");
    Trainer::new(half_config.clone())?.run(&data, &mut |_| Ok(()))?.save(&path)?;
    println!("saved {} ({} bytes)", path.display(), std::fs::metadata(&path)?.len());

    let mut resumed = Trainer::resume(half_config, &Checkpoint::load(&path)?)?;
    let rest = resumed.run(&data, &mut |_| Ok(()))?;
    println!("resumed at step {} -> {}", 4, resumed.step);
    let same = whole.model.iter().zip(&rest.model).all(|(a, b)| a.tensor == b.tensor);
    println!("parameters identical to the uninterrupted run: {same}");
    std::fs::remove_file(&path)?;
    Ok(())
}
