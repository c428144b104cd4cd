//! Runs a few adversarial steps with one and with four data-parallel workers
//! and reports how far the resulting generators differ.

use asrgan::fixtures::synthetic_pairs;
use asrgan::layers::BnMode;
use asrgan::models::GeneratorConfig;
use asrgan::train::{Phase, TrainConfig, Trainer};

fn run(workers: usize) -> asrgan::Result<Trainer> {
    let config = TrainConfig {
        phase: Phase::Gan,
        steps: 5,
        batch_size: 8,
        crop_size: 4,
        workers,
        batch_norm: BnMode::Eval,
        generator: GeneratorConfig {
            residual_blocks: 1,
            features: 8,
            ..GeneratorConfig::default()
        },
        disc_features: 4,
        disc_dense: 16,
        ..TrainConfig::default()
    };
    let data = synthetic_pairs(4, 8, 9)?;
    let mut trainer = Trainer::new(config)?;
    trainer.run(&data, &mut |_| Ok(()))?;
    for log in &trainer.logs {
        println!("  workers={workers} {log}");
    }
    Ok(trainer)
}

fn main() -> asrgan::Result<()> {
    let single = run(1)?;
    let parallel = run(4)?;
    let diff = single
        .g_store
        .iter()
        .zip(parallel.g_store.iter())
        .map(|((.., a), (.., b))| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    println!("max generator parameter difference: {diff:.2e}");
    println!("updates: D={} G={}", parallel.audit.d_updates, parallel.audit.g_updates);
    Ok(())
}
