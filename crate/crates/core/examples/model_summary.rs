//! Prints the layer tables of the default generator and discriminator.

use asrgan::models::{build_discriminator, build_generator, DiscriminatorConfig, GeneratorConfig};

fn main() -> asrgan::Result<()> {
    let (g, _) = build_generator(&GeneratorConfig::default(), 0)?;
    println!("{}", g.summary());
    let (d, _) = build_discriminator(&DiscriminatorConfig::default(), 0)?;
    println!("{}", d.summary());
    Ok(())
}
