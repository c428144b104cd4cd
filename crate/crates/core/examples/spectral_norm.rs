//! Power-iteration estimates of the top singular value, and how a
//! persistent `u` vector lets one iteration per step converge over steps.

use asrgan::layers::{spectral_normalize, LayerParams};
use asrgan::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> asrgan::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = Tensor::randn(&[32, 48], 1.0, &mut rng);

    println!("fresh u, n iterations:");
    for iters in [1, 2, 5, 20, 50, 200] {
        let mut fresh = LayerParams::with_spectral_state(w.clone(), &mut ChaCha8Rng::seed_from_u64(9));
        let out = spectral_normalize(&mut fresh, iters)?;
        println!("  {iters:>3}  sigma {:.6}", out.sigma);
    }

    println!("persistent u, one iteration per call:");
    let mut persistent = LayerParams::with_spectral_state(w, &mut ChaCha8Rng::seed_from_u64(9));
    for step in 1..=50 {
        let out = spectral_normalize(&mut persistent, 1)?;
        if step % 10 == 0 {
            println!("  step {step:>2}  sigma {:.6}", out.sigma);
        }
    }

    let mut zero = LayerParams::with_spectral_state(Tensor::zeros(&[4, 4]), &mut rng);
    println!("zero weight degenerate: {}", spectral_normalize(&mut zero, 5)?.degenerate);
    Ok(())
}
