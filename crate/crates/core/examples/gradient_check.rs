//! Checks reverse-mode gradients of a small conv → tanh → pool → softmax
//! graph against central differences.

use asrgan::autodiff::{Tape, Var};
use asrgan::gradcheck::{check_gradients, DEFAULT_STEP};
use asrgan::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn graph(t: &mut Tape, v: &[Var]) -> asrgan::Result<Var> {
    let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
    let y = t.tanh(y)?;
    let y = t.max_pool2d(y, 2)?;
    let y = t.reshape(y, &[2, 4 * 3 * 3])?;
    let y = t.softmax(y, 1)?;
    let y = t.log(y)?;
    t.mean(y)
}

fn main() -> asrgan::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [
        Tensor::randn(&[2, 3, 6, 6], 1.0, &mut rng),
        Tensor::randn(&[4, 3, 3, 3], 0.3, &mut rng),
        Tensor::randn(&[4], 0.1, &mut rng),
    ];
    let errors = check_gradients(graph, &inputs, DEFAULT_STEP)?;
    for (name, e) in ["input", "weight", "bias"].iter().zip(&errors) {
        println!("{name:<7} relative error {e:.2e}");
    }
    Ok(())
}
