//! Compares plain self attention with pooled (flexible) attention on one
//! feature map: attention-map size, wall time, and distance from the plain
//! output.

use std::time::Instant;

use asrgan::attention::{fsa, peak_map_elements, reset_peak_map_elements, self_attention, FsaConfig, SelfAttention};
use asrgan::layers::ParamStore;
use asrgan::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> asrgan::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let layer = SelfAttention::new(&mut store, "attn", 16, true, &mut rng)?;
    *store.get_mut(layer.gamma) = Tensor::scalar(0.5);
    store.refresh_spectral(1);
    let x = Tensor::randn(&[1, 16, 32, 32], 1.0, &mut rng);

    let plain = self_attention(&store, &layer, &x)?;
    println!("pool  map_elements  ms      max|y - y_plain|");
    for p in [1, 2, 4, 8] {
        reset_peak_map_elements();
        let start = Instant::now();
        let y = fsa(&store, &layer, &x, FsaConfig::new(p)?)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        println!("{p:<5} {:<13} {ms:<7.1} {:.4}", peak_map_elements(), y.max_abs_diff(&plain));
    }
    Ok(())
}
