//! Self-attention over feature-map positions and its flexible, pooled variant.
//!
//! For an input `x` with `N' = H·W` positions, the layer projects
//! `f = W_f x`, `g = W_g x` (C → C/8) and `h = W_h x` (C → C) with 1×1
//! convolutions, scores every pair `s_ij = f(x_i)ᵀ g(x_j)`, normalizes over
//! the source index,
//!
//! ```text
//! β_ij = exp(s_ij) / Σ_i exp(s_ij)
//! o_j  = Σ_i β_ij h(x_i)
//! ```
//!
//! and returns the learnable sum `γ·o + x`, with `γ` initialized to zero.
//!
//! The flexible variant max-pools `x` with kernel and stride `p` before
//! attending, so the attention map shrinks from `(H·W)²` to `(H·W/p²)²`
//! entries, then resizes the attended features back with parameter-free
//! nearest-neighbour replication and applies the learnable sum at full
//! resolution. It reuses the same weights, so a model trained with plain
//! attention can switch to any `p` at inference. With `p = 1` it computes
//! exactly the same operations as plain attention.

use std::cell::Cell;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{BnMode, Conv2d, Net, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Channel reduction of the query and key projections.
pub const REDUCTION: usize = 8;

/// Pooling configuration of the flexible attention wrapper.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FsaConfig {
    pub pool_size: usize,
}

impl FsaConfig {
    /// Plain self-attention (no pooling).
    pub const PLAIN: FsaConfig = FsaConfig { pool_size: 1 };

    pub fn new(pool_size: usize) -> Result<Self> {
        if pool_size == 0 {
            return Err(Error::Config("pool size must be at least 1".into()));
        }
        Ok(FsaConfig { pool_size })
    }
}

impl Default for FsaConfig {
    fn default() -> Self {
        FsaConfig::PLAIN
    }
}

/// Column-stochastic attention map over (pooled) positions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    /// `[Np, Np]`, entry `(i, j)` is the weight of source `i` for target `j`.
    pub beta: Tensor,
}

impl AttentionMap {
    pub fn positions(&self) -> usize {
        self.beta.shape()[0]
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let n = self.positions();
        let d = self.beta.data();
        (0..n).map(|j| (0..n).map(|i| d[i * n + j]).sum()).collect()
    }
}

thread_local! {
    static PEAK_MAP_ELEMENTS: Cell<usize> = const { Cell::new(0) };
}

/// Resets the per-thread attention-map allocation probe.
pub fn reset_peak_map_elements() {
    PEAK_MAP_ELEMENTS.with(|p| p.set(0));
}

/// Largest attention-map buffer (elements) allocated on this thread since
/// the last reset.
pub fn peak_map_elements() -> usize {
    PEAK_MAP_ELEMENTS.with(Cell::get)
}

fn record_map_allocation(elements: usize) {
    PEAK_MAP_ELEMENTS.with(|p| p.set(p.get().max(elements)));
}

/// Attention-map entries for an `h × w` input at pool size `p`
/// (after padding up to a multiple of `p`).
pub fn attention_map_elements(height: usize, width: usize, pool_size: usize) -> u128 {
    let side = (height.div_ceil(pool_size) * width.div_ceil(pool_size)) as u128;
    side * side
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub channels: usize,
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub gamma: ParamId,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        spectral: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(REDUCTION) {
            return Err(Error::Config(format!(
                "{name}: attention needs a channel count divisible by {REDUCTION}, got {channels}"
            )));
        }
        let reduced = channels / REDUCTION;
        let query = Conv2d::new(store, &format!("{name}.query"), channels, reduced, 1, 1, false, spectral, rng)?;
        let key = Conv2d::new(store, &format!("{name}.key"), channels, reduced, 1, 1, false, spectral, rng)?;
        let value = Conv2d::new(store, &format!("{name}.value"), channels, channels, 1, 1, false, spectral, rng)?;
        let gamma = store.add(format!("{name}.gamma"), ParamKind::Learnable, Tensor::scalar(0.0))?;
        Ok(SelfAttention {
            channels,
            query,
            key,
            value,
            gamma,
        })
    }

    pub fn param_count(&self) -> usize {
        self.query.param_count() + self.key.param_count() + self.value.param_count() + 1
    }

    /// Attended features `o` (without the skip) and the map `β`.
    fn attend(&self, tape: &mut Tape, net: &mut Net, x: Var) -> Result<(Var, Var)> {
        let (n, c, h, w) = tape.value(x).dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "attention expects {} channels, got {c}",
                self.channels
            )));
        }
        let positions = h * w;
        let reduced = c / REDUCTION;
        let f = self.query.forward(tape, net, x)?;
        let g = self.key.forward(tape, net, x)?;
        let hv = self.value.forward(tape, net, x)?;
        let f = tape.reshape(f, &[n, reduced, positions])?;
        let g = tape.reshape(g, &[n, reduced, positions])?;
        let hv = tape.reshape(hv, &[n, c, positions])?;

        // s[i][j] = f_iᵀ g_j
        let scores = tape.bmm(f, g, true, false)?;
        record_map_allocation(tape.value(scores).len());
        // Normalize over the source index i (axis 1).
        let beta = tape.softmax(scores, 1)?;
        record_map_allocation(tape.value(beta).len());
        // o[:, j] = Σ_i h[:, i] β[i][j]
        let o = tape.bmm(hv, beta, false, false)?;
        let o = tape.reshape(o, &[n, c, h, w])?;
        Ok((o, beta))
    }

    /// Flexible self-attention; `config.pool_size == 1` is plain attention.
    pub fn forward(&self, tape: &mut Tape, net: &mut Net, x: Var, config: FsaConfig) -> Result<Var> {
        self.forward_with_map(tape, net, x, config).map(|(y, _)| y)
    }

    /// Like [`forward`](Self::forward), also returning the `β` variable
    /// (`[N, Np, Np]`).
    pub fn forward_with_map(
        &self,
        tape: &mut Tape,
        net: &mut Net,
        x: Var,
        config: FsaConfig,
    ) -> Result<(Var, Var)> {
        let p = config.pool_size;
        if p == 0 {
            return Err(Error::Config("pool size must be at least 1".into()));
        }
        let (_, _, h, w) = tape.value(x).dims4()?;
        let (ph, pw) = (h.div_ceil(p) * p, w.div_ceil(p) * p);

        let padded = tape.pad2d(x, ph - h, pw - w)?;
        let pooled = if p == 1 { padded } else { tape.max_pool2d(padded, p)? };
        let (o, beta) = self.attend(tape, net, pooled)?;
        let o = if p == 1 { o } else { tape.resize_nearest(o, ph, pw)? };
        let o = tape.crop2d(o, h, w)?;

        let gamma = net.bind(tape, self.gamma);
        let scaled = tape.scale_by(o, gamma)?;
        let y = tape.add(scaled, x)?;
        Ok((y, beta))
    }
}

fn run_eval<T>(
    store: &ParamStore,
    x: &Tensor,
    f: impl FnOnce(&mut Tape, &mut Net, Var) -> Result<T>,
) -> Result<T> {
    let mut tape = Tape::inference();
    let mut net = Net::new(store, false, BnMode::Eval);
    let xv = tape.constant(x.clone());
    f(&mut tape, &mut net, xv)
}

/// Plain self-attention applied to a tensor.
pub fn self_attention(store: &ParamStore, layer: &SelfAttention, x: &Tensor) -> Result<Tensor> {
    fsa(store, layer, x, FsaConfig::PLAIN)
}

/// Flexible self-attention applied to a tensor.
pub fn fsa(store: &ParamStore, layer: &SelfAttention, x: &Tensor, config: FsaConfig) -> Result<Tensor> {
    run_eval(store, x, |tape, net, xv| {
        let y = layer.forward(tape, net, xv, config)?;
        Ok(tape.value(y).clone())
    })
}

/// Attention maps, one per batch element.
pub fn attention_map(
    store: &ParamStore,
    layer: &SelfAttention,
    x: &Tensor,
    config: FsaConfig,
) -> Result<Vec<AttentionMap>> {
    run_eval(store, x, |tape, net, xv| {
        let (_, beta) = layer.forward_with_map(tape, net, xv, config)?;
        let b = tape.value(beta);
        let (n, np) = (b.shape()[0], b.shape()[1]);
        (0..n)
            .map(|i| {
                Ok(AttentionMap {
                    beta: b.slice_batch(i, i + 1)?.reshape(&[np, np])?,
                })
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(channels: usize, seed: u64) -> (ParamStore, SelfAttention) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let l = SelfAttention::new(&mut store, "attn", channels, false, &mut rng).unwrap();
        (store, l)
    }

    #[test]
    fn rejects_channels_not_divisible_by_eight() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        assert!(matches!(
            SelfAttention::new(&mut store, "a", 12, false, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_query_key_and_gamma_is_identity() {
        let (mut store, l) = layer(8, 1);
        *store.get_mut(l.query.weight) = Tensor::zeros(&[1, 8, 1, 1]);
        *store.get_mut(l.key.weight) = Tensor::zeros(&[1, 8, 1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 8, 4, 4], 1.0, &mut rng);
        assert_eq!(self_attention(&store, &l, &x).unwrap(), x);

        let maps = attention_map(&store, &l, &x, FsaConfig::PLAIN).unwrap();
        assert_eq!(maps.len(), 2);
        for v in maps[0].beta.data() {
            assert!((v - 1.0 / 16.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fsa_shapes_and_map_size() {
        let (store, l) = layer(8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[1, 8, 16, 16], 1.0, &mut rng);
        let y = fsa(&store, &l, &x, FsaConfig::new(4).unwrap()).unwrap();
        assert_eq!(y.shape(), x.shape());
        let maps = attention_map(&store, &l, &x, FsaConfig::new(4).unwrap()).unwrap();
        assert_eq!(maps[0].beta.shape(), &[16, 16]);
    }

    #[test]
    fn fsa_pads_and_crops_indivisible_inputs() {
        let (mut store, l) = layer(8, 5);
        *store.get_mut(l.gamma) = Tensor::scalar(0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(&[1, 8, 7, 5], 1.0, &mut rng);
        let y = fsa(&store, &l, &x, FsaConfig::new(3).unwrap()).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(attention_map_elements(7, 5, 3), 36);
    }

    #[test]
    fn map_element_counts_for_large_inputs() {
        // 500×500 positions: 250,000² entries plain, 15,625² with p = 4.
        assert_eq!(attention_map_elements(500, 500, 1), 250_000u128 * 250_000);
        assert_eq!(attention_map_elements(500, 500, 4), 15_625u128 * 15_625);
    }
}
