//! Attention maps, flexible pooling equivalences and the memory law.

mod common;

use asrgan::attention::{
    attention_map, attention_map_elements, fsa, peak_map_elements, reset_peak_map_elements, self_attention,
    FsaConfig, SelfAttention,
};
use asrgan::layers::ParamStore;
use asrgan::Tensor;
use common::rng;

fn layer(channels: usize, seed: u64, gamma: f64) -> (ParamStore, SelfAttention) {
    let mut store = ParamStore::new();
    let l = SelfAttention::new(&mut store, "attn", channels, false, &mut rng(seed)).unwrap();
    *store.get_mut(l.gamma) = Tensor::scalar(gamma);
    (store, l)
}

/// Straight-line attention on a `[C, P]` position matrix.
fn oracle_attention(store: &ParamStore, l: &SelfAttention, x: &[Vec<f64>], gamma: f64) -> Vec<Vec<f64>> {
    let c = x.len();
    let p = x[0].len();
    let project = |w: &Tensor| -> Vec<Vec<f64>> {
        let out = w.shape()[0];
        (0..out)
            .map(|o| (0..p).map(|i| (0..c).map(|k| w.data()[o * c + k] * x[k][i]).sum()).collect())
            .collect()
    };
    let f = project(store.get(l.query.weight));
    let g = project(store.get(l.key.weight));
    let h = project(store.get(l.value.weight));
    let mut beta = vec![vec![0.0; p]; p];
    for j in 0..p {
        let s: Vec<f64> = (0..p)
            .map(|i| (0..f.len()).map(|k| f[k][i] * g[k][j]).sum())
            .collect();
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        for i in 0..p {
            beta[i][j] = s[i].exp() / z;
        }
    }
    (0..c)
        .map(|ch| {
            (0..p)
                .map(|j| {
                    let o: f64 = (0..p).map(|i| h[ch][i] * beta[i][j]).sum();
                    gamma * o + x[ch][j]
                })
                .collect()
        })
        .collect()
}

#[test]
fn two_position_map_matches_hand_oracle() {
    let (store, l) = layer(8, 1, 0.7);
    let x = Tensor::randn(&[1, 8, 1, 2], 1.0, &mut rng(2));
    let rows: Vec<Vec<f64>> = (0..8).map(|c| vec![x.at4(0, c, 0, 0), x.at4(0, c, 0, 1)]).collect();
    let expected = oracle_attention(&store, &l, &rows, 0.7);
    let got = self_attention(&store, &l, &x).unwrap();
    for c in 0..8 {
        for j in 0..2 {
            assert!((got.at4(0, c, 0, j) - expected[c][j]).abs() < 1e-12);
        }
    }
    let map = &attention_map(&store, &l, &x, FsaConfig::PLAIN).unwrap()[0];
    assert_eq!(map.positions(), 2);
    for s in map.column_sums() {
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn columns_are_stochastic_for_every_pool_size() {
    let (store, l) = layer(16, 3, 0.5);
    let x = Tensor::randn(&[2, 16, 8, 12], 2.0, &mut rng(4));
    for p in [1, 2, 3, 4] {
        for map in attention_map(&store, &l, &x, FsaConfig::new(p).unwrap()).unwrap() {
            assert!(map.beta.data().iter().all(|v| *v >= 0.0));
            for s in map.column_sums() {
                assert!((s - 1.0).abs() < 1e-9, "p={p}: column sum {s}");
            }
        }
    }
}

#[test]
fn pool_size_one_is_plain_attention_bit_for_bit() {
    let (store, l) = layer(8, 5, 1.3);
    let x = Tensor::randn(&[2, 8, 6, 5], 1.0, &mut rng(6));
    let plain = self_attention(&store, &l, &x).unwrap();
    let flex = fsa(&store, &l, &x, FsaConfig::new(1).unwrap()).unwrap();
    assert!(plain.data().iter().zip(flex.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn zero_gamma_is_identity_for_every_pool_size() {
    let (store, l) = layer(8, 7, 0.0);
    let x = Tensor::randn(&[1, 8, 7, 9], 1.0, &mut rng(8));
    for p in [1, 2, 4] {
        assert_eq!(fsa(&store, &l, &x, FsaConfig::new(p).unwrap()).unwrap(), x);
    }
}

#[test]
fn pooled_attention_matches_pool_attend_replicate_oracle() {
    let (store, l) = layer(8, 9, 0.9);
    let (h, w, p) = (4, 6, 2);
    let x = Tensor::randn(&[1, 8, h, w], 1.0, &mut rng(10));
    let (hp, wp) = (h / p, w / p);
    let pooled: Vec<Vec<f64>> = (0..8)
        .map(|c| {
            (0..hp * wp)
                .map(|k| {
                    let (py, px) = (k / wp, k % wp);
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..p {
                        for dx in 0..p {
                            m = m.max(x.at4(0, c, py * p + dy, px * p + dx));
                        }
                    }
                    m
                })
                .collect()
        })
        .collect();
    // gamma = 1 and subtracting the pooled input leaves the attended o.
    let with_skip = oracle_attention(&store, &l, &pooled, 1.0);
    let got = fsa(&store, &l, &x, FsaConfig::new(p).unwrap()).unwrap();
    for c in 0..8 {
        for y in 0..h {
            for xx in 0..w {
                let k = (y / p) * wp + xx / p;
                let o = with_skip[c][k] - pooled[c][k];
                let expected = 0.9 * o + x.at4(0, c, y, xx);
                assert!((got.at4(0, c, y, xx) - expected).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn peak_map_allocation_follows_pooling_law() {
    let (store, l) = layer(8, 11, 0.5);
    let (h, w) = (16, 16);
    let x = Tensor::randn(&[1, 8, h, w], 1.0, &mut rng(12));
    for p in [1, 2, 4] {
        reset_peak_map_elements();
        fsa(&store, &l, &x, FsaConfig::new(p).unwrap()).unwrap();
        let expected = (h * w / (p * p)).pow(2);
        assert_eq!(peak_map_elements(), expected, "p={p}");
        assert_eq!(attention_map_elements(h, w, p), expected as u128);
    }
}

#[test]
fn uneven_sizes_are_padded_then_cropped() {
    let (store, l) = layer(8, 13, 0.5);
    let x = Tensor::randn(&[1, 8, 5, 7], 1.0, &mut rng(14));
    let y = fsa(&store, &l, &x, FsaConfig::new(2).unwrap()).unwrap();
    assert_eq!(y.shape(), x.shape());
    let map = &attention_map(&store, &l, &x, FsaConfig::new(2).unwrap()).unwrap()[0];
    assert_eq!(map.positions(), 3 * 4);
}

#[test]
fn zero_pool_size_is_rejected() {
    assert!(FsaConfig::new(0).is_err());
}
