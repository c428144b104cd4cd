//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use asrgan::autodiff::{Tape, Var};
use asrgan::gradcheck::{numerical_gradient, relative_error, DEFAULT_STEP};
use asrgan::imaging::Image;
use asrgan::layers::{BnMode, Net, ParamStore};
use asrgan::models::GeneratorConfig;
use asrgan::train::TrainConfig;
use asrgan::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fixed, non-uniform weights so that a scalar loss exercises every output.
pub fn probe_weights(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| ((i * 7919) % 23) as f64 / 23.0 - 0.45)
}

/// `sum(y ⊙ R)` for fixed `R`.
pub fn weighted_sum(tape: &mut Tape, y: Var) -> Result<Var> {
    let r = tape.constant(probe_weights(tape.shape(y)));
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

/// Relative gradient errors of a layer graph with respect to its input and
/// every learnable store entry (`("input", e)`, then `(name, e)`).
pub fn layer_gradient_errors<F>(store: &ParamStore, x: &Tensor, bn: BnMode, build: F) -> Vec<(String, f64)>
where
    F: Fn(&mut Tape, &mut Net, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut net = Net::new(store, true, bn);
    let xv = tape.param(x.clone());
    let loss = build(&mut tape, &mut net, xv).unwrap();
    let grads = tape.backward(loss).unwrap();
    let gmap = net.gradients(&grads);

    let eval = |s: &ParamStore, input: &Tensor| -> Result<f64> {
        let mut t = Tape::inference();
        let mut n = Net::new(s, false, bn);
        let v = t.constant(input.clone());
        let out = build(&mut t, &mut n, v)?;
        t.value(out).item()
    };

    let mut out = Vec::new();
    let numeric_x = numerical_gradient(|p| eval(store, p), x, DEFAULT_STEP).unwrap();
    out.push(("input".to_string(), relative_error(grads.get(xv).unwrap(), &numeric_x)));
    for (k, &id) in gmap.ids.iter().enumerate() {
        let mut probe_store = store.clone();
        let numeric = numerical_gradient(
            |p| {
                *probe_store.get_mut(id) = p.clone();
                eval(&probe_store, x)
            },
            store.get(id),
            DEFAULT_STEP,
        )
        .unwrap();
        out.push((store.name(id).to_string(), relative_error(&gmap.grads[k], &numeric)));
    }
    out
}

/// Direct nested-loop cross-correlation with zero padding.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, ci, h, wd) = x.dims4().unwrap();
    let (co, _, k, _) = w.dims4().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv.data()[o]);
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as i64 - pad as i64;
                                let ix = (xo * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                acc += x.at4(b, c, iy as usize, ix as usize) * w.at4(o, c, ky, kx);
                            }
                        }
                    }
                    out.data_mut()[((b * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        let diag: f64 = (0..n).map(|i| a[i * n + i].powi(2)).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Largest singular value of a row-major `rows × cols` matrix.
pub fn top_singular_value(w: &[f64], rows: usize, cols: usize) -> f64 {
    singular_values(w, rows, cols)[0]
}

/// Singular values in descending order, from the eigenvalues of the smaller
/// Gram matrix.
pub fn singular_values(w: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let (n, gram): (usize, Vec<f64>) = if rows <= cols {
        let mut g = vec![0.0; rows * rows];
        for i in 0..rows {
            for j in 0..rows {
                g[i * rows + j] = (0..cols).map(|k| w[i * cols + k] * w[j * cols + k]).sum();
            }
        }
        (rows, g)
    } else {
        let mut g = vec![0.0; cols * cols];
        for i in 0..cols {
            for j in 0..cols {
                g[i * cols + j] = (0..rows).map(|k| w[k * cols + i] * w[k * cols + j]).sum();
            }
        }
        (cols, g)
    };
    let mut s: Vec<f64> = symmetric_eigenvalues(gram, n).into_iter().map(|e| e.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn naive_psnr(a: &Image, b: &Image) -> f64 {
    let mut sse = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.pixel(x, y), b.pixel(x, y));
            for c in 0..3 {
                let d = p[c] as f64 - q[c] as f64;
                sse += d * d;
            }
        }
    }
    let mse = sse / (a.width() * a.height() * 3) as f64;
    10.0 * (255.0 * 255.0 / mse).log10()
}

/// SSIM evaluated window by window with the two-dimensional Gaussian.
pub fn naive_ssim(a: &Image, b: &Image) -> f64 {
    let luma = |img: &Image, x: usize, y: usize| {
        let p = img.pixel(x, y);
        0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
    };
    let mut g = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut sum = 0.0;
    let mut count = 0;
    for y0 in 0..=a.height() - 11 {
        for x0 in 0..=a.width() - 11 {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let w = g[i][j] / total;
                    mx += w * luma(a, x0 + j, y0 + i);
                    my += w * luma(b, x0 + j, y0 + i);
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let w = g[i][j] / total;
                    let dx = luma(a, x0 + j, y0 + i) - mx;
                    let dy = luma(b, x0 + j, y0 + i) - my;
                    vx += w * dx * dx;
                    vy += w * dy * dy;
                    cov += w * dx * dy;
                }
            }
            sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    sum / count as f64
}

pub fn random_image(width: usize, height: usize, seed: u64) -> Image {
    use rand::Rng;
    let mut r = rng(seed);
    Image::new(width, height, (0..width * height * 3).map(|_| r.random()).collect()).unwrap()
}

/// Small, fast configuration for training tests.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        steps: 3,
        learning_rate: 1e-3,
        batch_size: 4,
        crop_size: 4,
        workers: 1,
        seed: 11,
        generator: GeneratorConfig {
            residual_blocks: 1,
            features: 8,
            use_attention: true,
            attention_position: None,
            use_spectral_norm: true,
        },
        disc_features: 2,
        disc_dense: 8,
        ..TrainConfig::default()
    }
}
