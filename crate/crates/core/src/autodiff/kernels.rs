//! Slice-level compute kernels shared by the tape ops.
//!
//! Convolution is lowered to GEMM through im2col. The column buffer is built
//! for a band of output rows at a time so that large kernels on large maps
//! (k = 9 at full output resolution) stay within a bounded scratch size.

use rayon::prelude::*;

/// Upper bound on im2col scratch elements per band.
const COL_TILE_ELEMS: usize = 1 << 20;

/// `C = alpha * op(A) * op(B) + beta * C` for row-major `C` of shape `m × n`.
///
/// `a` is stored row-major as `a_rows × a_cols`; `op(A)` is its transpose
/// when `trans_a` is set, and likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_into(
    a: &[f64],
    (a_rows, a_cols): (usize, usize),
    trans_a: bool,
    b: &[f64],
    (b_rows, b_cols): (usize, usize),
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (m, k) = if trans_a { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (kb, n) = if trans_b { (b_cols, b_rows) } else { (b_rows, b_cols) };
    assert_eq!(k, kb, "inner dimensions");
    assert!(a.len() >= a_rows * a_cols && b.len() >= b_rows * b_cols);
    assert!(c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, a_cols) } else { (a_cols, 1) };
    let (rsb, csb) = if trans_b { (1, b_cols) } else { (b_cols, 1) };
    gemm(m, k, n, a, rsa, csa, b, rsb, csb, c, n, 1, beta);
}

/// Strided GEMM, `C = op(A) op(B) + beta C`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm C out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm A out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm B out of bounds");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution on one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn rows_per_band(&self) -> usize {
        (COL_TILE_ELEMS / (self.patch_len() * self.out_width()).max(1)).max(1)
    }
}

/// Fills `cols` (`patch_len × band_len`) for output rows `oh0..oh1`.
fn im2col(x: &[f64], g: &ConvGeometry, oh0: usize, oh1: usize, cols: &mut [f64]) {
    let ow_n = g.out_width();
    let band = (oh1 - oh0) * ow_n;
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * band..(row + 1) * band];
                for oh in oh0..oh1 {
                    let line = &mut dst[(oh - oh0) * ow_n..(oh - oh0 + 1) * ow_n];
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, out) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        *out = if iw >= 0 && iw < g.width as isize {
                            src[iw as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into the input gradient; inverse layout of [`im2col`].
fn col2im(cols: &[f64], g: &ConvGeometry, oh0: usize, oh1: usize, dx: &mut [f64]) {
    let ow_n = g.out_width();
    let band = (oh1 - oh0) * ow_n;
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * band..(row + 1) * band];
                for oh in oh0..oh1 {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let line = &src[(oh - oh0) * ow_n..(oh - oh0 + 1) * ow_n];
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, v) in line.iter().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn bands(g: &ConvGeometry) -> impl Iterator<Item = (usize, usize)> {
    let oh_n = g.out_height();
    let step = g.rows_per_band();
    (0..oh_n)
        .step_by(step)
        .map(move |oh0| (oh0, (oh0 + step).min(oh_n)))
}

fn conv_forward_sample(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeometry, out: &mut [f64]) {
    let (cout, patch) = (g.out_channels, g.patch_len());
    let plane = g.out_height() * g.out_width();
    if g.is_pointwise() {
        gemm(cout, patch, plane, w, patch, 1, x, plane, 1, out, plane, 1, 0.0);
    } else {
        let mut cols = Vec::new();
        for (oh0, oh1) in bands(g) {
            let band = (oh1 - oh0) * g.out_width();
            cols.resize(patch * band, 0.0);
            im2col(x, g, oh0, oh1, &mut cols);
            let dst = &mut out[oh0 * g.out_width()..];
            gemm(cout, patch, band, w, patch, 1, &cols, band, 1, dst, plane, 1, 0.0);
        }
    }
    if let Some(b) = bias {
        for (co, bv) in b.iter().enumerate() {
            for v in &mut out[co * plane..(co + 1) * plane] {
                *v += bv;
            }
        }
    }
}

/// Batched convolution forward. `x` is `[n, C, H, W]`, `w` is `[Co, C, k, k]`.
pub fn conv2d_forward(x: &[f64], n: usize, w: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * g.out_height() * g.out_width();
    let mut out = vec![0.0; n * out_len];
    out.par_chunks_mut(out_len)
        .zip(x.par_chunks(in_len))
        .for_each(|(o, xs)| conv_forward_sample(xs, w, bias, g, o));
    debug_assert_eq!(x.len(), n * in_len);
    out
}

/// Gradients of a batched convolution.
pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

fn conv_backward_sample(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeometry,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (cout, patch) = (g.out_channels, g.patch_len());
    let plane = g.out_height() * g.out_width();
    let mut dx = want_dx.then(|| vec![0.0; g.in_channels * g.height * g.width]);
    let mut dw = want_dw.then(|| vec![0.0; cout * patch]);
    if g.is_pointwise() {
        if let Some(dw) = dw.as_mut() {
            // dW = dY · Xᵀ
            gemm(cout, plane, patch, dy, plane, 1, x, 1, plane, dw, patch, 1, 0.0);
        }
        if let Some(dx) = dx.as_mut() {
            // dX = Wᵀ · dY
            gemm(patch, cout, plane, w, 1, patch, dy, plane, 1, dx, plane, 1, 0.0);
        }
        return (dx, dw);
    }
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    for (oh0, oh1) in bands(g) {
        let band = (oh1 - oh0) * g.out_width();
        let dy_band = &dy[oh0 * g.out_width()..];
        if let Some(dw) = dw.as_mut() {
            cols.resize(patch * band, 0.0);
            im2col(x, g, oh0, oh1, &mut cols);
            gemm(cout, band, patch, dy_band, plane, 1, &cols, 1, band, dw, patch, 1, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            dcols.resize(patch * band, 0.0);
            gemm(patch, cout, band, w, 1, patch, dy_band, plane, 1, &mut dcols, band, 1, 0.0);
            col2im(&dcols, g, oh0, oh1, dx);
        }
    }
    (dx, dw)
}

/// Batched convolution backward. Weight and bias gradients are summed over
/// samples in sample order, so the result does not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    n: usize,
    w: &[f64],
    dy: &[f64],
    g: &ConvGeometry,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> ConvGrads {
    let in_len = g.in_channels * g.height * g.width;
    let plane = g.out_height() * g.out_width();
    let out_len = g.out_channels * plane;
    let per_sample: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| {
            conv_backward_sample(
                &x[i * in_len..(i + 1) * in_len],
                w,
                &dy[i * out_len..(i + 1) * out_len],
                g,
                want_dx,
                want_dw,
            )
        })
        .collect();

    let mut dx = want_dx.then(|| Vec::with_capacity(n * in_len));
    let mut dw: Option<Vec<f64>> = None;
    for (sdx, sdw) in per_sample {
        if let (Some(acc), Some(s)) = (dx.as_mut(), sdx) {
            acc.extend_from_slice(&s);
        }
        if let Some(s) = sdw {
            match dw.as_mut() {
                Some(acc) => acc.iter_mut().zip(&s).for_each(|(a, b)| *a += b),
                None => dw = Some(s),
            }
        }
    }
    let db = want_db.then(|| {
        let mut db = vec![0.0; g.out_channels];
        for i in 0..n {
            for (co, acc) in db.iter_mut().enumerate() {
                let start = i * out_len + co * plane;
                *acc += dy[start..start + plane].iter().sum::<f64>();
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}
