use super::kernels::{self, ConvGeometry};
use super::{BackwardArgs, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

fn same_shape(tape: &Tape, a: Var, b: Var, op: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn scalar_of(tape: &Tape, s: Var, op: &str) -> Result<f64> {
    tape.value(s)
        .item()
        .map_err(|_| Error::shape(format!("{op}: expected a scalar, got {:?}", tape.shape(s))))
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// Pixel-shuffle index map: output `(n, c, r·h+dy, r·w+dx)` reads input
/// `(n, c·r² + dy·r + dx, h, w)`.
fn shuffle_source(shape_in: &[usize], r: usize, out_idx: usize) -> usize {
    let (c_in, h, w) = (shape_in[1], shape_in[2], shape_in[3]);
    let c_out = c_in / (r * r);
    let (oh, ow) = (h * r, w * r);
    let x = out_idx % ow;
    let y = (out_idx / ow) % oh;
    let c = (out_idx / (ow * oh)) % c_out;
    let n = out_idx / (ow * oh * c_out);
    let ci = c * r * r + (y % r) * r + (x % r);
    ((n * c_in + ci) * h + y / r) * w + x / r
}

/// Rearranges `[N, C·r², H, W]` into `[N, C, r·H, r·W]`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::shape(format!(
            "pixel_shuffle: {c} channels not divisible by r² = {}",
            r * r
        )));
    }
    let shape = [n, c / (r * r), h * r, w * r];
    let src = x.data();
    Ok(Tensor::from_fn(&shape, |i| src[shuffle_source(x.shape(), r, i)]))
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(y: &Tensor, r: usize) -> Result<Tensor> {
    let (n, c, h, w) = y.dims4()?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::shape(format!(
            "pixel_unshuffle: {h}×{w} not divisible by {r}"
        )));
    }
    let in_shape = [n, c * r * r, h / r, w / r];
    let mut out = vec![0.0; y.len()];
    for (i, v) in y.data().iter().enumerate() {
        out[shuffle_source(&in_shape, r, i)] = *v;
    }
    Tensor::new(&in_shape, out)
}

/// Per-batch-statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl Tape {
    fn unary(
        &mut self,
        op: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + 'static,
    ) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(
            op,
            out,
            &[a],
            Box::new(move |args: &BackwardArgs| {
                let x = args.inputs[0].data();
                let y = args.output.data();
                let data = args
                    .grad
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * df(x[i], y[i]))
                    .collect();
                vec![Some(Tensor::from_parts(args.grad.shape().to_vec(), data))]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(
            "add",
            out,
            &[a, b],
            Box::new(|args: &BackwardArgs| vec![Some(args.grad.clone()), Some(args.grad.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(
            "sub",
            out,
            &[a, b],
            Box::new(|args: &BackwardArgs| {
                vec![Some(args.grad.clone()), Some(args.grad.map(|g| -g))]
            }),
        )
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(
            "mul",
            out,
            &[a, b],
            Box::new(|args: &BackwardArgs| {
                let da = args.needs[0].then(|| zip_map(args.grad, args.inputs[1], |g, y| g * y));
                let db = args.needs[1].then(|| zip_map(args.grad, args.inputs[0], |g, x| g * x));
                vec![da, db]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.push(
            "scale",
            out,
            &[a],
            Box::new(move |args: &BackwardArgs| vec![Some(args.grad.map(|g| g * factor))]),
        )
    }

    /// `s · a` for a scalar variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = scalar_of(self, s, "scale_by")?;
        let out = self.value(a).map(|x| x * sv);
        self.push(
            "scale_by",
            out,
            &[a, s],
            Box::new(move |args: &BackwardArgs| {
                let da = args.needs[0].then(|| args.grad.map(|g| g * sv));
                let ds = args.needs[1].then(|| {
                    let dot = args
                        .grad
                        .data()
                        .iter()
                        .zip(args.inputs[0].data())
                        .map(|(g, x)| g * x)
                        .sum::<f64>();
                    Tensor::from_parts(args.inputs[1].shape().to_vec(), vec![dot])
                });
                vec![da, ds]
            }),
        )
    }

    /// `a / s` for a scalar variable `s`.
    pub fn div_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = scalar_of(self, s, "div_by")?;
        let out = self.value(a).map(|x| x / sv);
        self.push(
            "div_by",
            out,
            &[a, s],
            Box::new(move |args: &BackwardArgs| {
                let da = args.needs[0].then(|| args.grad.map(|g| g / sv));
                let ds = args.needs[1].then(|| {
                    let dot = args
                        .grad
                        .data()
                        .iter()
                        .zip(args.inputs[0].data())
                        .map(|(g, x)| g * x)
                        .sum::<f64>();
                    Tensor::from_parts(args.inputs[1].shape().to_vec(), vec![-dot / (sv * sv)])
                });
                vec![da, ds]
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let shape = self.shape(a).to_vec();
        self.push(
            "sum",
            out,
            &[a],
            Box::new(move |args: &BackwardArgs| {
                vec![Some(Tensor::full(&shape, args.grad.data()[0]))]
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let count = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / count)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let original = self.shape(a).to_vec();
        self.push(
            "reshape",
            out,
            &[a],
            Box::new(move |args: &BackwardArgs| {
                vec![Some(Tensor::from_parts(original.clone(), args.grad.data().to_vec()))]
            }),
        )
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(format!("matmul needs rank-2 inputs, got {sa:?} and {sb:?}")));
        }
        let a3 = self.reshape(a, &[1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, &[1, sb[0], sb[1]])?;
        let c3 = self.bmm(a3, b3, trans_a, trans_b)?;
        let cs = self.shape(c3).to_vec();
        self.reshape(c3, &cs[1..])
    }

    /// Batched matrix product over the leading axis of two rank-3 tensors.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[ba, ar, ac], &[bb, br, bc]) = (&sa[..], &sb[..]) else {
            return Err(Error::shape(format!("bmm needs rank-3 inputs, got {sa:?} and {sb:?}")));
        };
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if ba != bb || k != kb {
            return Err(Error::shape(format!(
                "matmul: incompatible shapes {sa:?}{} and {sb:?}{}",
                if trans_a { "ᵀ" } else { "" },
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let (la, lb) = (ar * ac, br * bc);
        let mut out = vec![0.0; ba * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..ba {
                kernels::matmul_into(
                    &av[i * la..(i + 1) * la],
                    (ar, ac),
                    trans_a,
                    &bv[i * lb..(i + 1) * lb],
                    (br, bc),
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        self.push(
            "matmul",
            Tensor::from_parts(vec![ba, m, n], out),
            &[a, b],
            Box::new(move |args: &BackwardArgs| {
                let (av, bv, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
                let da = args.needs[0].then(|| {
                    let mut da = vec![0.0; ba * la];
                    for i in 0..ba {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * lb..(i + 1) * lb];
                        let dst = &mut da[i * la..(i + 1) * la];
                        if trans_a {
                            kernels::matmul_into(bi, (br, bc), trans_b, gi, (m, n), true, dst, 0.0);
                        } else {
                            kernels::matmul_into(gi, (m, n), false, bi, (br, bc), !trans_b, dst, 0.0);
                        }
                    }
                    Tensor::from_parts(vec![ba, ar, ac], da)
                });
                let db = args.needs[1].then(|| {
                    let mut db = vec![0.0; ba * lb];
                    for i in 0..ba {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * la..(i + 1) * la];
                        let dst = &mut db[i * lb..(i + 1) * lb];
                        if trans_b {
                            kernels::matmul_into(gi, (m, n), true, ai, (ar, ac), trans_a, dst, 0.0);
                        } else {
                            kernels::matmul_into(ai, (ar, ac), !trans_a, gi, (m, n), false, dst, 0.0);
                        }
                    }
                    Tensor::from_parts(vec![ba, br, bc], db)
                });
                vec![da, db]
            }),
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..len {
                    let e = (x[at(i)] - max).exp();
                    y[at(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    y[at(i)] /= total;
                }
            }
        }
        self.push(
            "softmax",
            Tensor::from_parts(shape.clone(), y),
            &[a],
            Box::new(move |args: &BackwardArgs| {
                let (y, g) = (args.output.data(), args.grad.data());
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * len + i) * inner + j;
                        let dot: f64 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..len {
                            dx[at(i)] = y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(shape.clone(), dx))]
            }),
        )
    }

    /// 2-D cross-correlation of `[N, Cin, H, W]` with `[Cout, Cin, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d: input has {cin} channels, kernel expects {wcin}"
            )));
        }
        if kh != kw {
            return Err(Error::shape(format!("conv2d: non-square kernel {kh}×{kw}")));
        }
        if stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::shape(format!(
                "conv2d: {h}×{wd} input too small for k={kh}, padding={padding}, stride={stride}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!(
                    "conv2d: bias shape {:?}, expected [{cout}]",
                    self.shape(b)
                )));
            }
        }
        let g = ConvGeometry {
            in_channels: cin,
            out_channels: cout,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &g,
        );
        let out = Tensor::from_parts(vec![n, cout, g.out_height(), g.out_width()], out);
        let inputs: Vec<Var> = [Some(x), Some(w), bias].into_iter().flatten().collect();
        self.push(
            "conv2d",
            out,
            &inputs,
            Box::new(move |args: &BackwardArgs| {
                let want_db = args.needs.get(2).copied().unwrap_or(false);
                let grads = kernels::conv2d_backward(
                    args.inputs[0].data(),
                    n,
                    args.inputs[1].data(),
                    args.grad.data(),
                    &g,
                    args.needs[0],
                    args.needs[1],
                    want_db,
                );
                let mut out = vec![
                    grads.dx.map(|d| Tensor::from_parts(args.inputs[0].shape().to_vec(), d)),
                    grads.dw.map(|d| Tensor::from_parts(args.inputs[1].shape().to_vec(), d)),
                ];
                if args.inputs.len() == 3 {
                    out.push(grads.db.map(|d| Tensor::from_parts(vec![g.out_channels], d)));
                }
                out
            }),
        )
    }

    /// Max pooling with kernel and stride `p`. Ties route the gradient to the
    /// first maximum in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, p: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::shape(format!(
                "max_pool2d: {h}×{w} not divisible by pool size {p}"
            )));
        }
        let (oh, ow) = (h / p, w / p);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + y * p * w + xx * p;
                    for dy in 0..p {
                        for dx in 0..p {
                            let idx = base + (y * p + dy) * w + xx * p + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let in_shape = self.shape(x).to_vec();
        self.push(
            "max_pool2d",
            Tensor::from_parts(vec![n, c, oh, ow], out),
            &[x],
            Box::new(move |args: &BackwardArgs| {
                let mut dx = Tensor::zeros(&in_shape);
                let d = dx.data_mut();
                for (g, &i) in args.grad.data().iter().zip(&argmax) {
                    d[i] += g;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Nearest-neighbour upsampling by integer factors.
    pub fn resize_nearest(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if height < h || width < w || !height.is_multiple_of(h) || !width.is_multiple_of(w) {
            return Err(Error::Param(format!(
                "resize_nearest: {h}×{w} → {height}×{width} is not an integer upscale"
            )));
        }
        let (sy, sx) = (height / h, width / w);
        let src = self.value(x).data();
        let out = Tensor::from_fn(&[n, c, height, width], |i| {
            let xx = i % width;
            let y = (i / width) % height;
            let plane = i / (width * height);
            src[(plane * h + y / sy) * w + xx / sx]
        });
        let in_shape = self.shape(x).to_vec();
        self.push(
            "resize_nearest",
            out,
            &[x],
            Box::new(move |args: &BackwardArgs| {
                let mut dx = Tensor::zeros(&in_shape);
                let d = dx.data_mut();
                for (i, g) in args.grad.data().iter().enumerate() {
                    let xx = i % width;
                    let y = (i / width) % height;
                    let plane = i / (width * height);
                    d[(plane * h + y / sy) * w + xx / sx] += g;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Zero-pads the bottom and right edges of a feature map.
    pub fn pad2d(&mut self, x: Var, bottom: usize, right: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if bottom == 0 && right == 0 {
            return Ok(x);
        }
        let (ph, pw) = (h + bottom, w + right);
        let src = self.value(x).data();
        let out = Tensor::from_fn(&[n, c, ph, pw], |i| {
            let xx = i % pw;
            let y = (i / pw) % ph;
            let plane = i / (pw * ph);
            if y < h && xx < w {
                src[(plane * h + y) * w + xx]
            } else {
                0.0
            }
        });
        self.push(
            "pad2d",
            out,
            &[x],
            Box::new(move |args: &BackwardArgs| {
                let g = args.grad.data();
                let dx = Tensor::from_fn(&[n, c, h, w], |i| {
                    let xx = i % w;
                    let y = (i / w) % h;
                    let plane = i / (w * h);
                    g[(plane * ph + y) * pw + xx]
                });
                vec![Some(dx)]
            }),
        )
    }

    /// Keeps the top-left `height × width` window of a feature map.
    pub fn crop2d(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if height > h || width > w || height == 0 || width == 0 {
            return Err(Error::shape(format!("crop2d: cannot crop {h}×{w} to {height}×{width}")));
        }
        if height == h && width == w {
            return Ok(x);
        }
        let src = self.value(x).data();
        let out = Tensor::from_fn(&[n, c, height, width], |i| {
            let xx = i % width;
            let y = (i / width) % height;
            let plane = i / (width * height);
            src[(plane * h + y) * w + xx]
        });
        self.push(
            "crop2d",
            out,
            &[x],
            Box::new(move |args: &BackwardArgs| {
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let d = dx.data_mut();
                for (i, g) in args.grad.data().iter().enumerate() {
                    let xx = i % width;
                    let y = (i / width) % height;
                    let plane = i / (width * height);
                    d[(plane * h + y) * w + xx] = *g;
                }
                vec![Some(dx)]
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "sigmoid",
            a,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(
            "leaky_relu",
            a,
            move |x| if x >= 0.0 { x } else { slope * x },
            move |x, _| if x >= 0.0 { 1.0 } else { slope },
        )
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(
            "clamp",
            a,
            move |x| x.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.unary("one_minus", a, |x| 1.0 - x, |_, _| -1.0)
    }

    /// Parametric ReLU with one learnable slope per channel (axis 1).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(slope) != [shape[1]] {
            return Err(Error::shape(format!(
                "prelu: slope shape {:?} does not match channels of {shape:?}",
                self.shape(slope)
            )));
        }
        let (_, c, inner) = axis_extents(&shape, 1);
        let a = self.value(slope).data().to_vec();
        let xv = self.value(x).data();
        let out = Tensor::from_fn(&shape, |i| {
            let v = xv[i];
            if v >= 0.0 {
                v
            } else {
                a[(i / inner) % c] * v
            }
        });
        self.push(
            "prelu",
            out,
            &[x, slope],
            Box::new(move |args: &BackwardArgs| {
                let (xv, a, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
                let dx = args.needs[0].then(|| {
                    Tensor::from_fn(args.inputs[0].shape(), |i| {
                        if xv[i] >= 0.0 {
                            g[i]
                        } else {
                            a[(i / inner) % c] * g[i]
                        }
                    })
                });
                let da = args.needs[1].then(|| {
                    let mut da = vec![0.0; c];
                    for (i, (&x, &gi)) in xv.iter().zip(g).enumerate() {
                        if x < 0.0 {
                            da[(i / inner) % c] += gi * x;
                        }
                    }
                    Tensor::from_parts(vec![c], da)
                });
                vec![dx, da]
            }),
        )
    }

    /// Adds `bias[j]` to column `j` of an `[N, G]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || self.shape(bias) != [shape[1]] {
            return Err(Error::shape(format!(
                "add_bias: bias {:?} does not match {shape:?}",
                self.shape(bias)
            )));
        }
        let cols = shape[1];
        let (xv, bv) = (self.value(x).data(), self.value(bias).data());
        let out = Tensor::from_fn(&shape, |i| xv[i] + bv[i % cols]);
        self.push(
            "add_bias",
            out,
            &[x, bias],
            Box::new(move |args: &BackwardArgs| {
                let g = args.grad.data();
                let db = args.needs[1].then(|| {
                    let mut db = vec![0.0; cols];
                    for (i, v) in g.iter().enumerate() {
                        db[i % cols] += v;
                    }
                    Tensor::from_parts(vec![cols], db)
                });
                vec![Some(args.grad.clone()), db]
            }),
        )
    }

    /// Batch normalization with batch statistics over every axis but 1.
    /// Returns the output and the (biased) batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(gamma) != [shape[1]] || self.shape(beta) != [shape[1]] {
            return Err(Error::shape(format!("batch_norm: channel mismatch for {shape:?}")));
        }
        let (n, c, inner) = axis_extents(&shape, 1);
        let count = (n * inner) as f64;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (ch, (mu, sigma2)) in mean.iter_mut().zip(var.iter_mut()).enumerate() {
            let values = || (0..n).flat_map(move |s| (0..inner).map(move |j| (s * c + ch) * inner + j));
            *mu = values().map(|i| xv[i]).sum::<f64>() / count;
            *sigma2 = values().map(|i| (xv[i] - *mu).powi(2)).sum::<f64>() / count;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat = Tensor::from_fn(&shape, |i| {
            let ch = (i / inner) % c;
            (xv[i] - mean[ch]) * inv_std[ch]
        });
        let out = Tensor::from_fn(&shape, |i| {
            let ch = (i / inner) % c;
            gv[ch] * xhat.data()[i] + bv[ch]
        });
        let stats = BatchStats {
            mean: Tensor::from_parts(vec![c], mean),
            var: Tensor::from_parts(vec![c], var),
        };
        let y = self.push(
            "batch_norm",
            out,
            &[x, gamma, beta],
            Box::new(move |args: &BackwardArgs| {
                let (g, gv, xh) = (args.grad.data(), args.inputs[1].data(), xhat.data());
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (&gi, &xi)) in g.iter().zip(xh).enumerate() {
                    let ch = (i / inner) % c;
                    sum_g[ch] += gi;
                    sum_gx[ch] += gi * xi;
                }
                let dx = args.needs[0].then(|| {
                    Tensor::from_fn(args.inputs[0].shape(), |i| {
                        let ch = (i / inner) % c;
                        gv[ch] * inv_std[ch] / count
                            * (count * g[i] - sum_g[ch] - xh[i] * sum_gx[ch])
                    })
                });
                vec![
                    dx,
                    Some(Tensor::from_parts(vec![c], sum_gx)),
                    Some(Tensor::from_parts(vec![c], sum_g)),
                ]
            }),
        )?;
        Ok((y, stats))
    }

    /// Batch normalization with fixed statistics (evaluation mode).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Tensor,
        var: &Tensor,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2
            || self.shape(gamma) != [shape[1]]
            || self.shape(beta) != [shape[1]]
            || mean.shape() != [shape[1]]
            || var.shape() != [shape[1]]
        {
            return Err(Error::shape(format!("batch_norm: channel mismatch for {shape:?}")));
        }
        let (_, c, inner) = axis_extents(&shape, 1);
        let inv_std: Vec<f64> = var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = mean.data().to_vec();
        let (xv, gv, bv) = (
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let out = Tensor::from_fn(&shape, |i| {
            let ch = (i / inner) % c;
            gv[ch] * (xv[i] - mean[ch]) * inv_std[ch] + bv[ch]
        });
        self.push(
            "batch_norm_eval",
            out,
            &[x, gamma, beta],
            Box::new(move |args: &BackwardArgs| {
                let (g, xv, gv) = (args.grad.data(), args.inputs[0].data(), args.inputs[1].data());
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (i, (&gi, &xi)) in g.iter().zip(xv).enumerate() {
                    let ch = (i / inner) % c;
                    dgamma[ch] += gi * (xi - mean[ch]) * inv_std[ch];
                    dbeta[ch] += gi;
                }
                let dx = args.needs[0].then(|| {
                    Tensor::from_fn(args.inputs[0].shape(), |i| {
                        let ch = (i / inner) % c;
                        g[i] * gv[ch] * inv_std[ch]
                    })
                });
                vec![
                    dx,
                    Some(Tensor::from_parts(vec![c], dgamma)),
                    Some(Tensor::from_parts(vec![c], dbeta)),
                ]
            }),
        )
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = pixel_shuffle(self.value(x), r)?;
        self.push(
            "pixel_shuffle",
            out,
            &[x],
            Box::new(move |args: &BackwardArgs| {
                vec![Some(pixel_unshuffle(args.grad, r).expect("shape checked in forward"))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_example() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let col = tape.constant(Tensor::new(&[2, 1], vec![2.0, 3.0]).unwrap());
        let y = tape.matmul(eye, col).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0]);

        let a = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let ones = tape.constant(Tensor::ones(&[2, 1]));
        let y = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.shape(y), &[2, 1]);
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
        assert!(tape.matmul_t(a, b, false, true).is_ok());
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::new(&[2], vec![1f64.ln(), 3f64.ln()]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3], vec![1000.0, 1001.0, -1000.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv_scalar_kernel_doubles_values() {
        let mut tape = Tape::new();
        let xv = Tensor::from_fn(&[1, 1, 3, 4], |i| i as f64 - 5.0);
        let x = tape.constant(xv.clone());
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), &xv.map(|v| 2.0 * v));
    }

    #[test]
    fn conv_averaging_kernel_preserves_constant_interior() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 6, 6], 3.5));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        let v = tape.value(y);
        for r in 1..5 {
            for c in 1..5 {
                assert!((v.at4(0, 0, r, c) - 3.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_output_size_and_channel_check() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 7, 8]));
        let w = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 4, 4]);
        let bad = tape.constant(Tensor::zeros(&[3, 5, 3, 3]));
        assert!(matches!(tape.conv2d(x, bad, None, 1, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn max_pool_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.max_pool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let c = tape.constant(Tensor::full(&[1, 2, 8, 4], 1.5));
        let y = tape.max_pool2d(c, 4).unwrap();
        assert_eq!(tape.value(y), &Tensor::full(&[1, 2, 2, 1], 1.5));

        let odd = tape.constant(Tensor::zeros(&[1, 1, 5, 4]));
        assert!(matches!(tape.max_pool2d(odd, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn max_pool_ties_route_to_first() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = tape.max_pool2d(x, 2).unwrap();
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn resize_nearest_replicates_blocks() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 1, 1], vec![7.0]).unwrap());
        let y = tape.resize_nearest(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[7.0; 4]);

        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.resize_nearest(x, 4, 4).unwrap();
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(tape.value(y).data(), &expected);
        assert!(matches!(tape.resize_nearest(x, 5, 4), Err(Error::Param(_))));
    }

    #[test]
    fn pixel_shuffle_single_pixel_order() {
        let x = Tensor::new(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(pixel_shuffle(&Tensor::zeros(&[1, 3, 2, 2]), 2).is_err());
    }

    #[test]
    fn pixel_shuffle_constant_and_inverse() {
        let c = Tensor::full(&[2, 8, 3, 3], 0.25);
        assert_eq!(pixel_shuffle(&c, 2).unwrap(), Tensor::full(&[2, 2, 6, 6], 0.25));
        let x = Tensor::from_fn(&[2, 18, 2, 3], |i| i as f64);
        assert_eq!(pixel_unshuffle(&pixel_shuffle(&x, 3).unwrap(), 3).unwrap(), x);
    }

    #[test]
    fn pad_then_crop_roundtrips() {
        let mut tape = Tape::new();
        let xv = Tensor::from_fn(&[1, 2, 3, 5], |i| i as f64);
        let x = tape.constant(xv.clone());
        let p = tape.pad2d(x, 1, 3).unwrap();
        assert_eq!(tape.shape(p), &[1, 2, 4, 8]);
        let c = tape.crop2d(p, 3, 5).unwrap();
        assert_eq!(tape.value(c), &xv);
    }

    #[test]
    fn prelu_identity_and_relu() {
        let mut tape = Tape::new();
        let pos = tape.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64));
        let a = tape.constant(Tensor::full(&[2], 0.25));
        let y = tape.prelu(pos, a).unwrap();
        assert_eq!(tape.value(y), tape.value(pos));

        let mixed = tape.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64 - 4.0));
        let zero = tape.constant(Tensor::zeros(&[2]));
        let y = tape.prelu(mixed, zero).unwrap();
        let relu = tape.value(mixed).map(|v| v.max(0.0));
        assert_eq!(tape.value(y), &relu);
    }
}
