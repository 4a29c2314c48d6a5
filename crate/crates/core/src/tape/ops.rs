//! Tensor operations and their backward rules.

use super::{BackwardCtx, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ctx: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape(), ctx));
    }
    Ok(())
}

/// Output positions whose receptive field stays inside the padded input:
/// `o` such that `0 <= o*stride + k - pad < extent`. Returns `[lo, hi)`.
fn valid_range(k: usize, pad: usize, stride: usize, extent: usize, out_extent: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi_numer = extent + pad;
    if hi_numer <= k {
        return (0, 0);
    }
    let hi = ((hi_numer - k - 1) / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "add")?;
        let value = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| *a + *b)
            .collect();
        Ok(Tensor::op(
            self.shape().to_vec(),
            value,
            vec![self, other],
            Box::new(|ctx: &BackwardCtx<T>| {
                vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "sub")?;
        let value = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| *a - *b)
            .collect();
        Ok(Tensor::op(
            self.shape().to_vec(),
            value,
            vec![self, other],
            Box::new(|ctx: &BackwardCtx<T>| {
                vec![
                    Some(ctx.grad.to_vec()),
                    Some(ctx.grad.iter().map(|g| -*g).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "mul")?;
        let value = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| *a * *b)
            .collect();
        Ok(Tensor::op(
            self.shape().to_vec(),
            value,
            vec![self, other],
            Box::new(|ctx: &BackwardCtx<T>| {
                let a = ctx.pval(0);
                let b = ctx.pval(1);
                vec![
                    Some(ctx.grad.iter().zip(b.iter()).map(|(g, b)| *g * *b).collect()),
                    Some(ctx.grad.iter().zip(a.iter()).map(|(g, a)| *g * *a).collect()),
                ]
            }),
        ))
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape(self, other, "div")?;
        let value = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| *a / *b)
            .collect();
        Ok(Tensor::op(
            self.shape().to_vec(),
            value,
            vec![self, other],
            Box::new(|ctx: &BackwardCtx<T>| {
                let a = ctx.pval(0);
                let b = ctx.pval(1);
                let ga = ctx
                    .grad
                    .iter()
                    .zip(b.iter())
                    .map(|(g, b)| *g / *b)
                    .collect();
                let gb = ctx
                    .grad
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(g, (a, b))| -*g * *a / (*b * *b))
                    .collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let value = self.data().iter().map(|a| *a + c).collect();
        Tensor::op(
            self.shape().to_vec(),
            value,
            vec![self],
            Box::new(|ctx: &BackwardCtx<T>| vec![Some(ctx.grad.to_vec())]),
        )
    }

    pub fn mul_scalar(&self, c: T) -> Tensor<T> {
        let value = self.data().iter().map(|a| *a * c).collect();
        Tensor::op(
            self.shape().to_vec(),
            value,
            vec![self],
            Box::new(move |ctx: &BackwardCtx<T>| {
                vec![Some(ctx.grad.iter().map(|g| *g * c).collect())]
            }),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.mul_scalar(-T::one())
    }

    pub fn exp(&self) -> Tensor<T> {
        let value: Vec<T> = self.data().iter().map(|a| a.exp()).collect();
        Tensor::op(
            self.shape().to_vec(),
            value,
            vec![self],
            Box::new(|ctx: &BackwardCtx<T>| {
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(ctx.out.iter())
                        .map(|(g, y)| *g * *y)
                        .collect(),
                )]
            }),
        )
    }

    pub fn sqrt(&self) -> Tensor<T> {
        let value: Vec<T> = self.data().iter().map(|a| a.sqrt()).collect();
        Tensor::op(
            self.shape().to_vec(),
            value,
            vec![self],
            Box::new(|ctx: &BackwardCtx<T>| {
                let half = T::from_f64_lossy(0.5);
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(ctx.out.iter())
                        .map(|(g, y)| *g * half / *y)
                        .collect(),
                )]
            }),
        )
    }

    pub fn silu(&self) -> Tensor<T> {
        let value: Vec<T> = self.data().iter().map(|x| *x * sigmoid(*x)).collect();
        Tensor::op(
            self.shape().to_vec(),
            value,
            vec![self],
            Box::new(|ctx: &BackwardCtx<T>| {
                let x = ctx.pval(0);
                vec![Some(
                    ctx.grad
                        .iter()
                        .zip(x.iter())
                        .map(|(g, x)| {
                            let s = sigmoid(*x);
                            *g * s * (T::one() + *x * (T::one() - s))
                        })
                        .collect(),
                )]
            }),
        )
    }

    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().fold(T::zero(), |acc, v| acc + *v);
        let n = self.numel();
        Tensor::op(
            vec![1],
            vec![total],
            vec![self],
            Box::new(move |ctx: &BackwardCtx<T>| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        self.sum().mul_scalar(T::one() / T::from_f64_lossy(n as f64))
    }

    /// `[N, C] + [C]`, broadcast over rows.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c) = self.dims2("add_bias input")?;
        if bias.shape() != [c] {
            return Err(Error::shape(&[c], bias.shape(), "add_bias bias"));
        }
        let x = self.data();
        let b = bias.data();
        let mut value = Vec::with_capacity(n * c);
        for row in 0..n {
            for col in 0..c {
                value.push(x[row * c + col] + b[col]);
            }
        }
        drop(x);
        drop(b);
        Ok(Tensor::op(
            vec![n, c],
            value,
            vec![self, bias],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let mut gb = vec![T::zero(); c];
                for row in 0..n {
                    for col in 0..c {
                        gb[col] += ctx.grad[row * c + col];
                    }
                }
                vec![Some(ctx.grad.to_vec()), Some(gb)]
            }),
        ))
    }

    fn dims2(&self, ctx: &str) -> Result<(usize, usize)> {
        match self.shape() {
            [n, m] => Ok((*n, *m)),
            s => Err(Error::invalid(format!("{ctx}: expected 2-d, got {s:?}"))),
        }
    }

    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = self.dims2("matmul lhs")?;
        let (k2, n) = rhs.dims2("matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(&[m, k], &[k2, n], "matmul inner dim"));
        }
        let a = self.data();
        let b = rhs.data();
        let mut value = vec![T::zero(); m * n];
        for i in 0..m {
            for kk in 0..k {
                let av = a[i * k + kk];
                if av == T::zero() {
                    continue;
                }
                let brow = &b[kk * n..(kk + 1) * n];
                let orow = &mut value[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        drop(a);
        drop(b);
        Ok(Tensor::op(
            vec![m, n],
            value,
            vec![self, rhs],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let a = ctx.pval(0);
                let b = ctx.pval(1);
                // ga = g · bᵀ  [m,k]
                let mut ga = vec![T::zero(); m * k];
                for i in 0..m {
                    for j in 0..n {
                        let g = ctx.grad[i * n + j];
                        if g == T::zero() {
                            continue;
                        }
                        for kk in 0..k {
                            ga[i * k + kk] += g * b[kk * n + j];
                        }
                    }
                }
                // gb = aᵀ · g  [k,n]
                let mut gb = vec![T::zero(); k * n];
                for i in 0..m {
                    for kk in 0..k {
                        let av = a[i * k + kk];
                        if av == T::zero() {
                            continue;
                        }
                        for j in 0..n {
                            gb[kk * n + j] += av * ctx.grad[i * n + j];
                        }
                    }
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn transpose2d(&self) -> Result<Tensor<T>> {
        let (n, m) = self.dims2("transpose")?;
        let x = self.data();
        let mut value = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                value[j * n + i] = x[i * m + j];
            }
        }
        drop(x);
        Ok(Tensor::op(
            vec![m, n],
            value,
            vec![self],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let mut g = vec![T::zero(); n * m];
                for j in 0..m {
                    for i in 0..n {
                        g[i * m + j] = ctx.grad[j * n + i];
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(self.shape(), shape, "reshape"));
        }
        Ok(Tensor::op(
            shape.to_vec(),
            self.to_vec(),
            vec![self],
            Box::new(|ctx: &BackwardCtx<T>| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    /// Row-wise softmax on a 2-d tensor.
    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        let (n, m) = self.dims2("softmax")?;
        let x = self.data();
        let mut value = vec![T::zero(); n * m];
        for row in 0..n {
            let slice = &x[row * m..(row + 1) * m];
            let max = slice.iter().fold(T::neg_infinity(), |a, b| a.max(*b));
            let mut denom = T::zero();
            for (j, v) in slice.iter().enumerate() {
                let e = (*v - max).exp();
                value[row * m + j] = e;
                denom += e;
            }
            for j in 0..m {
                value[row * m + j] /= denom;
            }
        }
        drop(x);
        Ok(Tensor::op(
            vec![n, m],
            value,
            vec![self],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let mut g = vec![T::zero(); n * m];
                for row in 0..n {
                    let y = &ctx.out[row * m..(row + 1) * m];
                    let go = &ctx.grad[row * m..(row + 1) * m];
                    let dot = y
                        .iter()
                        .zip(go.iter())
                        .fold(T::zero(), |acc, (y, g)| acc + *y * *g);
                    for j in 0..m {
                        g[row * m + j] = y[j] * (go[j] - dot);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Row-wise log-softmax on a 2-d tensor.
    pub fn log_softmax_rows(&self) -> Result<Tensor<T>> {
        let (n, m) = self.dims2("log_softmax")?;
        let x = self.data();
        let mut value = vec![T::zero(); n * m];
        for row in 0..n {
            let slice = &x[row * m..(row + 1) * m];
            let max = slice.iter().fold(T::neg_infinity(), |a, b| a.max(*b));
            let lse = slice
                .iter()
                .fold(T::zero(), |acc, v| acc + (*v - max).exp())
                .ln()
                + max;
            for j in 0..m {
                value[row * m + j] = slice[j] - lse;
            }
        }
        drop(x);
        Ok(Tensor::op(
            vec![n, m],
            value,
            vec![self],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let mut g = vec![T::zero(); n * m];
                for row in 0..n {
                    let y = &ctx.out[row * m..(row + 1) * m];
                    let go = &ctx.grad[row * m..(row + 1) * m];
                    let gsum = go.iter().fold(T::zero(), |acc, g| acc + *g);
                    for j in 0..m {
                        g[row * m + j] = go[j] - y[j].exp() * gsum;
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// RMS normalization over the last dim of `[N, C]`, scaled by `gain`.
    pub fn rms_norm(&self, gain: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let (n, c) = self.dims2("rms_norm")?;
        if gain.shape() != [c] {
            return Err(Error::shape(&[c], gain.shape(), "rms_norm gain"));
        }
        let x = self.data();
        let g = gain.data();
        let cf = T::from_f64_lossy(c as f64);
        let mut value = vec![T::zero(); n * c];
        let mut rms = vec![T::zero(); n];
        for row in 0..n {
            let slice = &x[row * c..(row + 1) * c];
            let ms = slice.iter().fold(T::zero(), |acc, v| acc + *v * *v) / cf;
            let r = (ms + eps).sqrt();
            rms[row] = r;
            for col in 0..c {
                value[row * c + col] = slice[col] / r * g[col];
            }
        }
        drop(x);
        drop(g);
        Ok(Tensor::op(
            vec![n, c],
            value,
            vec![self, gain],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let x = ctx.pval(0);
                let gain = ctx.pval(1);
                let mut gx = vec![T::zero(); n * c];
                let mut gg = vec![T::zero(); c];
                for row in 0..n {
                    let r = rms[row];
                    let xs = &x[row * c..(row + 1) * c];
                    let gs = &ctx.grad[row * c..(row + 1) * c];
                    let mut inner = T::zero();
                    for col in 0..c {
                        inner += gs[col] * gain[col] * xs[col];
                        gg[col] += gs[col] * xs[col] / r;
                    }
                    let scale = inner / (cf * r * r * r);
                    for col in 0..c {
                        gx[row * c + col] = gs[col] * gain[col] / r - xs[col] * scale;
                    }
                }
                vec![Some(gx), Some(gg)]
            }),
        ))
    }

    /// 2-d convolution on `[Ci, H, W]` with kernel `[Co, Ci, kh, kw]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let (ci, h, w) = match self.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::invalid(format!("conv2d input must be 3-d, got {s:?}"))),
        };
        let (co, ci2, kh, kw) = match weight.shape() {
            [co, ci2, kh, kw] => (*co, *ci2, *kh, *kw),
            s => {
                return Err(Error::invalid(format!(
                    "conv2d weight must be 4-d, got {s:?}"
                )))
            }
        };
        if ci != ci2 {
            return Err(Error::shape(&[co, ci, kh, kw], weight.shape(), "conv2d"));
        }
        if bias.shape() != [co] {
            return Err(Error::shape(&[co], bias.shape(), "conv2d bias"));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let x = self.data();
        let wt = weight.data();
        let b = bias.data();
        let mut value = vec![T::zero(); co * oh * ow];
        for o in 0..co {
            value[o * oh * ow..(o + 1) * oh * ow].fill(b[o]);
        }
        for o in 0..co {
            let out = &mut value[o * oh * ow..(o + 1) * oh * ow];
            for i in 0..ci {
                let plane = &x[i * h * w..(i + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wt[((o * ci + i) * kh + ky) * kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (oy0, oy1) = valid_range(ky, pad, stride, h, oh);
                        let (ox0, ox1) = valid_range(kx, pad, stride, w, ow);
                        for oy in oy0..oy1 {
                            let y = oy * stride + ky - pad;
                            let src = &plane[y * w..(y + 1) * w];
                            let dst = &mut out[oy * ow..(oy + 1) * ow];
                            for ox in ox0..ox1 {
                                dst[ox] += wv * src[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
        drop(x);
        drop(wt);
        drop(b);
        Ok(Tensor::op(
            vec![co, oh, ow],
            value,
            vec![self, weight, bias],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let x = ctx.pval(0);
                let wt = ctx.pval(1);
                let mut gx = vec![T::zero(); ci * h * w];
                let mut gw = vec![T::zero(); co * ci * kh * kw];
                let mut gb = vec![T::zero(); co];
                for o in 0..co {
                    let gout = &ctx.grad[o * oh * ow..(o + 1) * oh * ow];
                    gb[o] = gout.iter().fold(gb[o], |acc, g| acc + *g);
                    for i in 0..ci {
                        let plane = &x[i * h * w..(i + 1) * h * w];
                        let gplane = &mut gx[i * h * w..(i + 1) * h * w];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wi = ((o * ci + i) * kh + ky) * kw + kx;
                                let wv = wt[wi];
                                let mut wacc = T::zero();
                                let (oy0, oy1) = valid_range(ky, pad, stride, h, oh);
                                let (ox0, ox1) = valid_range(kx, pad, stride, w, ow);
                                for oy in oy0..oy1 {
                                    let y = oy * stride + ky - pad;
                                    let grow = &gout[oy * ow..(oy + 1) * ow];
                                    let srow = &plane[y * w..(y + 1) * w];
                                    let drow = &mut gplane[y * w..(y + 1) * w];
                                    for ox in ox0..ox1 {
                                        let g = grow[ox];
                                        let xi = ox * stride + kx - pad;
                                        wacc += g * srow[xi];
                                        drow[xi] += g * wv;
                                    }
                                }
                                gw[wi] += wacc;
                            }
                        }
                    }
                }
                vec![Some(gx), Some(gw), Some(gb)]
            }),
        ))
    }

    /// Nearest-neighbour 2x upsampling of `[C, H, W]`.
    pub fn upsample_nearest2x(&self) -> Result<Tensor<T>> {
        let (c, h, w) = match self.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::invalid(format!("upsample input must be 3-d, got {s:?}"))),
        };
        let x = self.data();
        let (oh, ow) = (h * 2, w * 2);
        let mut value = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    value[(ch * oh + y) * ow + xx] = x[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        drop(x);
        Ok(Tensor::op(
            vec![c, oh, ow],
            value,
            vec![self],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let mut g = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            g[(ch * h + y / 2) * w + xx / 2] += ctx.grad[(ch * oh + y) * ow + xx];
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Rows `r0..r1` of a 2-d tensor.
    pub fn slice_rows(&self, r0: usize, r1: usize) -> Result<Tensor<T>> {
        let (n, m) = self.dims2("slice_rows")?;
        if r0 >= r1 || r1 > n {
            return Err(Error::invalid(format!(
                "slice_rows {r0}..{r1} out of bounds for {n} rows"
            )));
        }
        let value = self.data()[r0 * m..r1 * m].to_vec();
        Ok(Tensor::op(
            vec![r1 - r0, m],
            value,
            vec![self],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let mut g = vec![T::zero(); n * m];
                g[r0 * m..r1 * m].copy_from_slice(ctx.grad);
                vec![Some(g)]
            }),
        ))
    }

    /// Columns `c0..c1` of a 2-d tensor.
    pub fn slice_cols(&self, c0: usize, c1: usize) -> Result<Tensor<T>> {
        let (n, m) = self.dims2("slice_cols")?;
        if c0 >= c1 || c1 > m {
            return Err(Error::invalid(format!(
                "slice_cols {c0}..{c1} out of bounds for {m} cols"
            )));
        }
        let x = self.data();
        let width = c1 - c0;
        let mut value = Vec::with_capacity(n * width);
        for row in 0..n {
            value.extend_from_slice(&x[row * m + c0..row * m + c1]);
        }
        drop(x);
        Ok(Tensor::op(
            vec![n, width],
            value,
            vec![self],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let mut g = vec![T::zero(); n * m];
                for row in 0..n {
                    g[row * m + c0..row * m + c1]
                        .copy_from_slice(&ctx.grad[row * width..(row + 1) * width]);
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Concatenate 2-d tensors along columns.
    pub fn concat_cols(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols of zero tensors"));
        }
        let n = parts[0].dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, pm) = p.dims2("concat_cols")?;
            if pn != n {
                return Err(Error::shape(parts[0].shape(), p.shape(), "concat_cols"));
            }
            widths.push(pm);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(n * total);
        for row in 0..n {
            for (p, w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&p.data()[row * w..(row + 1) * w]);
            }
        }
        let widths_back = widths.clone();
        Ok(Tensor::op(
            vec![n, total],
            value,
            parts.iter().collect(),
            Box::new(move |ctx: &BackwardCtx<T>| {
                let mut grads: Vec<Option<Vec<T>>> = widths_back
                    .iter()
                    .map(|w| Some(vec![T::zero(); n * w]))
                    .collect();
                for row in 0..n {
                    let mut offset = 0;
                    for (gi, w) in widths_back.iter().enumerate() {
                        let dst = grads[gi].as_mut().unwrap();
                        dst[row * w..(row + 1) * w]
                            .copy_from_slice(&ctx.grad[row * total + offset..row * total + offset + w]);
                        offset += w;
                    }
                }
                grads
            }),
        ))
    }

    /// Stack 2-d tensors vertically.
    pub fn concat_rows(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows of zero tensors"));
        }
        let m = parts[0].dims2("concat_rows")?.1;
        let mut heights = Vec::with_capacity(parts.len());
        let mut value = Vec::new();
        for p in parts {
            let (pn, pm) = p.dims2("concat_rows")?;
            if pm != m {
                return Err(Error::shape(parts[0].shape(), p.shape(), "concat_rows"));
            }
            heights.push(pn);
            value.extend_from_slice(&p.data());
        }
        let total: usize = heights.iter().sum();
        Ok(Tensor::op(
            vec![total, m],
            value,
            parts.iter().collect(),
            Box::new(move |ctx: &BackwardCtx<T>| {
                let mut grads = Vec::with_capacity(heights.len());
                let mut offset = 0;
                for h in &heights {
                    grads.push(Some(ctx.grad[offset * m..(offset + h) * m].to_vec()));
                    offset += h;
                }
                grads
            }),
        ))
    }

    /// Rows of an embedding table selected by index (with duplicates).
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let (v, d) = self.dims2("gather_rows")?;
        for &i in ids {
            if i >= v {
                return Err(Error::invalid(format!(
                    "gather_rows index {i} out of bounds for table with {v} rows"
                )));
            }
        }
        let x = self.data();
        let mut value = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            value.extend_from_slice(&x[i * d..(i + 1) * d]);
        }
        drop(x);
        let ids_back = ids.to_vec();
        Ok(Tensor::op(
            vec![ids.len(), d],
            value,
            vec![self],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let mut g = vec![T::zero(); v * d];
                for (row, &i) in ids_back.iter().enumerate() {
                    for col in 0..d {
                        g[i * d + col] += ctx.grad[row * d + col];
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Divide every element by a `[1]` tensor.
    pub fn div_bcast(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        if s.shape() != [1] {
            return Err(Error::shape(&[1], s.shape(), "div_bcast divisor"));
        }
        let sv = s.item();
        let value = self.data().iter().map(|a| *a / sv).collect();
        Ok(Tensor::op(
            self.shape().to_vec(),
            value,
            vec![self, s],
            Box::new(|ctx: &BackwardCtx<T>| {
                let x = ctx.pval(0);
                let sv = ctx.pval(1)[0];
                let gx = ctx.grad.iter().map(|g| *g / sv).collect();
                let gs = ctx
                    .grad
                    .iter()
                    .zip(x.iter())
                    .fold(T::zero(), |acc, (g, x)| acc - *g * *x / (sv * sv));
                vec![Some(gx), Some(vec![gs])]
            }),
        ))
    }

    /// Sum of squared elements, as a `[1]` tensor.
    pub fn sum_squares(&self) -> Result<Tensor<T>> {
        Ok(self.mul(self)?.sum())
    }

    /// Dot product of two same-shape tensors, as a `[1]` tensor.
    pub fn dot(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.mul(other)?.sum())
    }

    /// Normalize to unit L2 norm (with a small epsilon inside the sqrt).
    pub fn l2_normalize(&self, eps: T) -> Result<Tensor<T>> {
        let norm = self.sum_squares()?.add_scalar(eps).sqrt();
        self.div_bcast(&norm)
    }
}
