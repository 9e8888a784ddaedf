//! Forward and backward kernels for the differentiable operations.
//!
//! Work is split across samples (or matrix rows); every reduction over the
//! batch runs in ascending sample order on one thread, which keeps results
//! bit-identical between parallel and sequential builds.

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        input: [usize; 3],
        filters: usize,
        kernel: [usize; 2],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [channels, height, width] = input;
        let [kh, kw] = kernel;
        if stride == 0 {
            return Err(Error::Config("convolution stride must be positive".into()));
        }
        let out = |size: usize, k: usize, dim: &str| -> Result<usize> {
            let span = size + 2 * pad;
            if span < k || (span - k) % stride != 0 {
                return Err(Error::Config(format!(
                    "convolution output {dim} is not integral: ({size} + 2*{pad} - {k}) / {stride} + 1"
                )));
            }
            Ok((span - k) / stride + 1)
        };
        let out_h = out(height, kh, "height")?;
        let out_w = out(width, kw, "width")?;
        Ok(Self {
            channels,
            height,
            width,
            filters,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn out_len(&self) -> usize {
        self.filters * self.positions()
    }

    /// Unfold one sample into a `[C*kh*kw, out_h*out_w]` patch matrix.
    fn im2col(&self, x: &[f32], col: &mut [f32]) {
        let p = self.positions();
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * p;
                    for oh in 0..self.out_h {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        let dst = &mut col[row + oh * self.out_w..row + (oh + 1) * self.out_w];
                        if ih < 0 || ih >= self.height as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.height + ih as usize) * self.width..][..self.width];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            *d = if iw < 0 || iw >= self.width as isize {
                                0.0
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Fold a patch-matrix gradient back onto one input sample.
    fn col2im(&self, col: &[f32], dx: &mut [f32]) {
        let p = self.positions();
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * p;
                    for oh in 0..self.out_h {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih >= self.height as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.height + ih as usize) * self.width..][..self.width];
                        let src = &col[row + oh * self.out_w..row + (oh + 1) * self.out_w];
                        for (ow, &g) in src.iter().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            if iw >= 0 && iw < self.width as isize {
                                dst[iw as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; m * n];
    exec::for_each_chunk_mut(&mut out, n, |i, row| {
        for kk in 0..k {
            let av = ad[i * k + kk];
            if av != 0.0 {
                axpy(av, &bd[kk * n..(kk + 1) * n], row);
            }
        }
    });
    Tensor::new([m, n], out)
}

/// Gradients of `a @ b` given the upstream gradient `g`.
pub fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let ga = need_a.then(|| {
        let mut out = vec![0.0f32; m * k];
        exec::for_each_chunk_mut(&mut out, k, |i, row| {
            let gi = &gd[i * n..(i + 1) * n];
            for (kk, r) in row.iter_mut().enumerate() {
                *r = dot(gi, &bd[kk * n..(kk + 1) * n]);
            }
        });
        Tensor::new([m, k], out).expect("shape")
    });
    let gb = need_b.then(|| {
        let mut out = vec![0.0f32; k * n];
        exec::for_each_chunk_mut(&mut out, n, |kk, row| {
            for i in 0..m {
                let av = ad[i * k + kk];
                if av != 0.0 {
                    axpy(av, &gd[i * n..(i + 1) * n], row);
                }
            }
        });
        Tensor::new([k, n], out).expect("shape")
    });
    (ga, gb)
}

pub fn conv_geom(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] {
        return Err(Error::dim("conv2d", x.shape(), w.shape()));
    }
    let s = x.shape();
    let ws = w.shape();
    ConvGeom::new([s[1], s[2], s[3]], ws[0], [ws[2], ws[3]], stride, pad)
}

pub fn conv2d(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let geom = conv_geom(x, w, stride, pad)?;
    if bias.shape() != [geom.filters] {
        return Err(Error::dim("conv2d bias", bias.shape(), &[geom.filters]));
    }
    let batch = x.batch();
    let (xd, wd, bd) = (x.data(), w.data(), bias.data());
    let (patch, p) = (geom.patch(), geom.positions());
    let mut out = vec![0.0f32; batch * geom.out_len()];
    exec::for_each_chunk_mut(&mut out, geom.out_len(), |n, o| {
        let mut col = vec![0.0f32; patch * p];
        geom.im2col(&xd[n * geom.in_len()..(n + 1) * geom.in_len()], &mut col);
        for f in 0..geom.filters {
            let orow = &mut o[f * p..(f + 1) * p];
            orow.fill(bd[f]);
            let wrow = &wd[f * patch..(f + 1) * patch];
            for (r, &wv) in wrow.iter().enumerate() {
                if wv != 0.0 {
                    axpy(wv, &col[r * p..(r + 1) * p], orow);
                }
            }
        }
    });
    Tensor::new([batch, geom.filters, geom.out_h, geom.out_w], out)
}

pub struct ConvGrads {
    pub x: Option<Tensor>,
    pub w: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> Result<ConvGrads> {
    let geom = conv_geom(x, w, stride, pad)?;
    let batch = x.batch();
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let (patch, p) = (geom.patch(), geom.positions());
    let [need_x, need_w, need_b] = need;

    // Per-sample partial results, reduced afterwards in ascending sample order.
    let partial = exec::map_indexed(batch, |n| {
        let gn = &gd[n * geom.out_len()..(n + 1) * geom.out_len()];
        let mut col = vec![0.0f32; patch * p];
        if need_w {
            geom.im2col(&xd[n * geom.in_len()..(n + 1) * geom.in_len()], &mut col);
        }
        let dw = need_w.then(|| {
            let mut dw = vec![0.0f32; geom.filters * patch];
            for f in 0..geom.filters {
                let grow = &gn[f * p..(f + 1) * p];
                for r in 0..patch {
                    dw[f * patch + r] = dot(grow, &col[r * p..(r + 1) * p]);
                }
            }
            dw
        });
        let db = need_b.then(|| {
            (0..geom.filters)
                .map(|f| gn[f * p..(f + 1) * p].iter().sum::<f32>())
                .collect::<Vec<f32>>()
        });
        let dx = need_x.then(|| {
            col.fill(0.0);
            for f in 0..geom.filters {
                let grow = &gn[f * p..(f + 1) * p];
                for r in 0..patch {
                    let wv = wd[f * patch + r];
                    if wv != 0.0 {
                        axpy(wv, grow, &mut col[r * p..(r + 1) * p]);
                    }
                }
            }
            let mut dx = vec![0.0f32; geom.in_len()];
            geom.col2im(&col, &mut dx);
            dx
        });
        (dw, db, dx)
    });

    let mut grads = ConvGrads {
        x: None,
        w: None,
        bias: None,
    };
    if need_w {
        let mut acc = vec![0.0f32; geom.filters * patch];
        for (dw, _, _) in &partial {
            for (a, v) in acc.iter_mut().zip(dw.as_ref().expect("dw")) {
                *a += v;
            }
        }
        grads.w = Some(Tensor::new(w.shape().to_vec(), acc)?);
    }
    if need_b {
        let mut acc = vec![0.0f32; geom.filters];
        for (_, db, _) in &partial {
            for (a, v) in acc.iter_mut().zip(db.as_ref().expect("db")) {
                *a += v;
            }
        }
        grads.bias = Some(Tensor::new([geom.filters], acc)?);
    }
    if need_x {
        let mut data = Vec::with_capacity(x.len());
        for (_, _, dx) in partial {
            data.extend(dx.expect("dx"));
        }
        grads.x = Some(Tensor::new(x.shape().to_vec(), data)?);
    }
    Ok(grads)
}

/// Pooling window geometry on an `[N, C, H, W]` tensor.
#[derive(Debug, Clone, Copy)]
pub struct PoolGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub size: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    pub fn new(shape: &[usize], size: usize, stride: usize) -> Result<Self> {
        if shape.len() != 4 {
            return Err(Error::dim("pool2d", shape, &[0, 0, 0, 0]));
        }
        if size == 0 || stride == 0 {
            return Err(Error::Config("pool window and stride must be positive".into()));
        }
        let (h, w) = (shape[2], shape[3]);
        if h < size || w < size || (h - size) % stride != 0 || (w - size) % stride != 0 {
            return Err(Error::Config(format!(
                "pool window {size} stride {stride} does not tile {h}x{w}"
            )));
        }
        Ok(Self {
            channels: shape[1],
            height: h,
            width: w,
            size,
            stride,
            out_h: (h - size) / stride + 1,
            out_w: (w - size) / stride + 1,
        })
    }

    fn out_len(&self) -> usize {
        self.channels * self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Max pooling; also returns, per output cell, the flat input index of the
/// winning element (first maximum in row-major window order).
pub fn maxpool2d(x: &Tensor, size: usize, stride: usize) -> Result<(Tensor, Vec<u32>)> {
    let geom = PoolGeom::new(x.shape(), size, stride)?;
    let batch = x.batch();
    let xd = x.data();
    let mut out = vec![0.0f32; batch * geom.out_len()];
    let mut arg = vec![0u32; batch * geom.out_len()];
    for n in 0..batch {
        for c in 0..geom.channels {
            for oh in 0..geom.out_h {
                for ow in 0..geom.out_w {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for i in 0..size {
                        for j in 0..size {
                            let idx = n * geom.in_len()
                                + (c * geom.height + oh * stride + i) * geom.width
                                + ow * stride
                                + j;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_i = idx;
                            }
                        }
                    }
                    let o = n * geom.out_len() + (c * geom.out_h + oh) * geom.out_w + ow;
                    out[o] = best;
                    arg[o] = best_i as u32;
                }
            }
        }
    }
    let shape = [batch, geom.channels, geom.out_h, geom.out_w];
    Ok((Tensor::new(shape, out)?, arg))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[u32], g: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&i, &gv) in argmax.iter().zip(g.data()) {
        d[i as usize] += gv;
    }
    dx
}

pub fn avgpool2d(x: &Tensor, size: usize, stride: usize) -> Result<Tensor> {
    let geom = PoolGeom::new(x.shape(), size, stride)?;
    let batch = x.batch();
    let xd = x.data();
    let inv = 1.0 / (size * size) as f32;
    let mut out = vec![0.0f32; batch * geom.out_len()];
    for n in 0..batch {
        for c in 0..geom.channels {
            for oh in 0..geom.out_h {
                for ow in 0..geom.out_w {
                    let mut s = 0.0f32;
                    for i in 0..size {
                        for j in 0..size {
                            s += xd[n * geom.in_len()
                                + (c * geom.height + oh * stride + i) * geom.width
                                + ow * stride
                                + j];
                        }
                    }
                    out[n * geom.out_len() + (c * geom.out_h + oh) * geom.out_w + ow] = s * inv;
                }
            }
        }
    }
    Tensor::new([batch, geom.channels, geom.out_h, geom.out_w], out)
}

pub fn avgpool2d_backward(input_shape: &[usize], size: usize, stride: usize, g: &Tensor) -> Result<Tensor> {
    let geom = PoolGeom::new(input_shape, size, stride)?;
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let inv = 1.0 / (size * size) as f32;
    let d = dx.data_mut();
    let gd = g.data();
    for n in 0..input_shape[0] {
        for c in 0..geom.channels {
            for oh in 0..geom.out_h {
                for ow in 0..geom.out_w {
                    let gv = gd[n * geom.out_len() + (c * geom.out_h + oh) * geom.out_w + ow] * inv;
                    for i in 0..size {
                        for j in 0..size {
                            d[n * geom.in_len()
                                + (c * geom.height + oh * stride + i) * geom.width
                                + ow * stride
                                + j] += gv;
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Mean softmax cross-entropy over the batch, and the softmax probabilities.
///
/// Log-sum-exp is evaluated in 64-bit after max subtraction.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Vec<f32>)> {
    if logits.rank() != 2 {
        return Err(Error::dim("softmax_cross_entropy", logits.shape(), &[labels.len(), 0]));
    }
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::dim("softmax_cross_entropy labels", logits.shape(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
    }
    let mut probs = vec![0.0f32; n * k];
    let mut total = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[label] as f64;
        for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = ((v as f64 - lse).exp()) as f32;
        }
    }
    Ok(((total / n as f64) as f32, probs))
}

/// Euclidean norm of each sample (all but the leading dimension).
pub fn sample_norms(x: &Tensor) -> Tensor {
    let len = x.sample_len();
    let norms = x
        .data()
        .chunks(len)
        .map(|s| s.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt() as f32)
        .collect();
    Tensor::new([x.batch()], norms).expect("batch is positive")
}
