//! Independent 64-bit reference implementations used as test oracles.
//!
//! Nothing here calls into the crate's kernels: each op is written as the
//! most literal loop nest over its definition.

#![allow(dead_code)]

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a[i * k + t] * b[t * n + j];
            }
        }
    }
    out
}

/// Cross-correlation with zero padding, sliding-window form.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    [n, c, h, w]: [usize; 4],
    wt: &[f64],
    [f, _, kh, kw]: [usize; 4],
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for s in 0..n {
        for fo in 0..f {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias[fo];
                    for ci in 0..c {
                        for a in 0..kh {
                            for b in 0..kw {
                                let yi = (i * stride + a) as i64 - pad as i64;
                                let xj = (j * stride + b) as i64 - pad as i64;
                                if yi < 0 || xj < 0 || yi >= h as i64 || xj >= w as i64 {
                                    continue;
                                }
                                let xv = x[((s * c + ci) * h + yi as usize) * w + xj as usize];
                                acc += xv * wt[((fo * c + ci) * kh + a) * kw + b];
                            }
                        }
                    }
                    out[((s * f + fo) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    (out, [n, f, oh, ow])
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

fn pool(x: &[f64], [n, c, h, w]: [usize; 4], k: usize, reduce: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for s in 0..n {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut win = Vec::new();
                    for a in 0..k {
                        for b in 0..k {
                            win.push(x[((s * c + ci) * h + i * k + a) * w + j * k + b]);
                        }
                    }
                    out.push(reduce(&win));
                }
            }
        }
    }
    out
}

pub fn maxpool(x: &[f64], shape: [usize; 4], k: usize) -> Vec<f64> {
    pool(x, shape, k, |w| w.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

pub fn avgpool(x: &[f64], shape: [usize; 4], k: usize) -> Vec<f64> {
    pool(x, shape, k, |w| w.iter().sum::<f64>() / w.len() as f64)
}

/// Bias over dimension 1 of an `[N, F, inner]` layout.
pub fn add_bias(x: &[f64], f: usize, inner: usize, bias: &[f64]) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| v + bias[(i / inner) % f])
        .collect()
}

pub fn cross_entropy(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let row = &logits[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    total / n as f64
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn sample_norms(x: &[f64], n: usize) -> Vec<f64> {
    let len = x.len() / n;
    x.chunks(len).map(l2_norm).collect()
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_diff(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max |a - n| / max(max |n|, floor)`: norm-wise relative error.
pub fn rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a as f64 - n).abs())
        .fold(0.0, f64::max)
        / scale
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}
