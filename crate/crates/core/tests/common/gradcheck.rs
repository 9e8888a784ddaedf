//! Analytic-vs-finite-difference gradient checks for every differentiable op.
//!
//! Each case draws random small operands, differentiates `sum(R * op(x))`
//! on the tape, and compares against central differences of the 64-bit
//! oracle with `h = 1e-3`. Returns the worst norm-wise relative error over
//! all operands of the op.

#![allow(dead_code)]

use clat_core::{Tape, Tensor};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::oracle::{self, central_diff, rel_err, to_f64};

pub const H: f64 = 1e-3;

pub type Case = fn(&mut ChaCha8Rng) -> f64;

pub fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", matmul as Case),
        ("conv2d", conv2d),
        ("add_bias", add_bias),
        ("relu", relu),
        ("maxpool2d", maxpool),
        ("avgpool2d", avgpool),
        ("flatten", flatten),
        ("softmax_cross_entropy", cross_entropy),
        ("l2_norm", l2_norm),
        ("sample_norms", sample_norms),
        ("elementwise", elementwise),
    ]
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Values bounded away from zero so `x ± h` never crosses the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05f32..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Distinct values at least 0.01 apart, so a window maximum never flips under `± h`.
fn distinct(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let mut v: Vec<f32> = (0..n).map(|i| i as f32 * 0.01 - 0.5).collect();
    v.shuffle(rng);
    v
}

fn weighted_sum(out: &[f64], r: &[f64]) -> f64 {
    out.iter().zip(r).map(|(a, b)| a * b).sum()
}

/// Tape side: leaves for `inputs`, `sum(R * op(leaves))`, gradients per leaf.
fn tape_grads(
    inputs: &[Tensor],
    r: Option<&Tensor>,
    op: impl Fn(&mut Tape, &[clat_core::NodeId]) -> clat_core::NodeId,
) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let ids: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = op(&mut tape, &ids);
    let loss = match r {
        Some(r) => {
            let rid = tape.leaf(r.clone());
            let p = tape.mul(out, rid).unwrap();
            tape.sum(p)
        }
        None => out,
    };
    let mut g = tape.backward(loss, &ids).unwrap();
    ids.iter().map(|&id| g.take(id).unwrap()).collect()
}

/// FD check of every operand. `f` receives all operands as f64 slices.
fn check(inputs: &[Tensor], grads: &[Tensor], f: impl Fn(&[Vec<f64>]) -> f64) -> f64 {
    let base: Vec<Vec<f64>> = inputs.iter().map(|t| to_f64(t.data())).collect();
    let mut worst = 0.0f64;
    for (slot, g) in grads.iter().enumerate() {
        let numeric = central_diff(&base[slot], H, |x| {
            let mut args = base.clone();
            args[slot] = x.to_vec();
            f(&args)
        });
        worst = worst.max(rel_err(g.data(), &numeric));
    }
    worst
}

fn matmul(rng: &mut ChaCha8Rng) -> f64 {
    let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
    let a = Tensor::new([m, k], rand_vec(rng, m * k)).unwrap();
    let b = Tensor::new([k, n], rand_vec(rng, k * n)).unwrap();
    let r = Tensor::new([m, n], rand_vec(rng, m * n)).unwrap();
    let grads = tape_grads(&[a.clone(), b.clone()], Some(&r), |t, ids| t.matmul(ids[0], ids[1]).unwrap());
    let rf = to_f64(r.data());
    check(&[a, b], &grads, |args| weighted_sum(&oracle::matmul(&args[0], &args[1], m, k, n), &rf))
}

fn conv2d(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(1..3);
    let c = rng.random_range(1..3);
    let f = rng.random_range(1..3);
    let k = *[1usize, 2, 3].choose(rng).unwrap();
    let stride: usize = rng.random_range(1..3);
    let pad: usize = rng.random_range(0..2);
    let oh: usize = rng.random_range(2..4);
    let ow: usize = rng.random_range(2..4);
    let h = ((oh - 1) * stride + k).saturating_sub(2 * pad).max(1);
    let w = ((ow - 1) * stride + k).saturating_sub(2 * pad).max(1);
    if (h + 2 * pad < k) || (h + 2 * pad - k) % stride != 0 || (w + 2 * pad - k) % stride != 0 {
        return conv2d(rng);
    }
    let x = Tensor::new([n, c, h, w], rand_vec(rng, n * c * h * w)).unwrap();
    let wt = Tensor::new([f, c, k, k], rand_vec(rng, f * c * k * k)).unwrap();
    let b = Tensor::new([f], rand_vec(rng, f)).unwrap();
    let out_h = (h + 2 * pad - k) / stride + 1;
    let out_w = (w + 2 * pad - k) / stride + 1;
    let r = Tensor::new([n, f, out_h, out_w], rand_vec(rng, n * f * out_h * out_w)).unwrap();
    let grads = tape_grads(&[x.clone(), wt.clone(), b.clone()], Some(&r), |t, ids| {
        t.conv2d(ids[0], ids[1], ids[2], stride, pad).unwrap()
    });
    let rf = to_f64(r.data());
    check(&[x, wt, b], &grads, |a| {
        let (out, _) = oracle::conv2d(&a[0], [n, c, h, w], &a[1], [f, c, k, k], &a[2], stride, pad);
        weighted_sum(&out, &rf)
    })
}

fn add_bias(rng: &mut ChaCha8Rng) -> f64 {
    let (n, f, inner) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..3));
    let x = Tensor::new([n, f, inner, inner], rand_vec(rng, n * f * inner * inner)).unwrap();
    let b = Tensor::new([f], rand_vec(rng, f)).unwrap();
    let r = Tensor::new(x.shape().to_vec(), rand_vec(rng, x.len())).unwrap();
    let grads = tape_grads(&[x.clone(), b.clone()], Some(&r), |t, ids| t.add_bias(ids[0], ids[1]).unwrap());
    let rf = to_f64(r.data());
    check(&[x, b], &grads, |a| weighted_sum(&oracle::add_bias(&a[0], f, inner * inner, &a[1]), &rf))
}

fn relu(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(1..20);
    let x = Tensor::new([1, n], away_from_zero(rng, n)).unwrap();
    let r = Tensor::new([1, n], rand_vec(rng, n)).unwrap();
    let grads = tape_grads(&[x.clone()], Some(&r), |t, ids| t.relu(ids[0]));
    let rf = to_f64(r.data());
    check(&[x], &grads, |a| weighted_sum(&oracle::relu(&a[0]), &rf))
}

fn pool_case(rng: &mut ChaCha8Rng, max: bool) -> f64 {
    let (n, c) = (rng.random_range(1..3), rng.random_range(1..3));
    let k = rng.random_range(1..4);
    let (oh, ow) = (rng.random_range(1..4), rng.random_range(1..4));
    let (h, w) = (oh * k, ow * k);
    let len = n * c * h * w;
    let data = if max { distinct(rng, len) } else { rand_vec(rng, len) };
    let x = Tensor::new([n, c, h, w], data).unwrap();
    let r = Tensor::new([n, c, oh, ow], rand_vec(rng, n * c * oh * ow)).unwrap();
    let grads = tape_grads(&[x.clone()], Some(&r), |t, ids| {
        if max {
            t.maxpool2d(ids[0], k, k).unwrap()
        } else {
            t.avgpool2d(ids[0], k, k).unwrap()
        }
    });
    let rf = to_f64(r.data());
    check(&[x], &grads, |a| {
        let out = if max {
            oracle::maxpool(&a[0], [n, c, h, w], k)
        } else {
            oracle::avgpool(&a[0], [n, c, h, w], k)
        };
        weighted_sum(&out, &rf)
    })
}

fn maxpool(rng: &mut ChaCha8Rng) -> f64 {
    pool_case(rng, true)
}

fn avgpool(rng: &mut ChaCha8Rng) -> f64 {
    pool_case(rng, false)
}

fn flatten(rng: &mut ChaCha8Rng) -> f64 {
    let (n, c, h) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..4));
    let x = Tensor::new([n, c, h, h], rand_vec(rng, n * c * h * h)).unwrap();
    let r = Tensor::new([n, c * h * h], rand_vec(rng, x.len())).unwrap();
    let grads = tape_grads(&[x.clone()], Some(&r), |t, ids| t.flatten(ids[0]).unwrap());
    let rf = to_f64(r.data());
    check(&[x], &grads, |a| weighted_sum(&a[0], &rf))
}

fn cross_entropy(rng: &mut ChaCha8Rng) -> f64 {
    let (n, k) = (rng.random_range(1..6), rng.random_range(2..6));
    let logits = Tensor::new([n, k], rand_vec(rng, n * k).iter().map(|v| v * 3.0).collect()).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let grads = tape_grads(&[logits.clone()], None, |t, ids| t.softmax_cross_entropy(ids[0], &labels).unwrap());
    check(&[logits], &grads, |a| oracle::cross_entropy(&a[0], k, &labels))
}

fn l2_norm(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(1..12);
    let x = Tensor::new([n], away_from_zero(rng, n)).unwrap();
    let grads = tape_grads(&[x.clone()], None, |t, ids| t.l2_norm(ids[0]));
    check(&[x], &grads, |a| oracle::l2_norm(&a[0]))
}

fn sample_norms(rng: &mut ChaCha8Rng) -> f64 {
    let (n, d) = (rng.random_range(1..5), rng.random_range(1..8));
    let x = Tensor::new([n, d], away_from_zero(rng, n * d)).unwrap();
    let r = Tensor::new([n], rand_vec(rng, n)).unwrap();
    let grads = tape_grads(&[x.clone()], Some(&r), |t, ids| t.sample_norms(ids[0]));
    let rf = to_f64(r.data());
    check(&[x], &grads, |a| weighted_sum(&oracle::sample_norms(&a[0], n), &rf))
}

/// `mean(scale(a * b - a, 0.7) + b)`: covers add, sub, mul, scale and mean.
fn elementwise(rng: &mut ChaCha8Rng) -> f64 {
    let n = rng.random_range(1..10);
    let a = Tensor::new([1, n], rand_vec(rng, n)).unwrap();
    let b = Tensor::new([1, n], rand_vec(rng, n)).unwrap();
    let grads = tape_grads(&[a.clone(), b.clone()], None, |t, ids| {
        let p = t.mul(ids[0], ids[1]).unwrap();
        let d = t.sub(p, ids[0]).unwrap();
        let s = t.scale(d, 0.7);
        let e = t.add(s, ids[1]).unwrap();
        t.mean(e)
    });
    check(&[a, b], &grads, |x| {
        x[0].iter()
            .zip(&x[1])
            .map(|(a, b)| 0.7 * (a * b - a) + b)
            .sum::<f64>()
            / n as f64
    })
}
