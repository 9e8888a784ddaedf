//! Shared networks, datasets and a 64-bit reference forward pass.

#![allow(dead_code)]

use clat_core::attacks::AttackConfig;
use clat_core::data::{synth_dataset, Dataset, Split, SynthConfig};
use clat_core::trainer::{TrainConfig, Trainer};
use clat_core::{Architecture, LayerDef, LayerKind, Network, PostOp, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::oracle;

pub const DESK_CLASSES: usize = 4;
pub const DESK_NOISE: f32 = 0.3;
pub const DESK_EPS: f32 = 0.1;

/// Six weight-bearing layers on 1×12×12 inputs.
pub fn desk_arch() -> Architecture {
    Architecture {
        input_shape: vec![1, 12, 12],
        num_classes: DESK_CLASSES,
        layers: vec![
            LayerDef::conv(1, 8, 3, 1, 1).then(PostOp::Relu),
            LayerDef::conv(8, 8, 3, 1, 1).then(PostOp::Relu).then(PostOp::MaxPool(2)),
            LayerDef::conv(8, 16, 3, 1, 1).then(PostOp::Relu),
            LayerDef::conv(16, 16, 3, 1, 1).then(PostOp::Relu).then(PostOp::MaxPool(2)),
            LayerDef::dense(144, 32).then(PostOp::Relu),
            LayerDef::dense(32, DESK_CLASSES),
        ],
    }
}

/// Small conv net on 1×6×6 inputs for fast structural tests.
pub fn tiny_cnn() -> Architecture {
    Architecture {
        input_shape: vec![1, 6, 6],
        num_classes: 3,
        layers: vec![
            LayerDef::conv(1, 4, 3, 1, 1).then(PostOp::Relu),
            LayerDef::conv(4, 4, 3, 1, 1).then(PostOp::Relu).then(PostOp::MaxPool(2)),
            LayerDef::conv(4, 6, 3, 1, 1).then(PostOp::Relu).then(PostOp::AvgPool(3)),
            LayerDef::dense(6, 3),
        ],
    }
}

/// Dense layers on `[D]` inputs; `relu[i]` adds a ReLU after layer `i`.
pub fn mlp(dims: &[usize], relu: &[bool]) -> Architecture {
    Architecture {
        input_shape: vec![dims[0]],
        num_classes: *dims.last().unwrap(),
        layers: dims
            .windows(2)
            .zip(relu)
            .map(|(w, &r)| {
                let d = LayerDef::dense(w[0], w[1]);
                if r { d.then(PostOp::Relu) } else { d }
            })
            .collect(),
    }
}

pub fn desk_data(count: usize, seed: u64) -> Dataset {
    synth_dataset(
        &SynthConfig {
            classes: DESK_CLASSES,
            count,
            size: 12,
            noise: DESK_NOISE,
            seed,
        },
        Split::Train,
    )
    .unwrap()
}

pub fn desk_attack() -> AttackConfig {
    AttackConfig::default().with_epsilon(DESK_EPS).with_alpha(DESK_EPS / 4.0)
}

pub fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        total_epochs: 50,
        pretrain_epochs: 30,
        batch_size: 64,
        lr0: 0.01,
        k: Some(1),
        seed,
        ..TrainConfig::default()
    }
}

/// Desk network after `epochs` adversarial pretraining epochs of the desk schedule.
pub fn pretrained(seed: u64, epochs: usize, count: usize) -> (Network, Dataset) {
    let data = desk_data(count, 0);
    let mut cfg = desk_train_config(seed);
    cfg.pretrain_epochs = cfg.pretrain_epochs.max(epochs);
    cfg.total_epochs = cfg.total_epochs.max(epochs);
    let eval = data.slice(0, 32.min(count)).unwrap();
    let mut t = Trainer::new(Network::init(desk_arch(), seed).unwrap(), cfg, desk_attack()).unwrap();
    for _ in 0..epochs {
        t.step_epoch(&data, &eval, &mut ()).unwrap();
    }
    (t.net, data)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape.to_vec(), 0.0, 1.0, &mut rng(seed))
}

/// `F_upto(x)` recomputed from scratch in 64-bit with the oracle ops.
pub fn reference_forward(net: &Network, x: &Tensor, upto: usize) -> Vec<f64> {
    let n = x.batch();
    let mut h = oracle::to_f64(x.data());
    let mut shape: Vec<usize> = x.shape().to_vec();
    for layer in &net.layers()[..upto] {
        let w = oracle::to_f64(layer.weight.data());
        let b = oracle::to_f64(layer.bias.data());
        match layer.def.kind {
            LayerKind::Conv { stride, pad, .. } => {
                let ws = layer.weight.shape();
                let (out, s) = oracle::conv2d(
                    &h,
                    [shape[0], shape[1], shape[2], shape[3]],
                    &w,
                    [ws[0], ws[1], ws[2], ws[3]],
                    &b,
                    stride,
                    pad,
                );
                h = out;
                shape = s.to_vec();
            }
            LayerKind::Dense { inputs, outputs } => {
                let z = oracle::matmul(&h, &w, n, inputs, outputs);
                h = oracle::add_bias(&z, outputs, 1, &b);
                shape = vec![n, outputs];
            }
        }
        for op in &layer.def.post {
            match *op {
                PostOp::Relu => h = oracle::relu(&h),
                PostOp::MaxPool(k) | PostOp::AvgPool(k) => {
                    let s4 = [shape[0], shape[1], shape[2], shape[3]];
                    h = if matches!(op, PostOp::MaxPool(_)) {
                        oracle::maxpool(&h, s4, k)
                    } else {
                        oracle::avgpool(&h, s4, k)
                    };
                    shape = vec![shape[0], shape[1], shape[2] / k, shape[3] / k];
                }
                PostOp::Flatten => shape = vec![n, shape[1..].iter().product()],
            }
        }
    }
    h
}

/// `(1/N)·mean_n ‖F(x+δ)_n − F(x)_n‖₂` from the reference forward pass.
pub fn reference_weakness(net: &Network, x: &Tensor, delta: &Tensor, layer: usize) -> f64 {
    let clean = reference_forward(net, x, layer);
    let adv = reference_forward(net, &x.add(delta).unwrap(), layer);
    let n = x.batch();
    let len = clean.len() / n;
    let diff: Vec<f64> = adv.iter().zip(&clean).map(|(a, c)| a - c).collect();
    oracle::sample_norms(&diff, n).iter().sum::<f64>() / n as f64 / len as f64
}
