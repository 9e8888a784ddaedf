//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CLTF" | version u32 | architecture | per layer: weight blob, bias blob, frozen u8
//!        | optimizer | epoch u64 | seed u64 | phase u8 | reselections u64
//!        | critical set | crc32 of everything before it
//! ```
//!
//! Tensors are stored as `u64` byte length followed by `f32` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Architecture, LayerDef, LayerKind, Network, PostOp};
use crate::tensor::Tensor;
use crate::trainer::{Phase, Sgd};

pub const MAGIC: &[u8; 4] = b"CLTF";
pub const VERSION: u32 = 1;

/// Everything besides parameters needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub optimizer: Sgd,
    pub epoch: usize,
    pub seed: u64,
    pub phase: Phase,
    pub reselections: usize,
    pub critical: Vec<usize>,
}

impl TrainState {
    /// State of a network that has not been trained yet.
    pub fn fresh(net: &Network, momentum: f32, seed: u64) -> Self {
        Self {
            optimizer: Sgd::new(net.num_layers(), momentum),
            epoch: 0,
            seed,
            phase: Phase::Pretrain,
            reselections: 0,
            critical: Vec::new(),
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend((v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        let bytes = t.to_le_bytes();
        self.u64(bytes.len() as u64);
        self.0.extend(bytes);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Corruption(format!("checkpoint truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn tensor(&mut self, shape: Vec<usize>) -> Result<Tensor> {
        let len = self.u64()? as usize;
        let want: usize = shape.iter().product::<usize>() * 4;
        if len != want {
            return Err(Error::Corruption(format!(
                "parameter blob of {len} bytes where {want} were expected"
            )));
        }
        let data = self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
}

fn write_arch(w: &mut Writer, arch: &Architecture) {
    w.u32(arch.input_shape.len());
    arch.input_shape.iter().for_each(|&d| w.u32(d));
    w.u32(arch.num_classes);
    w.u32(arch.layers.len());
    for def in &arch.layers {
        match def.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                w.u8(0);
                [in_channels, out_channels, kernel, stride, pad].into_iter().for_each(|v| w.u32(v));
            }
            LayerKind::Dense { inputs, outputs } => {
                w.u8(1);
                w.u32(inputs);
                w.u32(outputs);
            }
        }
        w.u32(def.post.len());
        for op in &def.post {
            let (tag, arg) = match *op {
                PostOp::Relu => (0, 0),
                PostOp::MaxPool(s) => (1, s),
                PostOp::AvgPool(s) => (2, s),
                PostOp::Flatten => (3, 0),
            };
            w.u8(tag);
            w.u32(arg);
        }
    }
}

fn read_arch(r: &mut Reader) -> Result<Architecture> {
    let corrupt = |m: String| Error::Corruption(m);
    let rank = r.u32()?;
    if rank > 8 {
        return Err(corrupt(format!("implausible input rank {rank}")));
    }
    let input_shape = (0..rank).map(|_| r.u32()).collect::<Result<_>>()?;
    let num_classes = r.u32()?;
    let n = r.u32()?;
    let mut layers = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let kind = match r.u8()? {
            0 => {
                let v: Vec<usize> = (0..5).map(|_| r.u32()).collect::<Result<_>>()?;
                LayerKind::Conv {
                    in_channels: v[0],
                    out_channels: v[1],
                    kernel: v[2],
                    stride: v[3],
                    pad: v[4],
                }
            }
            1 => LayerKind::Dense {
                inputs: r.u32()?,
                outputs: r.u32()?,
            },
            t => return Err(corrupt(format!("unknown layer tag {t}"))),
        };
        let np = r.u32()?;
        let mut post = Vec::with_capacity(np.min(16));
        for _ in 0..np {
            let (tag, arg) = (r.u8()?, r.u32()?);
            post.push(match tag {
                0 => PostOp::Relu,
                1 => PostOp::MaxPool(arg),
                2 => PostOp::AvgPool(arg),
                3 => PostOp::Flatten,
                t => return Err(corrupt(format!("unknown post-op tag {t}"))),
            });
        }
        layers.push(LayerDef { kind, post });
    }
    Ok(Architecture {
        input_shape,
        num_classes,
        layers,
    })
}

/// Serialize a network and its training state.
pub fn encode(net: &Network, state: &TrainState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend(MAGIC);
    w.u32(VERSION as usize);
    write_arch(&mut w, net.architecture());
    for layer in net.layers() {
        w.tensor(&layer.weight);
        w.tensor(&layer.bias);
        w.u8(layer.frozen as u8);
    }
    w.0.extend(state.optimizer.momentum.to_le_bytes());
    w.u32(state.optimizer.buffers.len());
    for buf in &state.optimizer.buffers {
        match buf {
            None => w.u8(0),
            Some((vw, vb)) => {
                w.u8(1);
                w.tensor(vw);
                w.tensor(vb);
            }
        }
    }
    w.u64(state.epoch as u64);
    w.u64(state.seed);
    w.u8(match state.phase {
        Phase::Pretrain => 0,
        Phase::Clat => 1,
    });
    w.u64(state.reselections as u64);
    w.u32(state.critical.len());
    state.critical.iter().for_each(|&i| w.u32(i));
    let crc = crc32fast::hash(&w.0);
    w.0.extend(crc.to_le_bytes());
    w.0
}

/// Parse a checkpoint produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<(Network, TrainState)> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} is not supported (expected {VERSION})"
        )));
    }
    if bytes.len() < 12 {
        return Err(Error::Corruption("checkpoint truncated before checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Corruption(format!(
            "checksum mismatch (stored {stored:08x}, computed {actual:08x})"
        )));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let arch = read_arch(&mut r)?;
    arch.output_shapes().map_err(|e| Error::Corruption(format!("stored architecture is invalid: {e}")))?;
    let mut params = Vec::with_capacity(arch.layers.len());
    let mut frozen = Vec::with_capacity(arch.layers.len());
    for def in &arch.layers {
        let w = r.tensor(def.weight_shape())?;
        let b = r.tensor(vec![def.bias_len()])?;
        params.push((w, b));
        frozen.push(r.u8()? != 0);
    }
    let mut net = Network::from_params(arch, params)?;
    for (i, f) in frozen.into_iter().enumerate() {
        net.layer_mut(i + 1)?.frozen = f;
    }
    let momentum = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    let nbuf = r.u32()?;
    if nbuf != net.num_layers() {
        return Err(Error::Corruption(format!(
            "{nbuf} optimizer buffers for {} layers",
            net.num_layers()
        )));
    }
    let mut buffers = Vec::with_capacity(nbuf);
    for i in 1..=nbuf {
        buffers.push(match r.u8()? {
            0 => None,
            1 => {
                let def = &net.layer(i)?.def;
                Some((r.tensor(def.weight_shape())?, r.tensor(vec![def.bias_len()])?))
            }
            t => return Err(Error::Corruption(format!("bad optimizer buffer tag {t}"))),
        });
    }
    let epoch = r.u64()? as usize;
    let seed = r.u64()?;
    let phase = match r.u8()? {
        0 => Phase::Pretrain,
        1 => Phase::Clat,
        t => return Err(Error::Corruption(format!("bad phase tag {t}"))),
    };
    let reselections = r.u64()? as usize;
    let nc = r.u32()?;
    let critical: Vec<usize> = (0..nc).map(|_| r.u32()).collect::<Result<_>>()?;
    for &i in &critical {
        net.check_index(i).map_err(|_| Error::Corruption(format!("critical layer {i} out of range")))?;
    }
    if r.pos != body.len() {
        return Err(Error::Corruption(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok((
        net,
        TrainState {
            optimizer: Sgd { momentum, buffers },
            epoch,
            seed,
            phase,
            reselections,
            critical,
        },
    ))
}

pub fn save_checkpoint(net: &Network, state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(net, state)).map_err(|e| Error::io_at(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Network, TrainState)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    decode(&bytes)
}
