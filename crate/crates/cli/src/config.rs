//! Run configuration: a TOML file with `[model]`, `[data]`, `[train]`,
//! `[attack]` and `[output]` sections. Unknown keys are rejected.
//!
//! Layers are written one per string:
//!
//! ```text
//! conv 1->8 k3 s1 p1 relu maxpool2
//! dense 144->32 relu
//! ```
//!
//! `k`, `s` and `p` default to 3, 1 and 1. Post-ops are `relu`, `maxpoolN`,
//! `avgpoolN` and `flatten`, applied left to right.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clat_core::attacks::{AttackConfig, Norm};
use clat_core::data::{load_cifar_binary, load_idx, synth_dataset, Dataset, Split, SynthConfig};
use clat_core::trainer::TrainConfig;
use clat_core::{Architecture, Error, LayerDef, LayerKind, PostOp, Result};
use serde::{Deserialize, Serialize};

/// Name of the resolved config written next to every command's outputs.
pub const ECHO_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Per-sample input shape, e.g. `[1, 28, 28]`.
    pub input: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synth,
    Idx,
    Cifar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// Synthetic set parameters.
    pub classes: usize,
    pub size: usize,
    pub noise: f32,
    pub train_count: usize,
    pub test_count: usize,
    pub train_seed: u64,
    pub test_seed: u64,
    /// IDX file pairs.
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// CIFAR-10 binary batches.
    pub train_files: Vec<PathBuf>,
    pub test_files: Vec<PathBuf>,
    /// Leading test samples evaluated after every epoch.
    pub eval_count: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            classes: 4,
            size: 12,
            noise: 0.3,
            train_count: 512,
            test_count: 1024,
            train_seed: 0,
            test_seed: 1000,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_files: Vec::new(),
            test_files: Vec::new(),
            eval_count: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub epsilon: f32,
    pub alpha: f32,
    pub steps: usize,
    /// `linf` or `l2`.
    pub norm: String,
    pub random_start: bool,
    pub restarts: usize,
    pub domain: [f32; 2],
}

impl Default for AttackSection {
    fn default() -> Self {
        let a = AttackConfig::default();
        Self {
            epsilon: a.epsilon,
            alpha: a.alpha,
            steps: a.steps,
            norm: a.norm.to_string(),
            random_start: a.random_start,
            restarts: a.restarts,
            domain: [a.domain.0, a.domain.1],
        }
    }
}

impl AttackSection {
    pub fn to_config(&self) -> Result<AttackConfig> {
        let cfg = AttackConfig {
            epsilon: self.epsilon,
            alpha: self.alpha,
            steps: self.steps,
            norm: self.norm.parse::<Norm>()?,
            random_start: self.random_start,
            domain: (self.domain[0], self.domain[1]),
            restarts: self.restarts,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub metrics: String,
    pub checkpoint: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            metrics: "metrics.csv".into(),
            checkpoint: "model.cltf".into(),
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl RunConfig {
    /// Parse config text; errors carry the 1-based line of the offending key.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(span) => Error::Config(format!("line {}: {msg}", line_of(text, span.start))),
                None => Error::Config(msg),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture()?.output_shapes()?;
        self.train.validate()?;
        self.attack.to_config()?;
        if self.data.eval_count == 0 {
            return Err(Error::Config("data.eval_count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let layers = self
            .model
            .layers
            .iter()
            .enumerate()
            .map(|(i, s)| parse_layer(s).map_err(|m| Error::Config(format!("model.layers[{i}] '{s}': {m}"))))
            .collect::<Result<Vec<_>>>()?;
        if layers.is_empty() {
            return Err(Error::Config("model.layers is empty".into()));
        }
        Ok(Architecture {
            input_shape: self.model.input.clone(),
            num_classes: self.model.classes,
            layers,
        })
    }

    /// The resolved configuration, defaults filled in, as TOML.
    pub fn echo(&self) -> String {
        let mut v = toml::Value::try_from(self).expect("config serializes");
        shorten_floats(&mut v);
        toml::to_string(&v).expect("config serializes")
    }

    /// Write [`ECHO_FILE`] into `dir`, creating it if needed.
    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.echo()).map_err(|e| Error::io_at(&path, e))
    }

    /// Training and test sets described by `[data]`.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        let (train, test) = match d.source {
            DataSource::Synth => {
                let synth = |count, seed| SynthConfig {
                    classes: d.classes,
                    count,
                    size: d.size,
                    noise: d.noise,
                    seed,
                };
                (
                    synth_dataset(&synth(d.train_count, d.train_seed), Split::Train)?,
                    synth_dataset(&synth(d.test_count, d.test_seed), Split::Test)?,
                )
            }
            DataSource::Idx => {
                let need = |p: &Option<PathBuf>, key: &str| {
                    p.clone().ok_or_else(|| Error::Config(format!("data.source = \"idx\" needs data.{key}")))
                };
                (
                    load_idx(need(&d.train_images, "train_images")?, need(&d.train_labels, "train_labels")?, Split::Train)?,
                    load_idx(need(&d.test_images, "test_images")?, need(&d.test_labels, "test_labels")?, Split::Test)?,
                )
            }
            DataSource::Cifar => {
                if d.train_files.is_empty() || d.test_files.is_empty() {
                    return Err(Error::Config("data.source = \"cifar\" needs train_files and test_files".into()));
                }
                (
                    load_cifar_binary(&d.train_files, Split::Train)?,
                    load_cifar_binary(&d.test_files, Split::Test)?,
                )
            }
        };
        if train.sample_shape() != self.model.input.as_slice() {
            return Err(Error::Consistency(format!(
                "data samples have shape {:?}, model.input is {:?}",
                train.sample_shape(),
                self.model.input
            )));
        }
        if train.num_classes > self.model.classes {
            return Err(Error::Consistency(format!(
                "data has {} classes, model.classes is {}",
                train.num_classes, self.model.classes
            )));
        }
        Ok((train, test))
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.output.dir.join(&self.output.metrics)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output.dir.join(&self.output.checkpoint)
    }
}

/// Print single-precision fields as `0.3` rather than `0.30000001192092896`.
fn shorten_floats(v: &mut toml::Value) {
    match v {
        toml::Value::Float(f) if (*f as f32) as f64 == *f => {
            *f = (*f as f32).to_string().parse().expect("float prints");
        }
        toml::Value::Array(a) => a.iter_mut().for_each(shorten_floats),
        toml::Value::Table(t) => t.iter_mut().for_each(|(_, v)| shorten_floats(v)),
        _ => {}
    }
}

fn parse_usize(s: &str, what: &str) -> std::result::Result<usize, String> {
    s.parse().map_err(|_| format!("bad {what} '{s}'"))
}

/// Parse one layer string of the model DSL.
pub fn parse_layer(s: &str) -> std::result::Result<LayerDef, String> {
    let mut tokens = s.split_whitespace();
    let kind = tokens.next().ok_or("empty layer")?;
    let dims = tokens.next().ok_or("missing IN->OUT")?;
    let (a, b) = dims.split_once("->").ok_or_else(|| format!("expected IN->OUT, got '{dims}'"))?;
    let (inputs, outputs) = (parse_usize(a, "input size")?, parse_usize(b, "output size")?);
    let mut def = match kind {
        "conv" => LayerDef::conv(inputs, outputs, 3, 1, 1),
        "dense" => LayerDef::dense(inputs, outputs),
        other => return Err(format!("unknown layer kind '{other}'")),
    };
    for tok in tokens {
        let conv = match &mut def.kind {
            LayerKind::Conv { kernel, stride, pad, .. } => Some((kernel, stride, pad)),
            LayerKind::Dense { .. } => None,
        };
        match (tok, conv) {
            ("relu", _) => def.post.push(PostOp::Relu),
            ("flatten", _) => def.post.push(PostOp::Flatten),
            (t, _) if t.starts_with("maxpool") => def.post.push(PostOp::MaxPool(parse_usize(&t[7..], "pool size")?)),
            (t, _) if t.starts_with("avgpool") => def.post.push(PostOp::AvgPool(parse_usize(&t[7..], "pool size")?)),
            (t, Some((k, st, p))) if t.len() > 1 && matches!(&t[..1], "k" | "s" | "p") => {
                let v = parse_usize(&t[1..], "conv option")?;
                *match &t[..1] {
                    "k" => k,
                    "s" => st,
                    _ => p,
                } = v;
            }
            (t, _) => return Err(format!("unknown option '{t}'")),
        }
    }
    Ok(def)
}

/// Inverse of [`parse_layer`].
pub fn format_layer(def: &LayerDef) -> String {
    let mut s = match def.kind {
        LayerKind::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        } => format!("conv {in_channels}->{out_channels} k{kernel} s{stride} p{pad}"),
        LayerKind::Dense { inputs, outputs } => format!("dense {inputs}->{outputs}"),
    };
    for op in &def.post {
        let _ = match op {
            PostOp::Relu => write!(s, " relu"),
            PostOp::Flatten => write!(s, " flatten"),
            PostOp::MaxPool(n) => write!(s, " maxpool{n}"),
            PostOp::AvgPool(n) => write!(s, " avgpool{n}"),
        };
    }
    s
}
