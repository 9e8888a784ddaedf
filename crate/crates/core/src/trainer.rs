//! Adversarial pretraining, critical-layer fine-tuning and the epoch
//! schedule that ties them together.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig};
use crate::checkpoint::TrainState;
use crate::criticality::{self, CriticalityReport};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{GradientRequest, NetGradients, Network};
use crate::rng::{self, Purpose};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Clat,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Clat => "clat",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "clat" => Ok(Phase::Clat),
            other => Err(Error::Input(format!("unknown phase '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total epochs `N`, pretraining included.
    pub total_epochs: usize,
    pub pretrain_epochs: usize,
    /// Reselect the critical set every `R` CLAT epochs.
    pub reselect_period: usize,
    /// Critical-set size; `None` means `⌈0.05·n⌉`.
    pub k: Option<usize>,
    pub lambda: f32,
    pub lr0: f64,
    pub momentum: f32,
    pub batch_size: usize,
    /// Samples used for each criticality evaluation.
    pub criticality_batch: usize,
    pub seed: u64,
    /// Single-step inner maximization in both phases.
    pub fast: bool,
    /// Cross-entropy on `x + δ` instead of clean `x` during CLAT.
    pub ce_on_adversarial: bool,
    /// Select the critical set once and keep it.
    pub fixed_layers: bool,
    /// Start a fresh cosine cycle at the first CLAT epoch.
    pub restart_lr_schedule: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_epochs: 100,
            pretrain_epochs: 50,
            reselect_period: 10,
            k: None,
            lambda: 1.0,
            lr0: 0.1,
            momentum: 0.9,
            batch_size: 128,
            criticality_batch: 100,
            seed: 0,
            fast: false,
            ce_on_adversarial: false,
            fixed_layers: false,
            restart_lr_schedule: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.pretrain_epochs > self.total_epochs {
            return bad(format!(
                "pretrain_epochs = {} exceeds total_epochs = {}",
                self.pretrain_epochs, self.total_epochs
            ));
        }
        if self.reselect_period == 0 {
            return bad("reselect_period must be at least 1".into());
        }
        if self.k == Some(0) {
            return bad("k must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 || self.criticality_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        Ok(())
    }

    pub fn clat_epochs(&self) -> usize {
        self.total_epochs - self.pretrain_epochs
    }

    /// Critical-set size for a network with `num_layers` layers.
    pub fn k_for(&self, num_layers: usize) -> usize {
        self.k.unwrap_or_else(|| criticality::default_k(num_layers))
    }

    /// Learning rate for 1-based `epoch`: cosine decay from `lr0` towards 0.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let (t, span) = if self.restart_lr_schedule && epoch > self.pretrain_epochs {
            (epoch - 1 - self.pretrain_epochs, self.clat_epochs())
        } else if self.restart_lr_schedule {
            (epoch - 1, self.pretrain_epochs)
        } else {
            (epoch - 1, self.total_epochs)
        };
        self.lr0 * 0.5 * (1.0 + (PI * t as f64 / span.max(1) as f64).cos())
    }

    /// Number of reselections a full CLAT phase performs.
    pub fn expected_reselections(&self) -> usize {
        match self.clat_epochs() {
            0 => 0,
            _ if self.fixed_layers => 1,
            n => n.div_ceil(self.reselect_period),
        }
    }
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    /// Velocity `(weight, bias)` per layer; `None` until first updated.
    pub buffers: Vec<Option<(Tensor, Tensor)>>,
}

impl Sgd {
    pub fn new(num_layers: usize, momentum: f32) -> Self {
        Self {
            momentum,
            buffers: vec![None; num_layers],
        }
    }

    /// Apply `grads` to their layers. Gradients for frozen layers are an error.
    pub fn step(&mut self, net: &mut Network, grads: &NetGradients, lr: f64) -> Result<()> {
        let lr = lr as f32;
        for (&i, (gw, gb)) in &grads.layers {
            let layer = net.layer_mut(i)?;
            if layer.frozen {
                return Err(Error::Usage(format!("gradient step on frozen layer {i}")));
            }
            let slot = &mut self.buffers[i - 1];
            let (vw, vb) = slot.get_or_insert_with(|| {
                (Tensor::zeros(gw.shape().to_vec()), Tensor::zeros(gb.shape().to_vec()))
            });
            for (v, (p, g)) in [(vw, (&mut layer.weight, gw)), (vb, (&mut layer.bias, gb))] {
                for ((v, p), &g) in v.data_mut().iter_mut().zip(p.data_mut()).zip(g.data()) {
                    *v = self.momentum * *v + g;
                    *p -= lr * *v;
                }
            }
        }
        Ok(())
    }

    pub fn clear(&mut self, layer: usize) {
        if let Some(slot) = self.buffers.get_mut(layer.wrapping_sub(1)) {
            *slot = None;
        }
    }
}

/// Losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub ce_loss: f64,
    pub crit_loss: f64,
    /// Value of the differentiated objective `ce + λ·crit`.
    pub total_loss: f64,
    pub lr: f64,
}

/// Hooks into the training loop.
pub trait Observer {
    fn before_step(&mut self, _net: &Network, _epoch: usize, _step: usize) {}
    fn after_step(&mut self, _net: &Network, _record: &StepRecord) {}
    fn on_reselect(&mut self, _epoch: usize, _report: &CriticalityReport) {}
    fn on_epoch(&mut self, _metrics: &EpochMetrics) {}
}

impl Observer for () {}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub phase: Phase,
    pub clean_acc: f64,
    pub adv_acc: f64,
    pub ce_loss: f64,
    pub crit_loss: f64,
    pub critical_set: Vec<usize>,
    pub trainable_frac: f64,
}

/// Mean losses over an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochLosses {
    pub ce_loss: f64,
    pub crit_loss: f64,
    pub steps: usize,
}

impl EpochLosses {
    fn add(&mut self, r: &StepRecord) {
        self.ce_loss += r.ce_loss;
        self.crit_loss += r.crit_loss;
        self.steps += 1;
    }

    fn finish(mut self) -> Self {
        let n = self.steps.max(1) as f64;
        self.ce_loss /= n;
        self.crit_loss /= n;
        self
    }
}

/// One epoch of PGD adversarial training over every layer. `epoch` is
/// 1-based and selects the random streams.
pub fn pgd_at_epoch(
    net: &mut Network,
    opt: &mut Sgd,
    data: &Dataset,
    cfg: &TrainConfig,
    attack: &AttackConfig,
    epoch: usize,
    obs: &mut dyn Observer,
) -> Result<EpochLosses> {
    let frozen: Vec<usize> = (1..=net.num_layers())
        .filter(|i| !net.trainable_layers().contains(i))
        .collect();
    if !frozen.is_empty() {
        return Err(Error::Usage(format!("adversarial pretraining with frozen layers {frozen:?}")));
    }
    let lr = cfg.learning_rate(epoch);
    let mut shuffle = rng::stream(cfg.seed, epoch as u64, Purpose::Shuffle);
    let mut arng = rng::stream(cfg.seed, epoch as u64, Purpose::Attack);
    let all: Vec<usize> = (1..=net.num_layers()).collect();
    let mut losses = EpochLosses::default();
    for (step, idx) in data.shuffled_batches(cfg.batch_size, &mut shuffle).iter().enumerate() {
        let (x, y) = data.batch(idx)?;
        let delta = if cfg.fast {
            attacks::fgsm(net, &x, &y, attack, &mut arng)?
        } else {
            attacks::pgd_untargeted(net, &x, &y, attack, &mut arng)?
        };
        obs.before_step(net, epoch, step);
        let mut tape = Tape::new();
        let (input, params, trace) = net.trace_input(&mut tape, x.add(&delta)?, net.num_layers())?;
        let ce = tape.softmax_cross_entropy(trace.output(), &y)?;
        let grads = net.backward(&tape, ce, input, &params, &GradientRequest::layers(all.iter().copied()))?;
        opt.step(net, &grads, lr)?;
        let ce = tape.value(ce).data()[0] as f64;
        let rec = StepRecord {
            epoch,
            step,
            ce_loss: ce,
            crit_loss: 0.0,
            total_loss: ce,
            lr,
        };
        losses.add(&rec);
        obs.after_step(net, &rec);
    }
    Ok(losses.finish())
}

/// One CLAT optimizer step on a minibatch. The network's trainable layers
/// must be exactly `set`.
#[allow(clippy::too_many_arguments)]
pub fn clat_step<R: Rng + ?Sized>(
    net: &mut Network,
    opt: &mut Sgd,
    x: &Tensor,
    y: &[usize],
    set: &[usize],
    cfg: &TrainConfig,
    attack: &AttackConfig,
    lr: f64,
    rng: &mut R,
) -> Result<(f64, f64, f64)> {
    if set.is_empty() {
        return Err(Error::Usage("critical set is empty".into()));
    }
    let delta = if cfg.fast {
        attacks::feature_fgsm(net, x, set, attack, rng)?
    } else {
        attacks::feature_deviation_pgd(net, x, set, attack, rng)?
    };
    let n = net.num_layers();
    let deepest = *set.iter().max().expect("non-empty");
    let (clean_upto, adv_upto) = if cfg.ce_on_adversarial { (deepest, n) } else { (n, deepest) };

    let mut tape = Tape::new();
    let params = net.param_leaves(&mut tape);
    let xi = tape.leaf(x.clone());
    let clean = net.trace(&mut tape, xi, &params, clean_upto)?;
    let xa = tape.leaf(x.add(&delta)?);
    let adv = net.trace(&mut tape, xa, &params, adv_upto)?;
    let logits = if cfg.ce_on_adversarial { adv.output() } else { clean.output() };
    let ce = tape.softmax_cross_entropy(logits, y)?;
    let mut dev = None;
    for &i in set {
        let d = tape.sub(adv.feature(i), clean.feature(i))?;
        let norms = tape.sample_norms(d);
        dev = Some(match dev {
            None => norms,
            Some(acc) => tape.add(acc, norms)?,
        });
    }
    let crit = tape.mean(dev.expect("non-empty"));
    let weighted = tape.scale(crit, cfg.lambda);
    let total = tape.add(ce, weighted)?;
    let grads = net.backward(&tape, total, xi, &params, &GradientRequest::layers(set.iter().copied()))?;
    opt.step(net, &grads, lr)?;
    let v = |id| tape.value(id).data()[0] as f64;
    Ok((v(ce), v(crit), v(total)))
}

/// One epoch of critical-layer fine-tuning on the current freeze mask.
pub fn clat_epoch(
    net: &mut Network,
    opt: &mut Sgd,
    data: &Dataset,
    cfg: &TrainConfig,
    attack: &AttackConfig,
    epoch: usize,
    obs: &mut dyn Observer,
) -> Result<EpochLosses> {
    let set = net.trainable_layers();
    if set.is_empty() {
        return Err(Error::Usage("critical fine-tuning with every layer frozen".into()));
    }
    let lr = cfg.learning_rate(epoch);
    let mut shuffle = rng::stream(cfg.seed, epoch as u64, Purpose::Shuffle);
    let mut arng = rng::stream(cfg.seed, epoch as u64, Purpose::Attack);
    let mut losses = EpochLosses::default();
    for (step, idx) in data.shuffled_batches(cfg.batch_size, &mut shuffle).iter().enumerate() {
        let (x, y) = data.batch(idx)?;
        obs.before_step(net, epoch, step);
        let (ce, crit, total) = clat_step(net, opt, &x, &y, &set, cfg, attack, lr, &mut arng)?;
        let rec = StepRecord {
            epoch,
            step,
            ce_loss: ce,
            crit_loss: crit,
            total_loss: total,
            lr,
        };
        losses.add(&rec);
        obs.after_step(net, &rec);
    }
    Ok(losses.finish())
}

/// Attack used by [`robust_accuracy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalAttack {
    #[default]
    Pgd,
    Fgsm,
}

impl FromStr for EvalAttack {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgd" => Ok(EvalAttack::Pgd),
            "fgsm" => Ok(EvalAttack::Fgsm),
            other => Err(Error::Usage(format!("unknown attack '{other}' (expected pgd or fgsm)"))),
        }
    }
}

const EVAL_BATCH: usize = 128;

fn correct(logits: &Tensor, labels: &[usize]) -> Vec<bool> {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let arg = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            arg == l
        })
        .collect()
}

/// Clean accuracy and, if an attack is given, accuracy on `x + δ`.
/// Parameters are never modified.
pub fn evaluate(net: &Network, data: &Dataset, attack: Option<&AttackConfig>, seed: u64) -> Result<(f64, f64)> {
    match attack {
        None => Ok((robust_accuracy(net, data, None, EvalAttack::Pgd, 1, seed)?.0, f64::NAN)),
        Some(a) => robust_accuracy(net, data, Some(a), EvalAttack::Pgd, 1, seed),
    }
}

/// Clean accuracy and worst-case accuracy over `restarts` attack restarts:
/// a sample counts as robust only if every restart fails on it.
pub fn robust_accuracy(
    net: &Network,
    data: &Dataset,
    attack: Option<&AttackConfig>,
    kind: EvalAttack,
    restarts: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let mut clean_ok = 0usize;
    let mut robust = vec![true; data.len()];
    for idx in data.sequential_batches(EVAL_BATCH) {
        let (x, y) = data.batch(&idx)?;
        let ok = correct(&net.forward(&x)?, &y);
        clean_ok += ok.iter().filter(|&&b| b).count();
        if attack.is_none() {
            continue;
        }
        for (j, &i) in idx.iter().enumerate() {
            robust[i] &= ok[j];
        }
    }
    let Some(cfg) = attack else {
        return Ok((clean_ok as f64 / data.len() as f64, f64::NAN));
    };
    for r in 0..restarts.max(1) {
        let mut arng = rng::stream(seed, r as u64, Purpose::Evaluation);
        for idx in data.sequential_batches(EVAL_BATCH) {
            let (x, y) = data.batch(&idx)?;
            let delta = match kind {
                EvalAttack::Pgd => attacks::pgd_untargeted(net, &x, &y, cfg, &mut arng)?,
                EvalAttack::Fgsm => attacks::fgsm(net, &x, &y, cfg, &mut arng)?,
            };
            let ok = correct(&net.forward(&x.add(&delta)?)?, &y);
            for (j, &i) in idx.iter().enumerate() {
                robust[i] &= ok[j];
            }
        }
    }
    let n = data.len() as f64;
    Ok((clean_ok as f64 / n, robust.iter().filter(|&&b| b).count() as f64 / n))
}

/// Full training state: network, optimizer, schedule position and the
/// current critical set.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: Network,
    pub cfg: TrainConfig,
    pub attack: AttackConfig,
    pub optimizer: Sgd,
    /// Completed epochs.
    pub epoch: usize,
    pub critical: Vec<usize>,
    pub reselections: usize,
    pub history: Vec<EpochMetrics>,
}

impl Trainer {
    pub fn new(net: Network, cfg: TrainConfig, attack: AttackConfig) -> Result<Self> {
        cfg.validate()?;
        attack.validate()?;
        let k = cfg.k_for(net.num_layers());
        if k > net.num_layers() {
            return Err(Error::Config(format!("k = {k} exceeds the {} network layers", net.num_layers())));
        }
        let optimizer = Sgd::new(net.num_layers(), cfg.momentum);
        Ok(Self {
            net,
            cfg,
            attack,
            optimizer,
            epoch: 0,
            critical: Vec::new(),
            reselections: 0,
            history: Vec::new(),
        })
    }

    /// Rebuild a trainer from a checkpointed network and state. The seed
    /// stored in the state overrides `cfg.seed`.
    pub fn resume(net: Network, state: TrainState, mut cfg: TrainConfig, attack: AttackConfig) -> Result<Self> {
        cfg.seed = state.seed;
        let mut t = Self::new(net, cfg, attack)?;
        if state.optimizer.buffers.len() != t.net.num_layers() {
            return Err(Error::Compatibility(format!(
                "optimizer state covers {} layers, network has {}",
                state.optimizer.buffers.len(),
                t.net.num_layers()
            )));
        }
        t.optimizer = Sgd {
            momentum: t.cfg.momentum,
            buffers: state.optimizer.buffers,
        };
        t.epoch = state.epoch;
        t.critical = state.critical;
        t.reselections = state.reselections;
        Ok(t)
    }

    /// Snapshot of everything needed to continue this run.
    pub fn state(&self) -> TrainState {
        TrainState {
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            seed: self.cfg.seed,
            phase: if self.epoch == 0 { Phase::Pretrain } else { self.phase_of(self.epoch) },
            reselections: self.reselections,
            critical: self.critical.clone(),
        }
    }

    pub fn phase_of(&self, epoch: usize) -> Phase {
        if epoch <= self.cfg.pretrain_epochs {
            Phase::Pretrain
        } else {
            Phase::Clat
        }
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.total_epochs
    }

    fn needs_reselection(&self, epoch: usize) -> bool {
        let local = epoch - self.cfg.pretrain_epochs;
        self.critical.is_empty() || (!self.cfg.fixed_layers && (local - 1) % self.cfg.reselect_period == 0)
    }

    /// Recompute criticality on a fresh batch, select the top-k layers and
    /// move the freeze mask. Momentum of layers leaving the set is cleared.
    pub fn reselect(&mut self, data: &Dataset, epoch: usize, obs: &mut dyn Observer) -> Result<CriticalityReport> {
        let mut r = rng::stream(self.cfg.seed, epoch as u64, Purpose::Criticality);
        let count = self.cfg.criticality_batch.min(data.len());
        let idx = data.sample_indices(count, &mut r)?;
        let (x, y) = data.batch(&idx)?;
        let report = criticality::criticality_indices(&self.net, &x, &y, &self.attack, r.random())?
            .select(self.cfg.k_for(self.net.num_layers()))?;
        let keep: BTreeSet<usize> = report.selected.iter().copied().collect();
        for i in 1..=self.net.num_layers() {
            if !keep.contains(&i) {
                self.optimizer.clear(i);
            }
        }
        self.net.set_freeze_mask(&report.selected)?;
        self.critical = report.selected.clone();
        self.reselections += 1;
        obs.on_reselect(epoch, &report);
        Ok(report)
    }

    /// Run the next epoch and evaluate on `eval`.
    pub fn step_epoch(&mut self, train: &Dataset, eval: &Dataset, obs: &mut dyn Observer) -> Result<EpochMetrics> {
        if self.is_done() {
            return Err(Error::Usage(format!(
                "training already finished all {} epochs",
                self.cfg.total_epochs
            )));
        }
        let epoch = self.epoch + 1;
        let phase = self.phase_of(epoch);
        let losses = match phase {
            Phase::Pretrain => {
                self.net.unfreeze_all();
                self.critical.clear();
                pgd_at_epoch(&mut self.net, &mut self.optimizer, train, &self.cfg, &self.attack, epoch, obs)?
            }
            Phase::Clat => {
                if self.needs_reselection(epoch) {
                    self.reselect(train, epoch, obs)?;
                }
                clat_epoch(&mut self.net, &mut self.optimizer, train, &self.cfg, &self.attack, epoch, obs)?
            }
        };
        let (clean_acc, adv_acc) = evaluate(&self.net, eval, Some(&self.attack), self.cfg.seed ^ epoch as u64)?;
        let metrics = EpochMetrics {
            epoch,
            phase,
            clean_acc,
            adv_acc,
            ce_loss: losses.ce_loss,
            crit_loss: losses.crit_loss,
            critical_set: self.critical.clone(),
            trainable_frac: self.net.param_census().fraction,
        };
        self.epoch = epoch;
        self.history.push(metrics.clone());
        obs.on_epoch(&metrics);
        Ok(metrics)
    }

    /// Run every remaining epoch.
    pub fn run(&mut self, train: &Dataset, eval: &Dataset, obs: &mut dyn Observer) -> Result<Vec<EpochMetrics>> {
        let start = self.history.len();
        while !self.is_done() {
            self.step_epoch(train, eval, obs)?;
        }
        Ok(self.history[start..].to_vec())
    }
}

/// Pretrain (if configured) then fine-tune critical layers; returns the
/// trained state and one metrics row per epoch.
pub fn run_clat(
    net: Network,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    attack: &AttackConfig,
    obs: &mut dyn Observer,
) -> Result<Trainer> {
    let mut t = Trainer::new(net, cfg.clone(), attack.clone())?;
    t.run(train, eval, obs)?;
    Ok(t)
}
