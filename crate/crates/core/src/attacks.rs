//! Adversarial perturbations: FGSM, untargeted PGD on the output loss, and
//! PGD that maximizes hidden-feature deviation over a set of layers.
//!
//! Every attack returns the perturbation `δ`, not `x + δ`. Returned
//! perturbations satisfy `‖δ‖ ≤ ε` in the configured norm and keep `x + δ`
//! inside the input domain, elementwise.

use rand::Rng;

use crate::error::{Error, Result};
use crate::network::{GradientRequest, Network};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Linf,
    L2,
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        })
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linf" => Ok(Norm::Linf),
            "l2" => Ok(Norm::L2),
            other => Err(Error::Config(format!("unknown norm '{other}' (expected linf or l2)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f32,
    pub alpha: f32,
    pub steps: usize,
    pub norm: Norm,
    pub random_start: bool,
    /// Closed interval valid inputs live in.
    pub domain: (f32, f32),
    /// Independent random starts for the iterative attacks; each sample
    /// keeps the restart with the highest objective.
    pub restarts: usize,
}

impl Default for AttackConfig {
    /// ℓ∞ PGD-10 with ε = 0.03, α = 0.007 and a random start.
    fn default() -> Self {
        Self {
            epsilon: 0.03,
            alpha: 0.007,
            steps: 10,
            norm: Norm::Linf,
            random_start: true,
            domain: (0.0, 1.0),
            restarts: 1,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack steps must be >= 1".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("attack restarts must be >= 1".into()));
        }
        if !(self.domain.0 < self.domain.1) {
            return Err(Error::Config(format!("empty input domain {:?}", self.domain)));
        }
        Ok(())
    }

    pub fn with_epsilon(mut self, epsilon: f32) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_alpha(mut self, alpha: f32) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }
}

/// Sign with `sign(0) = 0`.
fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Project `delta` onto the ε-ball and so that `x + δ` stays in the domain.
pub fn project(x: &Tensor, delta: &mut Tensor, cfg: &AttackConfig) {
    let eps = cfg.epsilon;
    let (lo, hi) = cfg.domain;
    if cfg.norm == Norm::L2 {
        let len = delta.sample_len();
        for chunk in delta.data_mut().chunks_mut(len) {
            let norm = chunk.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm > eps as f64 {
                let s = (eps as f64 / norm) as f32;
                chunk.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    for (d, &xv) in delta.data_mut().iter_mut().zip(x.data()) {
        let mut v = d.clamp(-eps, eps);
        // Re-clamp after the domain fix so rounding in `hi - x` cannot leak past ε.
        if xv + v > hi {
            v = (hi - xv).min(eps);
        } else if xv + v < lo {
            v = (lo - xv).max(-eps);
        }
        *d = v;
    }
}

/// Uniform start in `[-ε, ε]` per coordinate, projected. Zero when the
/// config disables random starts.
pub fn random_start<R: Rng + ?Sized>(x: &Tensor, cfg: &AttackConfig, rng: &mut R) -> Tensor {
    if !cfg.random_start || cfg.epsilon == 0.0 {
        return Tensor::zeros(x.shape().to_vec());
    }
    let mut delta = Tensor::uniform(x.shape().to_vec(), -cfg.epsilon, cfg.epsilon, rng);
    project(x, &mut delta, cfg);
    delta
}

/// One ascent step of size `step` along the gradient direction for the norm.
fn ascend(delta: &mut Tensor, grad: &Tensor, step: f32, norm: Norm) {
    match norm {
        Norm::Linf => {
            for (d, &g) in delta.data_mut().iter_mut().zip(grad.data()) {
                *d += step * sign(g);
            }
        }
        Norm::L2 => {
            let len = grad.sample_len();
            for (dc, gc) in delta.data_mut().chunks_mut(len).zip(grad.data().chunks(len)) {
                let norm = gc.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
                if norm > 0.0 {
                    let s = (step as f64 / norm) as f32;
                    for (d, &g) in dc.iter_mut().zip(gc) {
                        *d += s * g;
                    }
                }
            }
        }
    }
}

fn check_batch(net: &Network, x: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    if x.rank() < 2 || x.shape()[1..] != *net.input_shape() {
        let mut want = vec![0];
        want.extend(net.input_shape());
        return Err(Error::dim("attack input", x.shape(), &want));
    }
    if let Some(l) = labels {
        if l.len() != x.batch() {
            return Err(Error::dim("attack labels", x.shape(), &[l.len()]));
        }
    }
    Ok(())
}

/// Gradient of the mean cross-entropy with respect to the input at `x + δ`.
pub fn loss_input_gradient(net: &Network, x_adv: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (input, params, trace) = net.trace_input(&mut tape, x_adv.clone(), net.num_layers())?;
    let loss = tape.softmax_cross_entropy(trace.output(), labels)?;
    let g = net.backward(&tape, loss, input, &params, &GradientRequest::input())?;
    Ok(g.input.expect("input gradient requested"))
}

/// Per-sample cross-entropy of `[N, K]` logits, 64-bit.
pub fn per_sample_cross_entropy(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
            lse - row[l] as f64
        })
        .collect()
}

/// Fast gradient sign method: `δ = ε·sign(∇ₓL(F(x + η), y))`, where `η` is
/// the random start (or zero), followed by projection.
pub fn fgsm<R: Rng + ?Sized>(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    check_batch(net, x, Some(labels))?;
    let eta = random_start(x, cfg, rng);
    if cfg.epsilon == 0.0 {
        return Ok(eta);
    }
    let grad = loss_input_gradient(net, &x.add(&eta)?, labels)?;
    let mut delta = Tensor::zeros(x.shape().to_vec());
    ascend(&mut delta, &grad, cfg.epsilon, cfg.norm);
    project(x, &mut delta, cfg);
    Ok(delta)
}

/// Untargeted PGD on the cross-entropy loss. With one restart this is the
/// last iterate; with several, each sample keeps the restart whose last
/// iterate has the highest loss.
pub fn pgd_untargeted<R: Rng + ?Sized>(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    check_batch(net, x, Some(labels))?;
    let mut best: Option<(Tensor, Vec<f64>)> = None;
    for _ in 0..cfg.restarts {
        let mut delta = random_start(x, cfg, rng);
        if cfg.epsilon == 0.0 {
            return Ok(delta);
        }
        for _ in 0..cfg.steps {
            let grad = loss_input_gradient(net, &x.add(&delta)?, labels)?;
            ascend(&mut delta, &grad, cfg.alpha, cfg.norm);
            project(x, &mut delta, cfg);
        }
        if cfg.restarts == 1 {
            return Ok(delta);
        }
        let loss = per_sample_cross_entropy(&net.forward(&x.add(&delta)?)?, labels);
        best = Some(match best {
            None => (delta, loss),
            Some((mut bd, mut bl)) => {
                keep_better(&mut bd, &mut bl, &delta, &loss);
                (bd, bl)
            }
        });
    }
    Ok(best.expect("at least one restart").0)
}

/// Per sample, replace `best` by `cand` where `cand` scores strictly higher.
fn keep_better<T: PartialOrd + Copy>(best: &mut Tensor, best_score: &mut [T], cand: &Tensor, score: &[T]) {
    let len = best.sample_len();
    for (n, (b, &c)) in best_score.iter_mut().zip(score).enumerate() {
        if c > *b {
            *b = c;
            best.data_mut()[n * len..(n + 1) * len].copy_from_slice(cand.sample(n));
        }
    }
}

/// Clean features for the layers in `set`, computed once and held fixed.
fn clean_features(net: &Network, x: &Tensor, set: &[usize]) -> Result<Vec<(usize, Tensor)>> {
    let upto = *set.iter().max().expect("non-empty set");
    let mut tape = Tape::new();
    let (_, _, trace) = net.trace_input(&mut tape, x.clone(), upto)?;
    Ok(set
        .iter()
        .map(|&i| (i, tape.value(trace.feature(i)).clone()))
        .collect())
}

/// Per-sample `Σ_{i∈S} ‖F_i(x_adv) − F_i(x)‖₂` against fixed clean features,
/// and optionally its gradient with respect to `x_adv`.
fn feature_objective(
    net: &Network,
    x_adv: &Tensor,
    clean: &[(usize, Tensor)],
    with_grad: bool,
) -> Result<(Vec<f32>, Option<Tensor>)> {
    let upto = clean.iter().map(|(i, _)| *i).max().expect("non-empty set");
    let mut tape = Tape::new();
    let (input, params, trace) = net.trace_input(&mut tape, x_adv.clone(), upto)?;
    let mut total = None;
    for (i, feat) in clean {
        let c = tape.leaf(feat.clone());
        let d = tape.sub(trace.feature(*i), c)?;
        let norms = tape.sample_norms(d);
        total = Some(match total {
            None => norms,
            Some(t) => tape.add(t, norms)?,
        });
    }
    let total = total.expect("non-empty set");
    let per_sample = tape.value(total).data().to_vec();
    let grad = if with_grad {
        let loss = tape.sum(total);
        let g = net.backward(&tape, loss, input, &params, &GradientRequest::input())?;
        g.input
    } else {
        None
    };
    Ok((per_sample, grad))
}

fn check_set(net: &Network, set: &[usize]) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Usage("feature attack needs a non-empty layer set".into()));
    }
    set.iter().try_for_each(|&i| net.check_index(i))
}

/// Per-sample feature deviation `Σ_{i∈S} ‖F_i(x + δ) − F_i(x)‖₂`.
pub fn feature_deviation(net: &Network, x: &Tensor, delta: &Tensor, set: &[usize]) -> Result<Vec<f64>> {
    check_set(net, set)?;
    check_batch(net, x, None)?;
    let clean = clean_features(net, x, set)?;
    let (obj, _) = feature_objective(net, &x.add(delta)?, &clean, false)?;
    Ok(obj.into_iter().map(f64::from).collect())
}

/// PGD ascent on `Σ_{i∈S} ‖F_i(x + δ) − F_i(x)‖₂` with clean features held
/// fixed. Returns, per sample, the best iterate seen over all restarts (the
/// starts included), so the objective at the result never falls below the
/// starting point.
pub fn feature_deviation_pgd<R: Rng + ?Sized>(
    net: &Network,
    x: &Tensor,
    set: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    check_set(net, set)?;
    check_batch(net, x, None)?;
    let clean = if cfg.epsilon == 0.0 { Vec::new() } else { clean_features(net, x, set)? };
    let mut best: Option<Tensor> = None;
    let mut best_obj = vec![f32::NEG_INFINITY; x.batch()];
    for _ in 0..cfg.restarts {
        let mut delta = random_start(x, cfg, rng);
        if cfg.epsilon == 0.0 {
            return Ok(delta);
        }
        let best = best.get_or_insert_with(|| delta.clone());
        for step in 0..=cfg.steps {
            let last = step == cfg.steps;
            let (obj, grad) = feature_objective(net, &x.add(&delta)?, &clean, !last)?;
            keep_better(best, &mut best_obj, &delta, &obj);
            if let Some(grad) = grad {
                ascend(&mut delta, &grad, cfg.alpha, cfg.norm);
                project(x, &mut delta, cfg);
            }
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Single-step variant of [`feature_deviation_pgd`]: `δ = ε·sign(∇)` taken
/// at the random start.
pub fn feature_fgsm<R: Rng + ?Sized>(
    net: &Network,
    x: &Tensor,
    set: &[usize],
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    check_set(net, set)?;
    check_batch(net, x, None)?;
    let eta = random_start(x, cfg, rng);
    if cfg.epsilon == 0.0 {
        return Ok(eta);
    }
    let clean = clean_features(net, x, set)?;
    let (_, grad) = feature_objective(net, &x.add(&eta)?, &clean, true)?;
    let mut delta = Tensor::zeros(x.shape().to_vec());
    ascend(&mut delta, &grad.expect("gradient requested"), cfg.epsilon, cfg.norm);
    project(x, &mut delta, cfg);
    Ok(delta)
}
