//! Layer weakness, criticality indices and critical-layer selection.
//!
//! The ε-weakness of layer `i` is the mean feature deviation
//! `‖F_i(x+δ) − F_i(x)‖₂` divided by the feature dimensionality `N_i`.
//! The criticality index of layer `i ≥ 2` is the ratio of its weakness to
//! that of layer `i − 1`; for the first layer it is the weakness itself, so
//! the running product of indices reconstructs every weakness.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::{self, AttackConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::network::{GradientRequest, Network};
use crate::rng::{self, Purpose};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Weaknesses below this are treated as dead features when dividing.
pub const DIVISION_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalityReport {
    /// `W_ε(F_i)` for `i = 1..=n` (stored at `i - 1`).
    pub weakness: Vec<f64>,
    /// `C_{f_i}` for `i = 1..=n`.
    pub criticality: Vec<f64>,
    /// Selected critical layers, most critical first. Empty until [`Self::select`].
    pub selected: Vec<usize>,
    pub epsilon: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl CriticalityReport {
    pub fn num_layers(&self) -> usize {
        self.weakness.len()
    }

    /// Fill `selected` with the top-`k` layers.
    pub fn select(mut self, k: usize) -> Result<Self> {
        self.selected = select_topk(&self.criticality, k)?;
        Ok(self)
    }

    /// Layers ordered by descending criticality (ties: smaller index first).
    pub fn ranking(&self) -> Vec<usize> {
        select_topk(&self.criticality, self.criticality.len()).expect("k = n is always valid")
    }

    /// Largest relative error of `Π_{j≤i} C_{f_j}` against `W_ε(F_i)`.
    pub fn reconstruction_error(&self) -> f64 {
        let mut prod = 1.0f64;
        let mut worst = 0.0f64;
        for (c, w) in self.criticality.iter().zip(&self.weakness) {
            prod *= c;
            let err = if *w == 0.0 { prod.abs() } else { ((prod - w) / w).abs() };
            worst = worst.max(err);
        }
        worst
    }

    /// One-line text record:
    /// `criticality eps=<ε> batch=<n> seed=<s> W=<w1,..> C=<c1,..> S=<i,..>`.
    pub fn to_record(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        write!(
            s,
            "criticality eps={} batch={} seed={} W={} C={} S={}",
            self.epsilon,
            self.batch_size,
            self.seed,
            join(&self.weakness),
            join(&self.criticality),
            self.selected.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        )
        .expect("writing to a string");
        s
    }

    pub fn from_record(line: &str) -> Result<Self> {
        let bad = |m: String| Error::Parse { row: 1, message: m };
        let mut fields = line.split_whitespace();
        if fields.next() != Some("criticality") {
            return Err(bad("record must start with 'criticality'".into()));
        }
        let mut map = BTreeMap::new();
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| bad(format!("field '{f}' has no '='")))?;
            map.insert(k, v);
        }
        let get = |k: &str| map.get(k).copied().ok_or_else(|| bad(format!("missing field '{k}'")));
        let floats = |v: &str| -> Result<Vec<f64>> {
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|x| x.parse::<f64>().map_err(|e| bad(format!("'{x}': {e}"))))
                .collect()
        };
        let selected = {
            let v = get("S")?;
            if v.is_empty() {
                Vec::new()
            } else {
                v.split(',')
                    .map(|x| x.parse::<usize>().map_err(|e| bad(format!("'{x}': {e}"))))
                    .collect::<Result<_>>()?
            }
        };
        Ok(Self {
            epsilon: get("eps")?.parse().map_err(|e| bad(format!("eps: {e}")))?,
            batch_size: get("batch")?.parse().map_err(|e| bad(format!("batch: {e}")))?,
            seed: get("seed")?.parse().map_err(|e| bad(format!("seed: {e}")))?,
            weakness: floats(get("W")?)?,
            criticality: floats(get("C")?)?,
            selected,
        })
    }
}

/// `⌈0.05·n⌉`, at least 1: roughly one critical layer per twenty.
pub fn default_k(num_layers: usize) -> usize {
    num_layers.div_ceil(20).max(1)
}

/// `(1/N) · mean_n ‖a_n − b_n‖₂` over per-sample feature rows, in 64-bit.
fn normalized_mean_deviation(adv: &Tensor, clean: &Tensor) -> f64 {
    let len = clean.sample_len();
    let total: f64 = adv
        .data()
        .chunks(len)
        .zip(clean.data().chunks(len))
        .map(|(a, c)| {
            a.iter()
                .zip(c)
                .map(|(&p, &q)| {
                    let d = p as f64 - q as f64;
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / clean.batch() as f64 / len as f64
}

/// `W_ε(F_i)` for every layer from one clean and one perturbed tapped pass.
pub fn weakness_profile(net: &Network, x: &Tensor, delta: &Tensor) -> Result<Vec<f64>> {
    let taps: Vec<usize> = (1..=net.num_layers()).collect();
    let (_, clean) = net.forward_with_taps(x, &taps)?;
    let (_, adv) = net.forward_with_taps(&x.add(delta)?, &taps)?;
    Ok(taps
        .iter()
        .map(|&i| normalized_mean_deviation(&adv.features[&i], &clean.features[&i]))
        .collect())
}

/// `W_ε(F_i)` for a single layer.
pub fn layer_weakness(net: &Network, x: &Tensor, delta: &Tensor, layer: usize) -> Result<f64> {
    net.check_index(layer)?;
    let (_, clean) = net.forward_with_taps(x, &[layer])?;
    let (_, adv) = net.forward_with_taps(&x.add(delta)?, &[layer])?;
    Ok(normalized_mean_deviation(&adv.features[&layer], &clean.features[&layer]))
}

/// Criticality indices from a weakness profile.
pub fn indices_from_weakness(weakness: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(weakness.len());
    for (i, &w) in weakness.iter().enumerate() {
        if i == 0 {
            out.push(w);
            continue;
        }
        let prev = weakness[i - 1];
        if prev < DIVISION_GUARD {
            return Err(Error::DegenerateFeature {
                layer: i + 1,
                weakness: prev,
            });
        }
        out.push(w / prev);
    }
    Ok(out)
}

/// Run one untargeted PGD attack on the batch, then measure every layer's
/// weakness with exactly two tapped forward passes and derive the indices.
/// The returned report has no selection yet.
pub fn criticality_indices(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<CriticalityReport> {
    if x.rank() < 2 || x.batch() == 0 {
        return Err(Error::Usage("criticality needs a non-empty batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delta = attacks::pgd_untargeted(net, x, labels, cfg, &mut rng)?;
    let weakness = weakness_profile(net, x, &delta)?;
    let criticality = indices_from_weakness(&weakness)?;
    Ok(CriticalityReport {
        weakness,
        criticality,
        selected: Vec::new(),
        epsilon: cfg.epsilon,
        batch_size: x.batch(),
        seed,
    })
}

/// 1-based indices of the `k` largest criticality values, largest first;
/// ties go to the smaller layer index.
pub fn select_topk(criticality: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > criticality.len() {
        return Err(Error::Usage(format!(
            "k = {k} outside 1..={}",
            criticality.len()
        )));
    }
    let mut order: Vec<usize> = (0..criticality.len()).collect();
    order.sort_by(|&a, &b| criticality[b].total_cmp(&criticality[a]).then(a.cmp(&b)));
    Ok(order.into_iter().take(k).map(|i| i + 1).collect())
}

/// Agreement statistics for one batch size.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStability {
    pub batch_size: usize,
    pub trials: usize,
    /// Most frequent top-k set (sorted ascending) and its frequency.
    pub modal_topk: Vec<usize>,
    pub modal_topk_rate: f64,
    /// Fraction of trial pairs that agree on the top-1 layer.
    pub pairwise_top1_agreement: f64,
    /// Fraction of trials whose top-1 equals the top-1 that is most common
    /// over every batch size.
    pub top1_agreement: f64,
    pub top1_counts: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub per_batch: Vec<BatchStability>,
    /// Most common top-1 layer over all trials of all batch sizes.
    pub modal_top1: usize,
    /// Fraction of all trials whose top-1 equals `modal_top1`.
    pub overall_top1_agreement: f64,
}

fn modal<T: Ord + Clone>(items: &[T]) -> (T, usize) {
    let mut counts: BTreeMap<&T, usize> = BTreeMap::new();
    for it in items {
        *counts.entry(it).or_default() += 1;
    }
    // BTreeMap order makes ties resolve to the smallest key.
    let (k, c) = counts
        .into_iter()
        .fold(None::<(&T, usize)>, |best, (k, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((k, c)),
        })
        .expect("non-empty");
    (k.clone(), c)
}

/// Repeat the criticality computation on fresh random batches of each size
/// and report how consistently the same layers come out on top.
pub fn stability_probe(
    net: &Network,
    data: &Dataset,
    batch_sizes: &[usize],
    trials: usize,
    k: usize,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<StabilityReport> {
    if trials < 2 {
        return Err(Error::Usage(format!("stability probe needs >= 2 trials, got {trials}")));
    }
    if batch_sizes.is_empty() {
        return Err(Error::Usage("stability probe needs at least one batch size".into()));
    }
    if let Some(&b) = batch_sizes.iter().find(|&&b| b == 0 || b > data.len()) {
        return Err(Error::Usage(format!(
            "batch size {b} exceeds dataset of {} samples",
            data.len()
        )));
    }
    select_topk(&vec![0.0; net.num_layers()], k)?;

    let jobs: Vec<(usize, usize)> = batch_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, _)| (0..trials).map(move |t| (b, t)))
        .collect();
    let outcomes = exec::map_indexed(jobs.len(), |j| -> Result<Vec<usize>> {
        let (b, t) = jobs[j];
        let trial_seed = seed ^ ((b as u64) << 32) ^ t as u64;
        let mut r = rng::stream(trial_seed, batch_sizes[b] as u64, Purpose::Probe);
        let idx = data.sample_indices(batch_sizes[b], &mut r)?;
        let (x, y) = data.batch(&idx)?;
        let report = criticality_indices(net, &x, &y, cfg, rand::Rng::random(&mut r))?;
        select_topk(&report.criticality, k)
    });
    let topk: Vec<Vec<usize>> = outcomes.into_iter().collect::<Result<_>>()?;

    let all_top1: Vec<usize> = topk.iter().map(|s| s[0]).collect();
    let (modal_top1, modal_count) = modal(&all_top1);

    let per_batch = batch_sizes
        .iter()
        .enumerate()
        .map(|(b, &bs)| {
            let sets = &topk[b * trials..(b + 1) * trials];
            let sorted: Vec<Vec<usize>> = sets
                .iter()
                .map(|s| {
                    let mut s = s.clone();
                    s.sort_unstable();
                    s
                })
                .collect();
            let (modal_topk, count) = modal(&sorted);
            let top1: Vec<usize> = sets.iter().map(|s| s[0]).collect();
            let mut agree = 0usize;
            for a in 0..trials {
                for c in a + 1..trials {
                    agree += usize::from(top1[a] == top1[c]);
                }
            }
            let pairs = trials * (trials - 1) / 2;
            let mut top1_counts = BTreeMap::new();
            for &t in &top1 {
                *top1_counts.entry(t).or_default() += 1;
            }
            BatchStability {
                batch_size: bs,
                trials,
                modal_topk,
                modal_topk_rate: count as f64 / trials as f64,
                pairwise_top1_agreement: agree as f64 / pairs as f64,
                top1_agreement: top1.iter().filter(|&&t| t == modal_top1).count() as f64 / trials as f64,
                top1_counts,
            }
        })
        .collect();

    Ok(StabilityReport {
        per_batch,
        modal_top1,
        overall_top1_agreement: modal_count as f64 / all_top1.len() as f64,
    })
}

/// Curvature-based weakness of layer `i`:
/// `ν_i = ‖∇G_i(x')‖₂ / ‖x' − x‖₂` with `G_i(z) = ‖F_i(z) − F_i(x)‖₂²`,
/// where `x'` comes from the feature-deviation attack on layer `i`.
/// `∇G_i(x') = 2·Jᵀ(F_i(x') − F_i(x))` is obtained from a single
/// vector-Jacobian backward pass. Samples with `x' = x` contribute 0.
/// Returns the batch mean.
pub fn curvature_weakness(
    net: &Network,
    x: &Tensor,
    layer: usize,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<f64> {
    net.check_index(layer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let delta = attacks::feature_deviation_pgd(net, x, &[layer], cfg, &mut rng)?;
    curvature_at(net, x, &delta, layer)
}

/// [`curvature_weakness`] for a given perturbation.
pub fn curvature_at(net: &Network, x: &Tensor, delta: &Tensor, layer: usize) -> Result<f64> {
    net.check_index(layer)?;
    let mut clean_tape = Tape::new();
    let (_, _, clean_trace) = net.trace_input(&mut clean_tape, x.clone(), layer)?;
    let clean = clean_tape.value(clean_trace.feature(layer)).clone();

    let mut tape = Tape::new();
    let (input, params, trace) = net.trace_input(&mut tape, x.add(delta)?, layer)?;
    let c = tape.leaf(clean);
    let diff = tape.sub(trace.feature(layer), c)?;
    let sq = tape.mul(diff, diff)?;
    let g_sum = tape.sum(sq);
    let grads = net.backward(&tape, g_sum, input, &params, &GradientRequest::input())?;
    let grad = grads.input.expect("input gradient requested");

    let len = x.sample_len();
    let total: f64 = (0..x.batch())
        .map(|n| {
            let dn = delta.sample(n).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if dn == 0.0 {
                return 0.0;
            }
            let gn = grad.data()[n * len..(n + 1) * len]
                .iter()
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            gn / dn
        })
        .sum();
    Ok(total / x.batch() as f64)
}
