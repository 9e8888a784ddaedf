//! `clat` command-line tool: adversarial pretraining, critical-layer
//! fine-tuning, criticality profiling, attack evaluation and run reports.

pub mod config;
pub mod report;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use clat_core::attacks::AttackConfig;
use clat_core::checkpoint::{load_checkpoint, save_checkpoint, TrainState};
use clat_core::criticality::{criticality_indices, stability_probe, CriticalityReport};
use clat_core::metrics::{format_set, load_metrics, save_metrics};
use clat_core::rng::{self, Purpose};
use clat_core::trainer::{robust_accuracy, EpochMetrics, EvalAttack, Observer, Phase, Trainer};
use clat_core::{Error, Network, Result};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "clat", version, about = "Critical-layer adversarial training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Adversarially train every layer for `train.pretrain_epochs` epochs.
    Pretrain(PretrainArgs),
    /// Fine-tune the critical layers of a pretrained checkpoint.
    Finetune(FinetuneArgs),
    /// Rank layers by criticality and optionally probe selection stability.
    Criticality(CriticalityArgs),
    /// Clean and adversarial accuracy over a list of budgets.
    AttackEval(AttackEvalArgs),
    /// Compare metrics CSV files from several runs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Overrides `train.pretrain_epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Select the critical set once and never change it.
    #[arg(long)]
    pub fixed_layers: bool,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f32>,
    #[arg(long)]
    pub reselect_period: Option<usize>,
    /// Number of fine-tuning epochs; defaults to `total_epochs - pretrain_epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CriticalityArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Samples drawn from the training set; defaults to `train.criticality_batch`.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub stability: bool,
    #[arg(long, value_delimiter = ',', default_value = "10,30,50,100")]
    pub batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
}

#[derive(Debug, Args)]
pub struct AttackEvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Budgets to evaluate; defaults to `attack.epsilon`.
    #[arg(long, value_delimiter = ',')]
    pub eps: Vec<f32>,
    /// `pgd` or `fgsm`.
    #[arg(long, default_value = "pgd")]
    pub attack: String,
    /// A sample counts as robust only if it survives every restart.
    #[arg(long, default_value_t = 1)]
    pub restarts: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Evaluate on the first N test samples only.
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub csv: Vec<PathBuf>,
    /// Write the plot-ready series here instead of stdout.
    #[arg(long)]
    pub series: Option<PathBuf>,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(&a, out),
        Command::Finetune(a) => cmd_finetune(&a, out),
        Command::Criticality(a) => cmd_criticality(&a, out),
        Command::AttackEval(a) => cmd_attack_eval(&a, out),
        Command::Report(a) => cmd_report(&a, out),
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    if let Some(dir) = &c.out {
        cfg.output.dir = dir.clone();
    }
    Ok(cfg)
}

fn eval_subset(cfg: &RunConfig, test: &clat_core::data::Dataset) -> Result<clat_core::data::Dataset> {
    test.slice(0, cfg.data.eval_count.min(test.len()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io_at(path, e))
}

fn load_matching(cfg: &RunConfig, path: &Path) -> Result<(Network, TrainState)> {
    let (net, state) = load_checkpoint(path)?;
    let arch = cfg.architecture()?;
    if net.architecture() != &arch {
        return Err(Error::Compatibility(format!(
            "{} holds a different network than [model] describes ({} vs {} layers, input {:?} vs {:?})",
            path.display(),
            net.num_layers(),
            arch.layers.len(),
            net.input_shape(),
            arch.input_shape
        )));
    }
    Ok((net, state))
}

/// Prints one line per epoch and per reselection, mirrored to a log file.
struct Logger<'a> {
    out: &'a mut dyn Write,
    log: BufWriter<File>,
}

impl Logger<'_> {
    fn line(&mut self, s: &str) {
        let _ = writeln!(self.out, "{s}");
        let _ = writeln!(self.log, "{s}");
    }
}

impl Observer for Logger<'_> {
    fn on_reselect(&mut self, epoch: usize, r: &CriticalityReport) {
        let c: Vec<String> = r.selected.iter().map(|&i| format!("{:.4}", r.criticality[i - 1])).collect();
        self.line(&format!(
            "epoch {epoch}: critical set {} (C = {})",
            format_set(&r.selected),
            c.join(", ")
        ));
    }

    fn on_epoch(&mut self, m: &EpochMetrics) {
        self.line(&format!(
            "epoch {} [{}] clean {:.4} adv {:.4} ce {:.4} crit {:.4} trainable {:.4}",
            m.epoch, m.phase, m.clean_acc, m.adv_acc, m.ce_loss, m.crit_loss, m.trainable_frac
        ));
    }
}

fn logger<'a>(cfg: &RunConfig, name: &str, out: &'a mut dyn Write) -> Result<Logger<'a>> {
    let path = cfg.output.dir.join(name);
    let f = File::create(&path).map_err(|e| Error::io_at(&path, e))?;
    Ok(Logger {
        out,
        log: BufWriter::new(f),
    })
}

pub fn cmd_pretrain(a: &PretrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(e) = a.epochs {
        cfg.train.pretrain_epochs = e;
        cfg.train.total_epochs = cfg.train.total_epochs.max(e);
    }
    cfg.validate()?;
    cfg.write_echo(&cfg.output.dir)?;
    let (train, test) = cfg.datasets()?;
    let eval = eval_subset(&cfg, &test)?;
    let net = Network::init(cfg.architecture()?, cfg.train.seed)?;
    let mut tc = cfg.train.clone();
    tc.total_epochs = tc.pretrain_epochs;
    let mut t = Trainer::new(net, tc, cfg.attack.to_config()?)?;
    let mut log = logger(&cfg, "pretrain.log", out)?;
    t.run(&train, &eval, &mut log)?;
    save_checkpoint(&t.net, &t.state(), cfg.checkpoint_path())?;
    save_metrics(cfg.metrics_path(), &t.history)?;
    log.line(&format!(
        "wrote {} and {}",
        cfg.checkpoint_path().display(),
        cfg.metrics_path().display()
    ));
    Ok(())
}

pub fn cmd_finetune(a: &FinetuneArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    let tc = &mut cfg.train;
    tc.fixed_layers |= a.fixed_layers;
    tc.k = a.k.or(tc.k);
    tc.lambda = a.lambda.unwrap_or(tc.lambda);
    tc.reselect_period = a.reselect_period.unwrap_or(tc.reselect_period);
    let clat_epochs = a.epochs.unwrap_or(tc.clat_epochs());
    cfg.validate()?;
    let (net, mut state) = load_matching(&cfg, &a.checkpoint)?;
    // The fine-tuning phase starts right after the checkpointed epoch.
    if state.phase == Phase::Pretrain {
        cfg.train.pretrain_epochs = state.epoch;
        cfg.train.total_epochs = state.epoch + clat_epochs;
    } else if state.epoch < cfg.train.pretrain_epochs {
        return Err(Error::Compatibility(format!(
            "checkpoint is at fine-tuning epoch {} but the config pretrains for {}",
            state.epoch, cfg.train.pretrain_epochs
        )));
    }
    if a.common.seed.is_some() || state.phase == Phase::Pretrain {
        state.seed = cfg.train.seed;
    }
    cfg.write_echo(&cfg.output.dir)?;
    let (train, test) = cfg.datasets()?;
    let eval = eval_subset(&cfg, &test)?;
    let mut t = Trainer::resume(net, state, cfg.train.clone(), cfg.attack.to_config()?)?;
    let mut log = logger(&cfg, "finetune.log", out)?;
    t.run(&train, &eval, &mut log)?;
    save_checkpoint(&t.net, &t.state(), cfg.checkpoint_path())?;
    save_metrics(cfg.metrics_path(), &t.history)?;
    log.line(&format!(
        "{} reselections; wrote {} and {}",
        t.reselections,
        cfg.checkpoint_path().display(),
        cfg.metrics_path().display()
    ));
    Ok(())
}

/// Ranked per-layer table, most critical first.
pub fn criticality_table(r: &CriticalityReport) -> String {
    let mut s = format!("{:>4} {:>5} {:>14} {:>14}\n", "rank", "layer", "W", "C");
    for (rank, i) in r.ranking().into_iter().enumerate() {
        s += &format!(
            "{:>4} {:>5} {:>14.6e} {:>14.6}{}\n",
            rank + 1,
            i,
            r.weakness[i - 1],
            r.criticality[i - 1],
            if r.selected.contains(&i) { "  *" } else { "" }
        );
    }
    s
}

pub fn cmd_criticality(a: &CriticalityArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let (net, _) = load_matching(&cfg, &a.checkpoint)?;
    let (train, _) = cfg.datasets()?;
    let attack = cfg.attack.to_config()?;
    let k = a.k.unwrap_or_else(|| cfg.train.k_for(net.num_layers()));
    let seed = cfg.train.seed;
    let mut r = rng::stream(seed, 0, Purpose::Criticality);
    let count = a.batch.unwrap_or(cfg.train.criticality_batch).min(train.len());
    let idx = train.sample_indices(count, &mut r)?;
    let (x, y) = train.batch(&idx)?;
    let report = criticality_indices(&net, &x, &y, &attack, seed)?.select(k)?;
    fs::create_dir_all(&cfg.output.dir).map_err(|e| Error::io_at(&cfg.output.dir, e))?;
    cfg.write_echo(&cfg.output.dir)?;
    write_file(&cfg.output.dir.join("criticality.txt"), &(report.to_record() + "\n"))?;
    writeln!(out, "{}", criticality_table(&report))?;
    writeln!(out, "critical set (k = {k}): {}", format_set(&report.selected))?;
    writeln!(out, "reconstruction error: {:.3e}", report.reconstruction_error())?;
    if a.stability {
        let s = stability_probe(&net, &train, &a.batch_sizes, a.trials, k, &attack, seed)?;
        writeln!(out, "\nstability ({} trials per batch size)", a.trials)?;
        writeln!(out, "{:>6} {:>12} {:>10} {:>10} {:>10}", "batch", "modal_topk", "topk_rate", "top1_pair", "top1_agree")?;
        for b in &s.per_batch {
            writeln!(
                out,
                "{:>6} {:>12} {:>10.4} {:>10.4} {:>10.4}",
                b.batch_size,
                format_set(&b.modal_topk),
                b.modal_topk_rate,
                b.pairwise_top1_agreement,
                b.top1_agreement
            )?;
        }
        writeln!(out, "modal top-1 layer {} agreement {:.4}", s.modal_top1, s.overall_top1_agreement)?;
    }
    Ok(())
}

pub fn cmd_attack_eval(a: &AttackEvalArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let (net, _) = load_matching(&cfg, &a.checkpoint)?;
    let (_, test) = cfg.datasets()?;
    let test = match a.count {
        Some(n) => test.slice(0, n.min(test.len()))?,
        None => test,
    };
    let kind: EvalAttack = a.attack.parse()?;
    let base = cfg.attack.to_config()?;
    let eps = if a.eps.is_empty() { vec![base.epsilon] } else { a.eps.clone() };
    let mut table = String::from("attack,epsilon,restarts,clean_acc,adv_acc\n");
    writeln!(out, "{:>6} {:>8} {:>8} {:>10} {:>10}", "attack", "epsilon", "restarts", "clean", "adv")?;
    for &e in &eps {
        // The step size keeps its ratio to the budget from the config.
        let ratio = if base.epsilon > 0.0 { base.alpha / base.epsilon } else { 0.25 };
        let attack = AttackConfig {
            epsilon: e,
            alpha: (ratio * e).max(1e-6),
            steps: a.steps.unwrap_or(base.steps),
            ..base
        };
        attack.validate()?;
        let (clean, adv) = robust_accuracy(&net, &test, Some(&attack), kind, a.restarts, cfg.train.seed)?;
        writeln!(out, "{:>6} {:>8} {:>8} {:>10.4} {:>10.4}", a.attack, e, a.restarts, clean, adv)?;
        table += &format!("{},{e},{},{clean},{adv}\n", a.attack, a.restarts);
    }
    fs::create_dir_all(&cfg.output.dir).map_err(|e| Error::io_at(&cfg.output.dir, e))?;
    write_file(&cfg.output.dir.join("attack_eval.csv"), &table)?;
    Ok(())
}

pub fn cmd_report(a: &ReportArgs, out: &mut dyn Write) -> Result<()> {
    let mut runs = Vec::new();
    for p in &a.csv {
        let rows = load_metrics(p).map_err(|e| match e {
            Error::Parse { row, message } => Error::Parse {
                row,
                message: format!("{}: {message}", p.display()),
            },
            other => other,
        })?;
        let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        let name = if runs.iter().any(|(n, _): &(String, _)| *n == name) {
            format!("{name}_{}", runs.len() + 1)
        } else {
            name
        };
        runs.push((name, rows));
    }
    let rep = report::build(&runs);
    write!(out, "{}", rep.summary_text())?;
    match &a.series {
        Some(p) => write_file(p, &rep.series_csv())?,
        None => write!(out, "\n{}", rep.series_csv())?,
    }
    Ok(())
}

/// Parse arguments, run, and map failures to `error[category]: message`.
pub fn main_with(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            eprint!("error[usage]: {}", e.render());
            return 2;
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match run(cli, &mut out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            1
        }
    }
}
