//! Command-line front end. The binary only parses [`Cli`] and calls [`run`].

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{
    self, count_boundary_crossings, loss_perturbation_probe, output_density, regress2d, symmetric_kl, variance,
    DistanceTrace, Regress2dConfig,
};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::scheduler::{unstable_criterion, CriterionMode, CriterionReport, DEFAULT_EPSILON};
use crate::search::{search, BitOpsModel, SupernetEvaluator};
use crate::supernet::{Policy, StepMetrics, Supernet, Trainer};

#[derive(Debug, Parser)]
#[command(name = "bitshare", version, about = "Weight-sharing mixed-precision quantization")]
pub struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel evaluation.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Disable bit freezing.
    #[arg(long, global = true)]
    pub no_schedule: bool,
    /// Disable feature alignment.
    #[arg(long, global = true)]
    pub no_idm: bool,
    /// Apply weight decay on every sample, not only max-bit ones.
    #[arg(long, global = true)]
    pub no_fairness: bool,
    #[arg(long, global = true, value_parser = ["literal", "bound"])]
    pub criterion_mode: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a supernet.
    Train(TrainArgs),
    /// Greedy bit-width search on a trained checkpoint.
    Search(SearchArgs),
    /// Accuracy of one policy.
    Eval(EvalArgs),
    /// Diagnostic probes.
    Analyze {
        #[command(subcommand)]
        probe: Probe,
    },
    /// Write per-layer instability scores of a checkpoint.
    CriterionDump(CriterionArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps (checkpoint is still written).
    #[arg(long)]
    pub max_steps: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// BitOps budget.
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// JSON policy file (array of `[w, a]` pairs).
    #[arg(long, conflicts_with = "uniform")]
    pub policy: Option<PathBuf>,
    /// Same bits on every free layer.
    #[arg(long)]
    pub uniform: Option<u8>,
}

#[derive(Debug, Subcommand)]
pub enum Probe {
    /// Scalar regression through shared quantizers.
    Regress2d(RegressArgs),
    /// Latent-to-quantized weight distance during training.
    Distance(DistanceArgs),
    /// Output histograms of one layer under several bit-widths.
    Density(DensityArgs),
    /// Loss change of a high-bit policy after a low-bit update.
    Perturb(PerturbArgs),
}

#[derive(Debug, Args)]
pub struct RegressArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [2u8, 4])]
    pub bits: Vec<u8>,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub w_star: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DistanceArgs {
    #[arg(long, default_value_t = 1)]
    pub layer: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [6u8])]
    pub bits: Vec<u8>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Record every this many steps.
    #[arg(long, default_value_t = 10)]
    pub every: u64,
}

#[derive(Debug, Args)]
pub struct DensityArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub layer: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [2u8, 6])]
    pub bits: Vec<u8>,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    #[arg(long, default_value_t = 512)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Bits of the observed policy; the max candidate when omitted.
    #[arg(long)]
    pub high: Option<u8>,
    #[arg(long, value_delimiter = ',', default_values_t = [2u8, 5])]
    pub low: Vec<u8>,
    #[arg(long, default_value_t = 20)]
    pub batches: usize,
    #[arg(long, default_value_t = 0.04)]
    pub lr: f64,
}

#[derive(Debug, Args)]
pub struct CriterionArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
}

/// Stable process exit codes.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::Json(_)
        | Error::File { .. }
        | Error::Idx(_)
        | Error::Checkpoint(_) => 2,
        Error::Numerical(_) | Error::NonFinite(_) => 3,
        Error::Infeasible { .. } | Error::BudgetUnmet { .. } => 4,
        _ => 1,
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if cli.no_schedule {
        cfg.train.schedule.enabled = false;
    }
    if cli.no_idm {
        cfg.train.idm.enabled = false;
    }
    if cli.no_fairness {
        cfg.train.fairness = false;
    }
    if let Some(m) = &cli.criterion_mode {
        cfg.train.schedule.mode = m.parse()?;
    }
    cfg.finalize()?;
    Ok(cfg)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::file(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

fn checkpoint_path(cfg: &RunConfig, given: Option<&PathBuf>) -> PathBuf {
    given.cloned().unwrap_or_else(|| cfg.out_dir.join("checkpoint.bin"))
}

/// Builds the configured model and loads weights from a checkpoint.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<Supernet> {
    let mut model = cfg.build_model()?;
    Checkpoint::load(path)?.restore_model(&mut model)?;
    Ok(model)
}

fn calibration(cfg: &RunConfig, train: &Dataset) -> Vec<Batch> {
    train
        .batches(cfg.search.batch_size)
        .take(cfg.search.calibration_batches)
        .collect()
}

pub const TRAIN_LOG_HEADER: &str = "step,epoch,lr,mean_loss,policy_losses,idm_loss,frozen";

/// One CSV row; list fields use `;` between items and `|` between layers.
pub fn train_log_row(m: &StepMetrics) -> String {
    let policies: Vec<String> = m
        .losses
        .iter()
        .map(|l| {
            let bits: Vec<String> = l.policy.0.iter().map(|p| format!("{}/{}", p.w, p.a)).collect();
            format!("{}{}={}", if l.reference { "*" } else { "" }, bits.join("|"), l.loss)
        })
        .collect();
    let idm: Vec<String> = m.idm.iter().map(|(l, v)| format!("{l}={v}")).collect();
    let frozen: Vec<String> = m
        .frozen
        .iter()
        .map(|e| format!("{}:{}@{}", e.layer, e.bit, e.expiry))
        .collect();
    format!(
        "{},{},{},{},{},{},{}",
        m.step,
        m.epoch,
        m.lr,
        m.mean_loss,
        policies.join(";"),
        idm.join(";"),
        frozen.join(";")
    )
}

fn open_append(path: &Path, header: &str, append: bool) -> Result<fs::File> {
    let fresh = !append || !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(path)
        .map_err(|e| Error::file(path, e))?;
    if fresh {
        writeln!(f, "{header}").map_err(|e| Error::file(path, e))?;
    }
    Ok(f)
}

fn meta(cfg: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

pub fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
        cfg.validate()?;
    }
    ensure_dir(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("config.json"), &cfg)?;
    let (train, val) = cfg.load_data()?;
    let mut trainer = Trainer::new(cfg.build_model()?, cfg.train.clone(), &train)?;
    if let Some(r) = &args.resume {
        Checkpoint::load(r)?.restore_trainer(&mut trainer)?;
    }
    let resumed = args.resume.is_some();
    let log_path = cfg.out_dir.join("train_log.csv");
    let crit_path = cfg.out_dir.join("criterion.csv");
    let mut log = open_append(&log_path, TRAIN_LOG_HEADER, resumed)?;
    let mut crit = open_append(&crit_path, CriterionReport::CSV_HEADER, resumed)?;
    let ckpt = cfg.out_dir.join("checkpoint.bin");
    let stop = args.max_steps.unwrap_or(u64::MAX).min(trainer.total_steps());
    while trainer.step() < stop {
        let m = trainer.train_step(&train)?;
        writeln!(log, "{}", train_log_row(&m)).map_err(|e| Error::file(&log_path, e))?;
        if let Some(r) = &m.criterion {
            for row in r.csv_rows() {
                writeln!(crit, "{row}").map_err(|e| Error::file(&crit_path, e))?;
            }
        }
        if trainer.step() % trainer.steps_per_epoch() == 0 {
            Checkpoint::from_trainer(&trainer, meta(&cfg)?).save(&ckpt)?;
            println!(
                "epoch {} step {} loss {:.4}",
                trainer.step() / trainer.steps_per_epoch(),
                trainer.step(),
                m.mean_loss
            );
        }
    }
    Checkpoint::from_trainer(&trainer, meta(&cfg)?).save(&ckpt)?;
    let policy = trainer.model.space().max_policy();
    let mut model = trainer.model.clone();
    model.bn_recalibrate(&policy, &calibration(&cfg, &train))?;
    let r = model.evaluate(&policy, &val, 256)?;
    println!(
        "max-bit policy: accuracy {:.4} loss {:.4}; checkpoint {}",
        r.accuracy,
        r.loss,
        ckpt.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SearchSummary<'a> {
    policy: &'a Policy,
    loss: f64,
    bitops: f64,
    steps: usize,
    budget: f64,
}

pub fn cmd_search(cfg: &RunConfig, args: &SearchArgs) -> Result<()> {
    let mut sc = cfg.search.clone();
    if let Some(b) = args.budget {
        sc.budget = Some(b);
    }
    if let Some(l) = args.lambda {
        sc.lambda = l;
    }
    if let Some(t) = args.max_steps {
        sc.max_steps = t;
    }
    sc.validate()?;
    let budget = sc
        .budget
        .ok_or_else(|| Error::Config("search needs a BitOps budget (--budget or search.budget)".into()))?;
    let model = load_model(cfg, &checkpoint_path(cfg, args.checkpoint.as_ref()))?;
    let (train, val) = cfg.load_data()?;
    let val = val.slice(0, sc.validation_size);
    let evaluator = SupernetEvaluator {
        model: &model,
        validation: &val,
        calibration: calibration(cfg, &train),
        recalibrate: sc.recalibrate,
        batch_size: 256,
    };
    let bops = BitOpsModel::new(model.macs())?;
    let space = model.space().clone();
    let result = search(space.max_policy(), &space, &bops, &evaluator, &sc)?;
    ensure_dir(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("policy.json"), &result.policy)?;
    let mut lines = String::new();
    for e in result.state.trajectory() {
        lines += &serde_json::to_string(&e)?;
        lines.push('\n');
    }
    write(&cfg.out_dir.join("trajectory.jsonl"), lines)?;
    write_json(
        &cfg.out_dir.join("search.json"),
        &SearchSummary {
            policy: &result.policy,
            loss: result.loss,
            bitops: result.bitops,
            steps: result.steps,
            budget,
        },
    )?;
    println!(
        "policy {} loss {:.4} bitops {:.0} after {} steps",
        result.policy, result.loss, result.bitops, result.steps
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    policy: &'a Policy,
    accuracy: f64,
    loss: f64,
    samples: usize,
    bitops: f64,
}

pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let mut model = load_model(cfg, &checkpoint_path(cfg, args.checkpoint.as_ref()))?;
    let policy = match (&args.policy, args.uniform) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
            let policy: Policy =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            model.space().validate(&policy).map_err(|e| Error::Config(e.to_string()))?;
            policy
        }
        (None, Some(b)) => model.space().uniform_policy(b)?,
        (None, None) => model.space().max_policy(),
    };
    let (train, val) = cfg.load_data()?;
    model.bn_recalibrate(&policy, &calibration(cfg, &train))?;
    let r = model.evaluate(&policy, &val, 256)?;
    let bitops = BitOpsModel::new(model.macs())?.bitops(&policy)?;
    ensure_dir(&cfg.out_dir)?;
    write_json(
        &cfg.out_dir.join("eval.json"),
        &EvalSummary {
            policy: &policy,
            accuracy: r.accuracy,
            loss: r.loss,
            samples: r.samples,
            bitops,
        },
    )?;
    println!("policy {policy} accuracy {:.4} loss {:.4} bitops {bitops:.0}", r.accuracy, r.loss);
    Ok(())
}

#[derive(Serialize)]
struct RegressSummaryRow {
    seed: u64,
    w_star: f64,
    crossings: usize,
    gradnorm_variance: f64,
}

fn cmd_regress(cfg: &RunConfig, args: &RegressArgs) -> Result<()> {
    let dir = cfg.out_dir.join("regress2d");
    ensure_dir(&dir)?;
    let base = Regress2dConfig {
        bits: args.bits.clone(),
        w_star: args.w_star,
        ..Default::default()
    };
    let base = Regress2dConfig {
        steps: args.steps.unwrap_or(base.steps),
        lr: args.lr.unwrap_or(base.lr),
        ..base
    };
    let tag: Vec<String> = args.bits.iter().map(u8::to_string).collect();
    let tag = tag.join("-");
    let rows = (0..args.seeds)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed.wrapping_add(i);
            let run = regress2d(&Regress2dConfig { seed, ..base.clone() })?;
            write(&dir.join(format!("regress2d_b{tag}_seed{seed}.csv")), run.csv())?;
            let rb = base.reference_bits;
            Ok(RegressSummaryRow {
                seed,
                w_star: run.w_star,
                crossings: count_boundary_crossings(&run.latent_trajectory(), &run.brs(rb)?)?,
                gradnorm_variance: variance(&run.gradnorms(rb)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&dir.join(format!("summary_b{tag}.json")), &rows)?;
    println!("wrote {} runs to {}", rows.len(), dir.display());
    Ok(())
}

fn cmd_distance(cfg: &RunConfig, args: &DistanceArgs) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    let (train, _) = cfg.load_data()?;
    let mut trainer = Trainer::new(cfg.build_model()?, cfg.train.clone(), &train)?;
    let mut trace = DistanceTrace::new(args.layer, args.bits.clone());
    trace.record(&trainer.model, 0)?;
    while !trainer.is_done() {
        trainer.train_step(&train)?;
        if trainer.step() % args.every.max(1) == 0 {
            trace.record(&trainer.model, trainer.step())?;
        }
    }
    ensure_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("distance.csv");
    write(&path, trace.csv())?;
    println!("wrote {} rows to {}", trace.rows.len(), path.display());
    Ok(())
}

fn cmd_density(cfg: &RunConfig, args: &DensityArgs) -> Result<()> {
    let model = load_model(cfg, &checkpoint_path(cfg, args.checkpoint.as_ref()))?;
    let (train, val) = cfg.load_data()?;
    let idx: Vec<usize> = (0..args.samples.min(val.len())).collect();
    let reports = output_density(
        &model,
        args.layer,
        &args.bits,
        &val.batch(&idx),
        args.bins,
        &calibration(cfg, &train),
        0,
    )?;
    ensure_dir(&cfg.out_dir)?;
    for r in &reports {
        write(&cfg.out_dir.join(format!("density_{}_{}.csv", r.layer, r.bits)), r.csv())?;
    }
    if let (Some(a), Some(b)) = (reports.first(), reports.last()) {
        let kl = symmetric_kl(&a.density, &b.density, 1e-6)?;
        println!("symmetric KL between {}-bit and {}-bit: {kl:.5}", a.bits, b.bits);
    }
    Ok(())
}

fn cmd_perturb(cfg: &RunConfig, args: &PerturbArgs) -> Result<()> {
    let model = load_model(cfg, &checkpoint_path(cfg, args.checkpoint.as_ref()))?;
    let space = model.space().clone();
    let high = match args.high {
        Some(b) => space.uniform_policy(b)?,
        None => space.max_policy(),
    };
    let (_, val) = cfg.load_data()?;
    let batches: Vec<Batch> = val.batches(cfg.train.batch_size).take(args.batches).collect();
    let mut csv = String::from("batch,low_bits,lr,delta_loss\n");
    for &b in &args.low {
        let low = space.uniform_policy(b)?;
        let deltas = batches
            .par_iter()
            .map(|batch| loss_perturbation_probe(&model, &high, &low, batch, args.lr))
            .collect::<Result<Vec<_>>>()?;
        for (i, d) in deltas.iter().enumerate() {
            let _ = writeln!(csv, "{i},{b},{},{d}", args.lr);
        }
        println!("{b}-bit update: median delta loss {:.6}", analysis::median(&deltas));
    }
    ensure_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join("perturb.csv"), csv)
}

pub fn cmd_criterion_dump(cfg: &RunConfig, args: &CriterionArgs) -> Result<()> {
    let path = checkpoint_path(cfg, args.checkpoint.as_ref());
    let ckpt = Checkpoint::load(&path)?;
    let mut model = cfg.build_model()?;
    ckpt.restore_model(&mut model)?;
    let mode: CriterionMode = cfg.train.schedule.mode;
    let report = unstable_criterion(&model, args.epsilon, mode, ckpt.header.step)?;
    let mut csv = format!("{}\n", CriterionReport::CSV_HEADER);
    for row in report.csv_rows() {
        csv += &row;
        csv.push('\n');
    }
    ensure_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join("criterion.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

/// Executes a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        // a pool may already exist when called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Search(a) => cmd_search(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Analyze { probe } => match probe {
            Probe::Regress2d(a) => cmd_regress(&cfg, a),
            Probe::Distance(a) => cmd_distance(&cfg, a),
            Probe::Density(a) => cmd_density(&cfg, a),
            Probe::Perturb(a) => cmd_perturb(&cfg, a),
        },
        Command::CriterionDump(a) => cmd_criterion_dump(&cfg, a),
    }
}
