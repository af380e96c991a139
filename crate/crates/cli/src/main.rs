//! `nrc`: generate shifted datasets, pretrain source models, adapt them to
//! an unlabeled target set and run ablation grids.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on runtime
//! failures (I/O, malformed files, numerical errors).

mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nrc_core::bank::init_banks;
use nrc_core::data::{generate_pair, load_csv, save_csv, Domain, ShiftSpec};
use nrc_core::engine::{
    adapt, evaluate_model, render_ablation_csv, run_ablation_grid, standard_variants,
    write_metrics_csv, AblationResult, AdaptConfig, BankMode, ExperimentConfig, LabeledEvaluator,
    SeedPlan,
};
use nrc_core::model::{pretrain_source, MlpModel, ModelConfig, PretrainConfig};
use nrc_core::neighbors::{build_neighbor_table, AffinityConfig};
use nrc_core::{LossToggles, NrcError};

#[derive(Parser, Debug)]
#[command(
    name = "nrc",
    version,
    about = "Source-free domain adaptation with reciprocal neighborhoods"
)]
#[command(args_override_self = true, arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled source set and a shifted target set.
    Datagen(DatagenArgs),
    /// Train a source model with label-smoothed cross-entropy.
    Pretrain(PretrainArgs),
    /// Adapt a pretrained model to an unlabeled target set.
    Adapt(AdaptArgs),
    /// Dump neighbor tables and neighborhood statistics for a model.
    Analyze(AnalyzeArgs),
    /// Run the loss-ablation grid over several seeds.
    Ablate(AblateArgs),
}

/// Every subcommand also accepts `--config <file>` with `key=value` lines
/// (`--spec` is an alias); explicit flags override the file.
#[derive(Args, Debug)]
struct DatagenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3, value_parser = positive)]
    classes: usize,
    #[arg(long, default_value_t = 2, value_parser = positive)]
    dim: usize,
    #[arg(long, default_value_t = 50, value_parser = positive)]
    samples_per_class: usize,
    /// Distance between adjacent class centroids, in units of the noise sigma.
    #[arg(long, default_value_t = 4.0)]
    separation: f64,
    #[arg(long, default_value_t = 15.0, allow_negative_numbers = true)]
    rotation_deg: f64,
    /// Comma-separated target translation; default 1.5 along the first axis.
    #[arg(long, allow_hyphen_values = true)]
    translation: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Comma-separated class proportions; default uniform.
    #[arg(long)]
    label_prior: Option<String>,
    #[arg(long)]
    out_src: PathBuf,
    #[arg(long)]
    out_tgt: PathBuf,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Comma-separated hidden layer widths.
    #[arg(long, default_value = "64,64")]
    hidden: String,
    #[arg(long, default_value_t = 32, value_parser = positive)]
    feature_dim: usize,
    /// Use a plain linear classifier instead of a weight-normalized one.
    #[arg(long)]
    no_weight_norm: bool,
}

#[derive(Args, Debug)]
struct PretrainFlags {
    #[arg(long, default_value_t = 50)]
    pretrain_epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    smoothing: f64,
    #[arg(long, default_value_t = 1e-2)]
    pretrain_lr: f64,
    #[arg(long, default_value_t = 64, value_parser = positive)]
    pretrain_batch: usize,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Number of classes; inferred from the labels when omitted.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    smoothing: f64,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 64, value_parser = positive)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

/// Adaptation hyperparameters shared by `adapt` and `ablate`.
#[derive(Args, Debug)]
struct AdaptFlags {
    /// Nearest neighbors per sample.
    #[arg(long, default_value_t = 3, value_parser = positive)]
    k: usize,
    /// Neighbors of neighbors, also the reciprocity radius.
    #[arg(long, default_value_t = 2, value_parser = positive)]
    m: usize,
    /// Affinity of non-reciprocal neighbors.
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    r: f64,
    /// Affinity of expanded neighbors.
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    expanded_r: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 64, value_parser = positive)]
    batch: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Keep only the most recent N samples in the memory banks.
    #[arg(long, value_parser = positive)]
    fifo_capacity: Option<usize>,
    #[arg(long)]
    no_neighbor: bool,
    #[arg(long)]
    no_affinity: bool,
    #[arg(long)]
    no_expanded: bool,
    /// Collapse duplicate members of the expanded neighborhood.
    #[arg(long)]
    dedup_expanded: bool,
    #[arg(long)]
    no_self: bool,
    #[arg(long)]
    no_div: bool,
    /// Leave the seconds column empty so identical runs give identical files.
    #[arg(long)]
    no_timing: bool,
}

impl AdaptFlags {
    fn to_config(&self, shuffle_seed: u64) -> AdaptConfig {
        AdaptConfig {
            affinity: AffinityConfig {
                k: self.k,
                m: self.m,
                r: self.r,
                expanded_r: self.expanded_r,
                dedup_expanded: self.dedup_expanded,
            },
            batch_size: self.batch,
            epochs: self.epochs,
            learning_rate: self.lr,
            momentum: self.momentum,
            seed: shuffle_seed,
            toggles: LossToggles {
                neighbor: !self.no_neighbor,
                affinity: !self.no_affinity,
                expanded: !self.no_expanded,
                self_reg: !self.no_self,
                diversity: !self.no_div,
            },
            bank_mode: match self.fifo_capacity {
                Some(capacity) => BankMode::Fifo { capacity },
                None => BankMode::Full,
            },
            timing: !self.no_timing,
        }
    }
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[command(flatten)]
    flags: AdaptFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-epoch metrics CSV; printed to stdout when omitted.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Where to save the adapted model.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip per-epoch evaluation even when the target file has labels.
    #[arg(long)]
    no_eval: bool,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5, value_parser = positive)]
    k: usize,
    #[arg(long, default_value_t = 5, value_parser = positive)]
    m: usize,
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    r: f64,
    /// Neighbor table CSV: query_id,rank,neighbor_id,cosine,affinity.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Labeled source CSV; the synthetic scenario is generated per seed when omitted.
    #[arg(long, requires = "target")]
    source: Option<PathBuf>,
    /// Labeled target CSV, used for scoring only.
    #[arg(long, requires = "source")]
    target: Option<PathBuf>,
    #[arg(long, default_value_t = 5, value_parser = positive)]
    seeds: usize,
    /// First seed of the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, value_parser = positive)]
    jobs: Option<usize>,
    #[command(flatten)]
    flags: AdaptFlags,
    #[command(flatten)]
    pretrain: PretrainFlags,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

/// Errors that map to exit code 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Parses an integer flag that must be at least 1.
fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_list(s: &str, flag: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("--{flag}: '{v}' is not a number")))
        })
        .collect()
}

fn model_config(args: &ModelArgs, input_dim: usize, n_classes: usize) -> Result<ModelConfig> {
    let hidden = parse_list(&args.hidden, "hidden")?
        .into_iter()
        .map(|w| {
            if w >= 1.0 && w.fract() == 0.0 {
                Ok(w as usize)
            } else {
                Err(usage("--hidden: widths must be positive integers"))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelConfig {
        input_dim,
        hidden,
        feature_dim: args.feature_dim,
        n_classes,
        weight_norm: !args.no_weight_norm,
    })
}

fn datagen(a: &DatagenArgs) -> Result<()> {
    let dim = a.dim;
    let translation = match &a.translation {
        Some(t) => parse_list(t, "translation")?,
        None => (0..dim).map(|i| if i == 0 { 1.5 } else { 0.0 }).collect(),
    };
    let spec = ShiftSpec {
        n_classes: a.classes,
        dim,
        samples_per_class: a.samples_per_class,
        class_separation: a.separation,
        rotation_angle: a.rotation_deg.to_radians(),
        translation,
        scale: a.scale,
        noise_sigma: a.noise,
        label_prior: a
            .label_prior
            .as_deref()
            .map(|p| parse_list(p, "label-prior"))
            .transpose()?
            .unwrap_or_default(),
        seed: SeedPlan::from_master(a.seed).data,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let (source, target) = generate_pair(&spec)?;
    save_csv(&source, &a.out_src)?;
    save_csv(&target, &a.out_tgt)?;
    println!(
        "wrote {} source and {} target rows (dim {dim}, {} classes)",
        source.len(),
        target.len(),
        spec.n_classes
    );
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> Result<()> {
    let data = load_csv(&a.data, a.classes, Domain::Source)
        .with_context(|| format!("loading {}", a.data.display()))?;
    let labels = data
        .labels()
        .map_err(|_| anyhow!("{}: pretraining needs labels", a.data.display()))?;
    let plan = SeedPlan::from_master(a.seed);
    let mut model = MlpModel::new(
        &model_config(&a.model, data.dim(), data.n_classes)?,
        plan.init,
    )?;
    let cfg = PretrainConfig {
        epochs: a.epochs,
        smoothing: a.smoothing,
        learning_rate: a.lr,
        momentum: a.momentum,
        batch_size: a.batch,
        seed: plan.init ^ 0x5eed,
    };
    if !(0.0..1.0).contains(&cfg.smoothing) {
        return Err(usage("--smoothing must be in [0, 1)"));
    }
    let history = pretrain_source(&mut model, &data.features, labels, &cfg)?;
    for e in &history {
        println!(
            "epoch {:>3}  loss {:.6}  acc {:.4}",
            e.epoch, e.loss, e.accuracy
        );
    }
    model.save(&a.out)?;
    Ok(())
}

fn adapt_cmd(a: &AdaptArgs) -> Result<()> {
    let mut model =
        MlpModel::load(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let target = load_csv(&a.target, Some(model.n_classes()), Domain::Target)
        .with_context(|| format!("loading {}", a.target.display()))?;
    if target.dim() != model.input_dim() {
        bail!(
            "{}: {} feature columns, model expects {}",
            a.target.display(),
            target.dim(),
            model.input_dim()
        );
    }
    let cfg = a.flags.to_config(SeedPlan::from_master(a.seed).shuffle);
    let mut evaluator = match (a.no_eval, target.is_labeled()) {
        (false, true) => Some(LabeledEvaluator::new(&target)?),
        _ => None,
    };
    let history = adapt(
        &mut model,
        target.unlabeled(),
        &cfg,
        evaluator
            .as_mut()
            .map(|e| e as &mut dyn nrc_core::engine::EpochEvaluator),
    )?;
    let line = format!(
        "{} master_seed={} model={} target={}",
        cfg.describe(),
        a.seed,
        a.model.display(),
        a.target.display()
    );
    match &a.metrics {
        Some(path) => write_metrics_csv(&history, &line, path)?,
        None => print!("{}", nrc_core::engine::render_metrics_csv(&history, &line)),
    }
    if let Some(out) = &a.out {
        model.save(out)?;
    }
    if let Some(acc) = history.final_accuracy() {
        eprintln!("final target accuracy {acc:.4}");
    }
    Ok(())
}

fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let model =
        MlpModel::load(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let data = load_csv(&a.data, Some(model.n_classes()), Domain::Target)
        .with_context(|| format!("loading {}", a.data.display()))?;
    let banks = init_banks(&model, &data.features)?;
    let cfg = AffinityConfig {
        k: a.k,
        m: a.m,
        r: a.r,
        ..Default::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let table = build_neighbor_table(&banks.features, &cfg)?;
    let mut csv = String::from("query_id,rank,neighbor_id,cosine,affinity\n");
    let mut reciprocal = 0usize;
    for row in &table.rows {
        for (rank, ((&j, &s), &w)) in row
            .neighbors
            .iter()
            .zip(&row.similarities)
            .zip(&row.affinity)
            .enumerate()
        {
            writeln!(csv, "{},{},{},{},{}", row.query, rank + 1, j, s, w)?;
        }
        reciprocal += row.reciprocal.iter().filter(|&&x| x).count();
    }
    fs::write(&a.out, csv).with_context(|| format!("writing {}", a.out.display()))?;
    let total = table.rows.len() * cfg.k;
    println!("samples={} k={} m={} r={}", data.len(), cfg.k, cfg.m, cfg.r);
    println!("reciprocal_fraction={}", reciprocal as f64 / total as f64);
    if let Ok(labels) = data.labels() {
        let eval = evaluate_model(&model, &data.features, labels, cfg.k, cfg.m)?;
        println!("accuracy={}", eval.acc_target);
        println!("shared_ratio={}", eval.shared_ratio);
        println!("shared_correct_ratio={}", eval.shared_correct_ratio);
        println!("rnn_correct={}", eval.quality.rnn_pooled());
        println!("nrnn_correct={}", eval.quality.nrnn_pooled());
        for rank in 0..cfg.k {
            println!(
                "rank={} all={} rnn={} nrnn={}",
                rank + 1,
                eval.quality.all[rank],
                eval.quality.rnn[rank],
                eval.quality.nrnn[rank]
            );
        }
    }
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds as u64).collect();
    let jobs = a
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let fixed = match (&a.source, &a.target) {
        (Some(s), Some(t)) => {
            let source = load_csv(s, None, Domain::Source)
                .with_context(|| format!("loading {}", s.display()))?;
            let target = load_csv(t, Some(source.n_classes), Domain::Target)
                .with_context(|| format!("loading {}", t.display()))?;
            Some((source, target))
        }
        _ => None,
    };
    let (dim, classes) = fixed
        .as_ref()
        .map_or((2, 3), |(s, _)| (s.dim(), s.n_classes));
    let exp = ExperimentConfig {
        model: model_config(&a.model, dim, classes)?,
        pretrain: PretrainConfig {
            epochs: a.pretrain.pretrain_epochs,
            smoothing: a.pretrain.smoothing,
            learning_rate: a.pretrain.pretrain_lr,
            batch_size: a.pretrain.pretrain_batch,
            ..PretrainConfig::default()
        },
        adapt: AdaptConfig {
            timing: false,
            ..a.flags.to_config(0)
        },
    };
    let variants = standard_variants(&exp.adapt);
    let rows: Vec<AblationResult> = pool.install(|| -> Result<Vec<AblationResult>> {
        match &fixed {
            Some((source, target)) => {
                Ok(run_ablation_grid(&exp, source, target, &variants, &seeds)?)
            }
            None => {
                use rayon::prelude::*;
                let per_seed = seeds
                    .par_iter()
                    .map(|&seed| {
                        let spec = ShiftSpec {
                            seed: SeedPlan::from_master(seed).data,
                            ..ShiftSpec::default()
                        };
                        let (source, target) = generate_pair(&spec)?;
                        run_ablation_grid(&exp, &source, &target, &variants, &[seed])
                    })
                    .collect::<nrc_core::Result<Vec<_>>>()?;
                Ok(per_seed.into_iter().flatten().collect())
            }
        }
    })?;
    fs::write(&a.out, render_ablation_csv(&rows))
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!("# {}", exp.adapt.describe());
    let mean = |f: &dyn Fn(&AblationResult) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(f).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let first = variants[0].id.clone();
    println!(
        "source_only mean_acc={:.4}",
        mean(&|r| (r.config_id == first).then_some(r.source_acc))
    );
    for v in &variants {
        println!(
            "{} mean_acc={:.4}",
            v.id,
            mean(&|r| (r.config_id == v.id).then_some(r.final_acc))
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Datagen(a) => datagen(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Analyze(a) => analyze(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<NrcError>() {
        Some(NrcError::Config(_) | NrcError::TooFewCandidates { .. }) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let args: Vec<OsString> = std::env::args_os().collect();
    let args = match config::merge_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
