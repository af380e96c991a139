//! The adaptation loop and its diagnostics.
//!
//! Each iteration runs, in order: sample a batch, forward it, write the
//! batch outputs into the memory banks, retrieve neighbors and affinities
//! from the updated bank, build expanded sets, then take one SGD step on
//! the combined objective. The loop sees target features only; labels are
//! reachable solely through an [`EpochEvaluator`].

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bank::{
    fifo_push, init_banks, update_banks, FeatureBank, FifoBank, FifoEntry, MemoryBanks, ScoreBank,
};
use crate::data::{Dataset, UnlabeledView};
use crate::error::{NrcError, Result};
use crate::losses::{total_loss, LossInputs};
use crate::math::{argmax, Matrix};
use crate::model::{
    accuracy, pretrain_source, sgd_step, MlpModel, ModelConfig, OptimizerState, PretrainConfig,
};
use crate::neighbors::{build_tables_for, knn, AffinityConfig};

pub use crate::losses::LossToggles;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BankMode {
    Full,
    Fifo { capacity: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub affinity: AffinityConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Seeds batch shuffling (and FIFO initial contents).
    pub seed: u64,
    pub toggles: LossToggles,
    pub bank_mode: BankMode,
    /// Record wall-clock seconds per epoch. Off for byte-reproducible metrics.
    pub timing: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            affinity: AffinityConfig::default(),
            batch_size: 64,
            epochs: 30,
            learning_rate: 1e-2,
            momentum: 0.9,
            seed: 0,
            toggles: LossToggles::default(),
            bank_mode: BankMode::Full,
            timing: true,
        }
    }
}

impl AdaptConfig {
    /// One-line `key=value` rendering with every field materialized.
    pub fn describe(&self) -> String {
        let a = &self.affinity;
        let bank = match self.bank_mode {
            BankMode::Full => "full".to_string(),
            BankMode::Fifo { capacity } => format!("fifo:{capacity}"),
        };
        format!(
            "k={} m={} r={} expanded_r={} dedup_expanded={} batch={} epochs={} lr={} momentum={} seed={} toggles={} bank={}",
            a.k,
            a.m,
            a.r,
            a.expanded_r,
            a.dedup_expanded,
            self.batch_size,
            self.epochs,
            self.learning_rate,
            self.momentum,
            self.seed,
            self.toggles.label(),
            bank
        )
    }

    fn validate(&self, n: usize) -> Result<()> {
        self.affinity.validate()?;
        let fail = |m: String| Err(NrcError::Config(m));
        if self.batch_size == 0 || self.batch_size > n {
            return fail(format!("batch size {} must be in 1..={n}", self.batch_size));
        }
        if !self.learning_rate.is_finite() || !self.momentum.is_finite() {
            return fail("learning rate and momentum must be finite".into());
        }
        let pool = match self.bank_mode {
            BankMode::Full => n,
            BankMode::Fifo { capacity } => {
                if capacity < self.batch_size || capacity > n {
                    return fail(format!(
                        "FIFO capacity {capacity} must be in {}..={n}",
                        self.batch_size
                    ));
                }
                capacity
            }
        };
        let need = self.affinity.k.max(self.affinity.m);
        if need >= pool {
            return fail(format!("k/m = {need} needs more than {pool} bank rows"));
        }
        Ok(())
    }

    /// Affinity values actually used: with the affinity toggle off every
    /// neighbor and expanded neighbor weighs 1.
    fn effective_affinity(&self) -> AffinityConfig {
        if self.toggles.affinity {
            self.affinity.clone()
        } else {
            AffinityConfig {
                r: 1.0,
                expanded_r: 1.0,
                ..self.affinity.clone()
            }
        }
    }
}

/// Independent sub-seeds derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedPlan {
    pub data: u64,
    pub init: u64,
    pub shuffle: u64,
}

impl SeedPlan {
    pub fn from_master(master: u64) -> Self {
        let sub = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(master);
            rng.set_stream(stream);
            rng.next_u64()
        };
        Self {
            data: sub(1),
            init: sub(2),
            shuffle: sub(3),
        }
    }
}

/// Label-dependent statistics computed at the end of an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochEval {
    pub acc_target: f64,
    pub shared_ratio: f64,
    pub shared_correct_ratio: f64,
    pub quality: NeighborQuality,
}

/// Computes epoch statistics from the current model. This is the only
/// place target labels may enter a run.
pub trait EpochEvaluator {
    fn evaluate(&mut self, model: &MlpModel, features: &Matrix) -> Result<EpochEval>;
}

/// Evaluates against the ground-truth labels of a dataset.
#[derive(Debug, Clone)]
pub struct LabeledEvaluator<'a> {
    labels: &'a [usize],
    /// Neighbors considered for the purity and neighbor-type statistics.
    pub k: usize,
    pub m: usize,
}

impl<'a> LabeledEvaluator<'a> {
    pub fn new(dataset: &'a Dataset) -> Result<Self> {
        Ok(Self {
            labels: dataset.labels()?,
            k: 5,
            m: 5,
        })
    }

    pub fn from_labels(labels: &'a [usize]) -> Self {
        Self { labels, k: 5, m: 5 }
    }
}

impl EpochEvaluator for LabeledEvaluator<'_> {
    fn evaluate(&mut self, model: &MlpModel, features: &Matrix) -> Result<EpochEval> {
        evaluate_model(model, features, self.labels, self.k, self.m)
    }
}

/// Fresh full forward pass plus accuracy, purity and neighbor quality.
pub fn evaluate_model(
    model: &MlpModel,
    features: &Matrix,
    labels: &[usize],
    k: usize,
    m: usize,
) -> Result<EpochEval> {
    let banks = init_banks(model, features)?;
    let acc_target = accuracy(banks.scores.matrix(), labels);
    let (shared_ratio, shared_correct_ratio) =
        purity_curve(&banks.features, &banks.scores, labels, k)?;
    let quality = neighbor_quality(&banks.features, &banks.scores, labels, k, m)?;
    Ok(EpochEval {
        acc_target,
        shared_ratio,
        shared_correct_ratio,
        quality,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub eval: Option<EpochEval>,
    /// Batch-averaged loss terms.
    pub l_n: f64,
    pub l_e: f64,
    pub l_self: f64,
    pub l_div: f64,
    pub total: f64,
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
}

impl RunHistory {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.records
            .last()
            .and_then(|r| r.eval.as_ref())
            .map(|e| e.acc_target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Forwarded,
    BanksUpdated,
    Retrieved,
}

/// Tracks the per-iteration ordering in debug builds.
#[derive(Debug)]
struct PhaseGuard(Phase);

impl PhaseGuard {
    fn advance(&mut self, next: Phase) {
        let ok = matches!(
            (self.0, next),
            (Phase::Idle, Phase::Forwarded)
                | (Phase::Forwarded, Phase::BanksUpdated)
                | (Phase::BanksUpdated, Phase::Retrieved)
                | (Phase::Retrieved, Phase::Idle)
        );
        debug_assert!(ok, "iteration phase {:?} -> {:?}", self.0, next);
        self.0 = next;
    }
}

enum Banks {
    Full(MemoryBanks),
    Fifo(FifoBank),
}

/// Adapts `model` to the unlabeled target features in place.
pub fn adapt(
    model: &mut MlpModel,
    target: UnlabeledView<'_>,
    config: &AdaptConfig,
    mut evaluator: Option<&mut dyn EpochEvaluator>,
) -> Result<RunHistory> {
    let x = target.features();
    let n = x.rows();
    if n == 0 {
        return Err(NrcError::EmptyDataset);
    }
    if x.cols() != model.input_dim() || target.n_classes() != model.n_classes() {
        return Err(NrcError::Shape(format!(
            "target is {}-d with {} classes, model expects {}-d with {}",
            x.cols(),
            target.n_classes(),
            model.input_dim(),
            model.n_classes()
        )));
    }
    config.validate(n)?;
    let mut history = RunHistory::default();
    if config.epochs == 0 {
        return Ok(history);
    }

    let affinity = config.effective_affinity();
    let toggles = config.toggles;
    let need_tables = toggles.neighbor || toggles.expanded;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = OptimizerState::new(model, config.learning_rate, config.momentum);
    let mut order: Vec<usize> = (0..n).collect();

    let initial = init_banks(model, x)?;
    let mut banks = match config.bank_mode {
        BankMode::Full => Banks::Full(initial),
        BankMode::Fifo { capacity } => {
            order.shuffle(&mut rng);
            let mut fifo = FifoBank::new(capacity)?;
            let seed_rows = order[..capacity]
                .iter()
                .map(|&i| FifoEntry::new(initial.features.row(i), initial.scores.row(i), i))
                .collect::<Result<Vec<_>>>()?;
            fifo_push(&mut fifo, seed_rows)?;
            Banks::Fifo(fifo)
        }
    };
    let mut phase = PhaseGuard(Phase::Idle);

    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 5];
        let mut batches = 0usize;
        for idx in order.chunks(config.batch_size) {
            let xb = x.select_rows(idx)?;
            let out = model.forward(&xb)?;
            phase.advance(Phase::Forwarded);

            // The bank rows for this batch become the current outputs, then
            // retrieval reads the updated snapshot.
            let snapshot;
            let (bank_view, queries): (&MemoryBanks, Vec<usize>) = match &mut banks {
                Banks::Full(b) => {
                    update_banks(b, idx, &out.features, &out.probs)?;
                    (&*b, idx.to_vec())
                }
                Banks::Fifo(f) => {
                    let entries = idx
                        .iter()
                        .enumerate()
                        .map(|(r, &i)| FifoEntry::new(out.features.row(r), out.probs.row(r), i))
                        .collect::<Result<Vec<_>>>()?;
                    fifo_push(f, entries)?;
                    snapshot = f.snapshot()?;
                    let len = snapshot.len();
                    (&snapshot, (len - idx.len()..len).collect())
                }
            };
            phase.advance(Phase::BanksUpdated);

            let (neighbors, expanded) = if need_tables {
                let (t, e) =
                    build_tables_for(&bank_view.features, &queries, &affinity, toggles.expanded)?;
                (Some(t), e)
            } else {
                (None, None)
            };
            phase.advance(Phase::Retrieved);

            let inputs = LossInputs {
                probs: &out.probs,
                scores: &bank_view.scores,
                self_scores: &bank_view.scores.matrix().select_rows(&queries)?,
                neighbors: neighbors.as_ref(),
                expanded: expanded.as_ref(),
                expanded_r: affinity.expanded_r,
            };
            let loss = total_loss(&inputs, &toggles)?;
            let grads = model.backward(&loss.grad_logits)?;
            sgd_step(model, &grads, &mut opt)?;
            phase.advance(Phase::Idle);

            for (s, v) in
                sums.iter_mut()
                    .zip([loss.l_n, loss.l_e, loss.l_self, loss.l_div, loss.total])
            {
                *s += v;
            }
            batches += 1;
        }
        let mean = |v: f64| v / batches as f64;
        let seconds = config.timing.then(|| start.elapsed().as_secs_f64());
        let eval = match evaluator.as_deref_mut() {
            Some(e) => Some(e.evaluate(model, x)?),
            None => None,
        };
        history.records.push(EpochRecord {
            epoch,
            eval,
            l_n: mean(sums[0]),
            l_e: mean(sums[1]),
            l_self: mean(sums[2]),
            l_div: mean(sums[3]),
            total: mean(sums[4]),
            seconds,
        });
    }
    Ok(history)
}

/// Correct-prediction ratios of the k-th nearest neighbors, split by
/// reciprocity. Index `r` of each vector refers to neighbor rank `r + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborQuality {
    pub all: Vec<f64>,
    pub rnn: Vec<f64>,
    pub nrnn: Vec<f64>,
    pub all_count: Vec<usize>,
    pub rnn_count: Vec<usize>,
    pub nrnn_count: Vec<usize>,
    rnn_hits: usize,
    nrnn_hits: usize,
}

impl NeighborQuality {
    /// Ratio over all ranks for reciprocal neighbors; NaN when none exist.
    pub fn rnn_pooled(&self) -> f64 {
        ratio(self.rnn_hits, self.rnn_count.iter().sum())
    }

    pub fn nrnn_pooled(&self) -> f64 {
        ratio(self.nrnn_hits, self.nrnn_count.iter().sum())
    }
}

fn ratio(hits: usize, count: usize) -> f64 {
    if count == 0 {
        f64::NAN
    } else {
        hits as f64 / count as f64
    }
}

fn predicted_labels(scores: &ScoreBank) -> Vec<usize> {
    scores.matrix().iter_rows().map(argmax).collect()
}

/// For each rank `k ≤ K`: the fraction of k-th neighbors whose predicted
/// label matches the query's true label, over all neighbors, reciprocal
/// ones (query within the neighbor's M nearest) and non-reciprocal ones.
pub fn neighbor_quality(
    bank: &FeatureBank,
    scores: &ScoreBank,
    labels: &[usize],
    k: usize,
    m: usize,
) -> Result<NeighborQuality> {
    if labels.len() != bank.len() || scores.len() != bank.len() {
        return Err(NrcError::Shape(
            "labels, scores and bank differ in length".into(),
        ));
    }
    let config = AffinityConfig {
        k,
        m,
        r: 0.0,
        ..Default::default()
    };
    let all: Vec<usize> = (0..bank.len()).collect();
    let (table, _) = build_tables_for(bank, &all, &config, false)?;
    let pred = predicted_labels(scores);
    let mut counts = vec![[0usize; 4]; k]; // rnn count, rnn hits, nrnn count, nrnn hits
    for row in &table.rows {
        let truth = labels[row.query];
        for (rank, (&j, &rec)) in row.neighbors.iter().zip(&row.reciprocal).enumerate() {
            let hit = (pred[j] == truth) as usize;
            let slot = if rec { 0 } else { 2 };
            counts[rank][slot] += 1;
            counts[rank][slot + 1] += hit;
        }
    }
    Ok(NeighborQuality {
        all: counts
            .iter()
            .map(|c| ratio(c[1] + c[3], c[0] + c[2]))
            .collect(),
        rnn: counts.iter().map(|c| ratio(c[1], c[0])).collect(),
        nrnn: counts.iter().map(|c| ratio(c[3], c[2])).collect(),
        all_count: counts.iter().map(|c| c[0] + c[2]).collect(),
        rnn_count: counts.iter().map(|c| c[0]).collect(),
        nrnn_count: counts.iter().map(|c| c[2]).collect(),
        rnn_hits: counts.iter().map(|c| c[1]).sum(),
        nrnn_hits: counts.iter().map(|c| c[3]).sum(),
    })
}

/// Fraction of samples whose `k` nearest neighbors all share one predicted
/// label, and the fraction where that shared label is also correct.
pub fn purity_curve(
    bank: &FeatureBank,
    scores: &ScoreBank,
    labels: &[usize],
    k: usize,
) -> Result<(f64, f64)> {
    if labels.len() != bank.len() || scores.len() != bank.len() {
        return Err(NrcError::Shape(
            "labels, scores and bank differ in length".into(),
        ));
    }
    if k == 0 || k >= bank.len() {
        return Err(NrcError::TooFewCandidates {
            k,
            available: bank.len().saturating_sub(1),
        });
    }
    let pred = predicted_labels(scores);
    let outcomes = (0..bank.len())
        .into_par_iter()
        .map(|i| {
            let nn = knn(bank, i, k)?;
            let first = pred[nn[0]];
            let shared = nn.iter().all(|&j| pred[j] == first);
            Ok((shared, shared && first == labels[i]))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = bank.len() as f64;
    let shared = outcomes.iter().filter(|o| o.0).count() as f64 / n;
    let correct = outcomes.iter().filter(|o| o.1).count() as f64 / n;
    Ok((shared, correct))
}

/// Writes per-epoch metrics as CSV. The first line is a `#` comment with the
/// fully resolved configuration.
pub fn write_metrics_csv(
    history: &RunHistory,
    config_line: &str,
    path: impl AsRef<Path>,
) -> Result<()> {
    fs::write(path, render_metrics_csv(history, config_line))?;
    Ok(())
}

pub const METRICS_HEADER: &str =
    "epoch,acc_target,l_n,l_e,l_self,l_div,total,shared_ratio,shared_correct_ratio,rnn_correct,nrnn_correct,seconds";

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => x.to_string(),
        _ => String::new(),
    }
}

pub fn render_metrics_csv(history: &RunHistory, config_line: &str) -> String {
    let mut s = format!("# {config_line}\n{METRICS_HEADER}\n");
    for r in &history.records {
        let e = r.eval.as_ref();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            cell(e.map(|e| e.acc_target)),
            r.l_n,
            r.l_e,
            r.l_self,
            r.l_div,
            r.total,
            cell(e.map(|e| e.shared_ratio)),
            cell(e.map(|e| e.shared_correct_ratio)),
            cell(e.map(|e| e.quality.rnn_pooled())),
            cell(e.map(|e| e.quality.nrnn_pooled())),
            cell(r.seconds),
        );
    }
    s
}

/// Everything needed to go from a labeled source set to an adapted model.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
}

/// Pretrains a fresh model on the source set with seeds from `plan`.
pub fn train_source_model(
    source: &Dataset,
    exp: &ExperimentConfig,
    plan: &SeedPlan,
) -> Result<MlpModel> {
    let mut model = MlpModel::new(&exp.model, plan.init)?;
    let pre = PretrainConfig {
        seed: plan.init ^ 0x5eed,
        ..exp.pretrain.clone()
    };
    pretrain_source(&mut model, &source.features, source.labels()?, &pre)?;
    Ok(model)
}

/// One configuration of the ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationVariant {
    pub id: String,
    pub toggles: LossToggles,
    pub k: usize,
    pub dedup_expanded: bool,
}

/// The standard grid: diversity only; +N; +N+A; +N+E; +N+E+A; +N+Ê+A
/// (deduplicated expanded set); and +N+A without E at `K' = K + K·M`,
/// which consults as many neighbors as the expanded configuration.
pub fn standard_variants(base: &AdaptConfig) -> Vec<AblationVariant> {
    let (k, m) = (base.affinity.k, base.affinity.m);
    let self_reg = base.toggles.self_reg;
    let t = |neighbor, expanded, affinity| LossToggles {
        neighbor,
        expanded,
        affinity,
        self_reg,
        diversity: true,
    };
    let v = |id: &str, toggles, k, dedup_expanded| AblationVariant {
        id: id.into(),
        toggles,
        k,
        dedup_expanded,
    };
    vec![
        v(
            "div",
            LossToggles {
                self_reg: false,
                ..t(false, false, false)
            },
            k,
            false,
        ),
        v("div+N", t(true, false, false), k, false),
        v("div+N+A", t(true, false, true), k, false),
        v("div+N+E", t(true, true, false), k, false),
        v("div+N+E+A", t(true, true, true), k, false),
        v("div+N+Ehat+A", t(true, true, true), k, true),
        v("div+N+A:largerK", t(true, false, true), k + k * m, false),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub config_id: String,
    pub toggles: String,
    pub k: usize,
    pub m: usize,
    pub r: f64,
    pub seed: u64,
    pub source_acc: f64,
    pub final_acc: f64,
}

impl AblationVariant {
    pub fn apply(&self, base: &AdaptConfig) -> AdaptConfig {
        AdaptConfig {
            toggles: self.toggles,
            affinity: AffinityConfig {
                k: self.k,
                dedup_expanded: self.dedup_expanded,
                ..base.affinity.clone()
            },
            ..base.clone()
        }
    }
}

/// Runs every variant for every seed. Variants sharing a seed start from
/// the same pretrained model and shuffle order.
pub fn run_ablation_grid(
    exp: &ExperimentConfig,
    source: &Dataset,
    target: &Dataset,
    variants: &[AblationVariant],
    seeds: &[u64],
) -> Result<Vec<AblationResult>> {
    let labels = target.labels()?;
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let plan = SeedPlan::from_master(seed);
            let base_model = train_source_model(source, exp, &plan)?;
            let source_acc = accuracy(&base_model.predict(&target.features)?.probs, labels);
            variants
                .par_iter()
                .map(|v| {
                    let cfg = AdaptConfig {
                        seed: plan.shuffle,
                        timing: false,
                        ..v.apply(&exp.adapt)
                    };
                    let mut model = base_model.clone();
                    adapt(&mut model, target.unlabeled(), &cfg, None)?;
                    let final_acc = accuracy(&model.predict(&target.features)?.probs, labels);
                    Ok(AblationResult {
                        config_id: v.id.clone(),
                        toggles: v.toggles.label(),
                        k: cfg.affinity.k,
                        m: cfg.affinity.m,
                        r: cfg.affinity.r,
                        seed,
                        source_acc,
                        final_acc,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

pub const ABLATION_HEADER: &str = "config_id,toggles,K,M,r,seed,final_acc";

pub fn render_ablation_csv(rows: &[AblationResult]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.config_id, r.toggles, r.k, r.m, r.r, r.seed, r.final_acc
        );
    }
    s
}
