//! Acceptance suite. Every criterion prints one PASS/FAIL line; the binary
//! exits non-zero if any criterion fails.
//!
//! Run with `cargo test -p nrc-core --test acceptance`.

use std::collections::HashSet;
use std::time::Instant;

use nrc_core::bank::{FeatureBank, ScoreBank};
use nrc_core::data::Dataset;
use nrc_core::engine::{
    adapt, evaluate_model, render_metrics_csv, run_ablation_grid, standard_variants, AdaptConfig,
    BankMode, EpochEval, ExperimentConfig, LabeledEvaluator,
};
use nrc_core::losses::{
    loss_diversity, loss_expanded, loss_neighbor, loss_self, total_loss, LossInputs, LossToggles,
};
use nrc_core::math::Matrix;
use nrc_core::model::MlpModel;
use nrc_core::neighbors::{
    build_expanded_table, build_neighbor_table, AffinityConfig, ExpandedRow, ExpandedTable,
    NeighborRow, NeighborTable,
};
use nrc_core::scenario::{golden_experiment, GoldenRun};
use nrc_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: &str, pass: bool, detail: String) {
        if !pass {
            self.failures += 1;
        }
        println!("[{}] {id}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------------------
// Independent oracles

fn oracle_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn oracle_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Inputs for one random gradient instance.
struct GradInstance {
    logits: Vec<Vec<f64>>,
    bank: Vec<Vec<f64>>,
    stored: Vec<Vec<f64>>,
    neighbors: Vec<Vec<(usize, f64)>>,
    expanded: Vec<Vec<usize>>,
    expanded_r: f64,
}

#[derive(Clone, Copy, Debug)]
enum Term {
    Neighbor,
    Expanded,
    SelfReg,
    Diversity,
    Total,
}

/// The objective written out directly from its definition.
fn oracle_loss(inst: &GradInstance, logits: &[Vec<f64>], term: Term) -> f64 {
    let p: Vec<Vec<f64>> = logits.iter().map(|z| oracle_softmax(z)).collect();
    let n = p.len() as f64;
    let c = p[0].len();
    let l_n: f64 = -p
        .iter()
        .zip(&inst.neighbors)
        .map(|(pi, nb)| {
            nb.iter()
                .map(|&(k, a)| a * oracle_dot(&inst.bank[k], pi))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    let l_e: f64 = -p
        .iter()
        .zip(&inst.expanded)
        .map(|(pi, e)| {
            e.iter()
                .map(|&m| inst.expanded_r * oracle_dot(&inst.bank[m], pi))
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    let l_self: f64 = -p
        .iter()
        .zip(&inst.stored)
        .map(|(pi, s)| oracle_dot(s, pi))
        .sum::<f64>()
        / n;
    let l_div: f64 = (0..c)
        .map(|k| {
            let m = p.iter().map(|pi| pi[k]).sum::<f64>() / n;
            m * (m / (1.0 / c as f64)).ln()
        })
        .sum();
    match term {
        Term::Neighbor => l_n,
        Term::Expanded => l_e,
        Term::SelfReg => l_self,
        Term::Diversity => l_div,
        Term::Total => l_n + l_e + l_self + l_div,
    }
}

fn random_distribution(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let z: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
    oracle_softmax(&z)
}

fn random_instance(rng: &mut ChaCha8Rng) -> GradInstance {
    let n = rng.random_range(1..=8);
    let c = rng.random_range(2..=5);
    let bank_rows = 12;
    let r = 0.1;
    GradInstance {
        logits: (0..n)
            .map(|_| (0..c).map(|_| rng.random_range(-4.0..4.0)).collect())
            .collect(),
        bank: (0..bank_rows)
            .map(|_| random_distribution(rng, c))
            .collect(),
        stored: (0..n).map(|_| random_distribution(rng, c)).collect(),
        neighbors: (0..n)
            .map(|_| {
                (0..rng.random_range(1..=4))
                    .map(|_| {
                        (
                            rng.random_range(0..bank_rows),
                            if rng.random_bool(0.5) { 1.0 } else { r },
                        )
                    })
                    .collect()
            })
            .collect(),
        expanded: (0..n)
            .map(|_| {
                (0..rng.random_range(0..=6))
                    .map(|_| rng.random_range(0..4))
                    .collect()
            })
            .collect(),
        expanded_r: 0.1,
    }
}

fn rows_matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

/// Analytic dL/dlogits from the library for one term.
fn analytic(inst: &GradInstance, term: Term) -> (f64, Matrix) {
    let logits = rows_matrix(&inst.logits);
    let p = nrc_core::math::softmax_rows(&logits).unwrap();
    let bank = ScoreBank::new(rows_matrix(&inst.bank)).unwrap();
    let stored = rows_matrix(&inst.stored);
    let table = NeighborTable {
        rows: inst
            .neighbors
            .iter()
            .enumerate()
            .map(|(q, nb)| NeighborRow {
                query: q,
                neighbors: nb.iter().map(|x| x.0).collect(),
                similarities: vec![0.0; nb.len()],
                reciprocal: nb.iter().map(|x| x.1 == 1.0).collect(),
                affinity: nb.iter().map(|x| x.1).collect(),
            })
            .collect(),
    };
    let expanded = ExpandedTable {
        rows: inst
            .expanded
            .iter()
            .enumerate()
            .map(|(q, e)| ExpandedRow {
                query: q,
                members: e.clone(),
            })
            .collect(),
    };
    let t = match term {
        Term::Neighbor => loss_neighbor(&p, &bank, &table).unwrap(),
        Term::Expanded => loss_expanded(&p, &bank, &expanded, inst.expanded_r).unwrap(),
        Term::SelfReg => loss_self(&p, &stored).unwrap(),
        Term::Diversity => loss_diversity(&p).unwrap(),
        Term::Total => {
            let inputs = LossInputs {
                probs: &p,
                scores: &bank,
                self_scores: &stored,
                neighbors: Some(&table),
                expanded: Some(&expanded),
                expanded_r: inst.expanded_r,
            };
            let b = total_loss(&inputs, &LossToggles::default()).unwrap();
            assert!((b.total - (b.l_n + b.l_e + b.l_self + b.l_div)).abs() < 1e-12);
            return (b.total, b.grad_logits);
        }
    };
    let g = t.grad_logits(&p);
    (t.value, g)
}

/// Max over entries of |analytic − numeric| / max(|analytic|, |numeric|, 1e-6).
/// Entries below 1e-6 are compared at the 1e-11 absolute level, which is the
/// round-off floor of a central difference at this step size..
fn fd_relative_error(inst: &GradInstance, term: Term) -> (f64, f64) {
    let eps = 1e-5;
    let (value, grad) = analytic(inst, term);
    let value_gap = (value - oracle_loss(inst, &inst.logits, term)).abs();
    let mut worst = 0.0f64;
    for i in 0..inst.logits.len() {
        for k in 0..inst.logits[0].len() {
            let mut plus = inst.logits.clone();
            plus[i][k] += eps;
            let mut minus = inst.logits.clone();
            minus[i][k] -= eps;
            let numeric =
                (oracle_loss(inst, &plus, term) - oracle_loss(inst, &minus, term)) / (2.0 * eps);
            let a = grad.get(i, k);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    (worst, value_gap)
}

fn ac1_gradients(rep: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let instances: Vec<GradInstance> = (0..25).map(|_| random_instance(&mut rng)).collect();
    let mut ok = true;
    let mut detail = Vec::new();
    for term in [
        Term::Neighbor,
        Term::Expanded,
        Term::SelfReg,
        Term::Diversity,
        Term::Total,
    ] {
        let (mut worst, mut gap) = (0.0f64, 0.0f64);
        for inst in &instances {
            let (w, g) = fd_relative_error(inst, term);
            worst = worst.max(w);
            gap = gap.max(g);
        }
        ok &= worst <= 1e-5 && gap <= 1e-12;
        detail.push(format!("{term:?} rel={worst:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    ok &= secs < 5.0;
    rep.line(
        "AC1 gradient correctness",
        ok,
        format!(
            "{} instances; {}; {secs:.2}s",
            instances.len(),
            detail.join(", ")
        ),
    );
}

fn oracle_normalize(v: &[f64]) -> Vec<f64> {
    let n = oracle_dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

/// O(n²) kNN: sort all other rows by (similarity desc, index asc).
fn oracle_knn(points: &[Vec<f64>], q: usize, k: usize) -> Vec<usize> {
    let unit: Vec<Vec<f64>> = points.iter().map(|p| oracle_normalize(p)).collect();
    let mut all: Vec<(usize, f64)> = (0..points.len())
        .filter(|&j| j != q)
        .map(|j| (j, oracle_dot(&unit[q], &unit[j])))
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.into_iter().take(k).map(|x| x.0).collect()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn bank_of(points: &[Vec<f64>]) -> FeatureBank {
    FeatureBank::from_features(&Matrix::from_rows(points).unwrap()).unwrap()
}

fn ac2_knn(rep: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut points = random_points(&mut rng, 180, 6);
    // exact duplicates produce exact similarity ties
    for i in 0..20 {
        points.push(points[i * 3].clone());
    }
    let bank = bank_of(&points);
    let mut mismatches = 0;
    let mut affinity_mismatches = 0;
    for k in [1, 3, 5] {
        let m = 2;
        let cfg = AffinityConfig {
            k,
            m,
            r: 0.1,
            ..Default::default()
        };
        let table = build_neighbor_table(&bank, &cfg).unwrap();
        let oracle_m: Vec<Vec<usize>> = (0..points.len())
            .map(|j| oracle_knn(&points, j, m))
            .collect();
        for (q, row) in table.rows.iter().enumerate() {
            let expect = oracle_knn(&points, q, k);
            if row.neighbors != expect {
                mismatches += 1;
            }
            for (&j, &a) in expect.iter().zip(&row.affinity) {
                let rec = oracle_m[j].contains(&q);
                if a != if rec { 1.0 } else { 0.1 } {
                    affinity_mismatches += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    rep.line(
        "AC2 kNN oracle equivalence",
        mismatches == 0 && affinity_mismatches == 0 && secs < 2.0,
        format!("200 points, K in {{1,3,5}}: {mismatches} list / {affinity_mismatches} affinity mismatches; {secs:.2}s"),
    );
}

fn ac3_reciprocity(rep: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut asym = 0;
    let mut bad_values = 0;
    for _ in 0..1000 {
        let n = rng.random_range(6..30);
        let k = rng.random_range(1..5.min(n - 1));
        let r = rng.random_range(-1.0..0.9);
        let points = random_points(&mut rng, n, 3);
        let bank = bank_of(&points);
        let table = build_neighbor_table(
            &bank,
            &AffinityConfig {
                k,
                m: k,
                r,
                ..Default::default()
            },
        )
        .unwrap();
        for row in &table.rows {
            bad_values += row.affinity.iter().filter(|&&a| a != 1.0 && a != r).count();
            for (pos, &j) in row.neighbors.iter().enumerate() {
                let other = &table.rows[j];
                if let Some(back) = other.neighbors.iter().position(|&x| x == row.query) {
                    if (row.affinity[pos] == 1.0) != (other.affinity[back] == 1.0) {
                        asym += 1;
                    }
                }
            }
        }
    }
    let points = random_points(&mut rng, 25, 4);
    let bank = bank_of(&points);
    let full = build_neighbor_table(
        &bank,
        &AffinityConfig {
            k: 4,
            m: 24,
            r: 0.1,
            ..Default::default()
        },
    )
    .unwrap();
    let all_one = full
        .rows
        .iter()
        .all(|r| r.affinity.iter().all(|&a| a == 1.0));
    rep.line(
        "AC3 reciprocity and affinity",
        asym == 0 && bad_values == 0 && all_one,
        format!("1000 trials: {asym} asymmetric pairs, {bad_values} values outside {{1,r}}; M=n-1 all ones: {all_one}"),
    );
}

/// Brute-force expanded multiset from oracle kNN lists.
fn oracle_expanded(points: &[Vec<f64>], q: usize, k: usize, m: usize, dedup: bool) -> Vec<usize> {
    let mut out = Vec::new();
    for j in oracle_knn(points, q, k) {
        for t in oracle_knn(points, j, m) {
            if t != q {
                out.push(t);
            }
        }
    }
    if dedup {
        let mut seen = HashSet::new();
        out.retain(|t| seen.insert(*t));
    }
    out
}

fn ac4_expanded(rep: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut mismatches, mut length_errors, mut dup_kept, mut dup_seen) = (0, 0, 0, 0);
    for trial in 0..20 {
        // clustered points make shared expanded members common
        let centers = random_points(&mut rng, 4, 3);
        let points: Vec<Vec<f64>> = (0..50)
            .map(|i| {
                centers[i % 4]
                    .iter()
                    .map(|c| c + rng.random_range(-0.3..0.3))
                    .collect()
            })
            .collect();
        let bank = bank_of(&points);
        let (k, m) = (2 + trial % 3, 1 + trial % 3);
        for dedup in [false, true] {
            let cfg = AffinityConfig {
                k,
                m,
                dedup_expanded: dedup,
                ..Default::default()
            };
            let table = build_neighbor_table(&bank, &cfg).unwrap();
            let exp = build_expanded_table(&bank, &table, &cfg).unwrap();
            for (q, row) in exp.rows.iter().enumerate() {
                if row.members != oracle_expanded(&points, q, k, m, dedup) {
                    mismatches += 1;
                }
                if !dedup {
                    let ego_hits: usize = oracle_knn(&points, q, k)
                        .iter()
                        .map(|&j| oracle_knn(&points, j, m).contains(&q) as usize)
                        .sum();
                    if row.members.len() != k * m - ego_hits {
                        length_errors += 1;
                    }
                    let distinct: HashSet<_> = row.members.iter().collect();
                    if distinct.len() < row.members.len() {
                        dup_kept += 1;
                    }
                } else {
                    let distinct: HashSet<_> = row.members.iter().collect();
                    dup_seen += (distinct.len() != row.members.len()) as usize;
                }
            }
        }
    }
    rep.line(
        "AC4 expanded-neighborhood semantics",
        mismatches == 0 && length_errors == 0 && dup_kept > 0 && dup_seen == 0,
        format!("20 x 50-point instances: {mismatches} mismatches, {length_errors} length errors, {dup_kept} rows with retained duplicates, {dup_seen} duplicates after dedup"),
    )
}

// ---------------------------------------------------------------------------
// Golden-scenario criteria

struct Golden {
    exp: ExperimentConfig,
    runs: Vec<GoldenRun>,
}

impl Golden {
    fn adapt_with(&self, run: &GoldenRun, cfg: &AdaptConfig) -> Result<(MlpModel, f64)> {
        let mut model = run.source_model.clone();
        adapt(
            &mut model,
            run.target.unlabeled(),
            &run.adapt_config(cfg),
            None,
        )?;
        let acc = run.accuracy_of(&model)?;
        Ok((model, acc))
    }

    fn mean_acc(&self, cfg: &AdaptConfig) -> f64 {
        mean(
            &self
                .runs
                .iter()
                .map(|r| self.adapt_with(r, cfg).unwrap().1)
                .collect::<Vec<_>>(),
        )
    }
}

fn ac5_gain(rep: &mut Report, g: &Golden) {
    let start = Instant::now();
    let src = mean(
        &g.runs
            .iter()
            .map(|r| r.source_accuracy_on_target().unwrap())
            .collect::<Vec<_>>(),
    );
    let adapted = g.mean_acc(&g.exp.adapt);
    let secs = start.elapsed().as_secs_f64();
    let gain = adapted - src;
    rep.line(
        "AC5 end-to-end adaptation gain",
        gain >= 0.05 && secs < 60.0,
        format!(
            "source {src:.4} -> adapted {adapted:.4} (gain {:.1} points, need >= 5); {secs:.1}s",
            gain * 100.0
        ),
    );
}

fn ac6_ablation(rep: &mut Report, g: &Golden) {
    let variants = standard_variants(&g.exp.adapt);
    let mut acc = std::collections::HashMap::<String, Vec<f64>>::new();
    for run in &g.runs {
        let exp = ExperimentConfig {
            adapt: g.exp.adapt.clone(),
            ..g.exp.clone()
        };
        let rows =
            run_ablation_grid(&exp, &run.source, &run.target, &variants, &[run.seed]).unwrap();
        for r in rows {
            acc.entry(r.config_id).or_default().push(r.final_acc);
        }
    }
    let m = |id: &str| mean(&acc[id]);
    let table: Vec<String> = variants
        .iter()
        .map(|v| format!("{}={:.4}", v.id, m(&v.id)))
        .collect();
    println!("       grid means: {}", table.join(" "));
    let (n, na, ne, nea, large) = (
        m("div+N"),
        m("div+N+A"),
        m("div+N+E"),
        m("div+N+E+A"),
        m("div+N+A:largerK"),
    );
    rep.line(
        "AC6a div+N+A >= div+N",
        na >= n,
        format!("{na:.4} vs {n:.4}"),
    );
    rep.line(
        "AC6b div+N+E+A >= div+N+E",
        nea >= ne,
        format!("{nea:.4} vs {ne:.4}"),
    );
    rep.line(
        "AC6c div+N+E+A >= larger K without E",
        nea >= large,
        format!(
            "{nea:.4} vs {large:.4} (K'={})",
            g.exp.adapt.affinity.k * (1 + g.exp.adapt.affinity.m)
        ),
    );
}

fn ac7_neighbor_types(rep: &mut Report, g: &Golden) {
    let (k, m) = (5, 5);
    let mut pre: Vec<EpochEval> = Vec::new();
    let mut post: Vec<EpochEval> = Vec::new();
    for run in &g.runs {
        let labels = run.target.labels().unwrap();
        pre.push(evaluate_model(&run.source_model, run.target_features(), labels, k, m).unwrap());
        let (model, _) = g.adapt_with(run, &g.exp.adapt).unwrap();
        post.push(evaluate_model(&model, run.target_features(), labels, k, m).unwrap());
    }
    // average each rank over the seeds where the type occurs
    let avg = |evals: &[EpochEval], pick: fn(&EpochEval) -> &Vec<f64>, rank: usize| {
        let v: Vec<f64> = evals
            .iter()
            .map(|e| pick(e)[rank])
            .filter(|x| x.is_finite())
            .collect();
        mean(&v)
    };
    fn all(e: &EpochEval) -> &Vec<f64> {
        &e.quality.all
    }
    fn rnn(e: &EpochEval) -> &Vec<f64> {
        &e.quality.rnn
    }
    fn nrnn(e: &EpochEval) -> &Vec<f64> {
        &e.quality.nrnn
    }
    let mut ordering_ok = true;
    let mut improve_ok = true;
    let mut rows = Vec::new();
    for rank in 0..k {
        let (r0, n0, a0) = (
            avg(&pre, rnn, rank),
            avg(&pre, nrnn, rank),
            avg(&pre, all, rank),
        );
        let (r1, n1, a1) = (
            avg(&post, rnn, rank),
            avg(&post, nrnn, rank),
            avg(&post, all, rank),
        );
        ordering_ok &= r0 >= n0;
        improve_ok &= r1 >= r0 && n1 >= n0 && a1 >= a0;
        rows.push(format!(
            "k={} pre rnn/nrnn/all {r0:.3}/{n0:.3}/{a0:.3} post {r1:.3}/{n1:.3}/{a1:.3}",
            rank + 1
        ));
    }
    for r in &rows {
        println!("       {r}");
    }
    rep.line(
        "AC7a RNN ratio >= nRNN ratio before adaptation",
        ordering_ok,
        "k = 1..5".into(),
    );
    rep.line(
        "AC7b per-type ratios do not drop after adaptation",
        improve_ok,
        "k = 1..5, types all/RNN/nRNN".into(),
    );
}

fn ac8_r_sensitivity(rep: &mut Report, g: &Golden) {
    let with_r = |r: f64| {
        let cfg = AdaptConfig {
            affinity: AffinityConfig {
                r,
                ..g.exp.adapt.affinity.clone()
            },
            ..g.exp.adapt.clone()
        };
        g.mean_acc(&cfg)
    };
    let accs: Vec<(f64, f64)> = [0.1, 0.15, 0.2, -1.0]
        .iter()
        .map(|&r| (r, with_r(r)))
        .collect();
    let reasonable: Vec<f64> = accs[..3].iter().map(|x| x.1).collect();
    let spread = reasonable.iter().cloned().fold(f64::MIN, f64::max)
        - reasonable.iter().cloned().fold(f64::MAX, f64::min);
    let detail: Vec<String> = accs.iter().map(|(r, a)| format!("r={r}: {a:.4}")).collect();
    rep.line(
        "AC8a r in {0.1,0.15,0.2} within 2 points",
        spread <= 0.02,
        format!(
            "{}; spread {:.2} points",
            detail[..3].join(", "),
            spread * 100.0
        ),
    );
    rep.line(
        "AC8b r=-1 strictly worse than r=0.1",
        accs[3].1 < accs[0].1,
        format!("{} vs {}", detail[3], detail[0]),
    );
}

fn ac9_fifo(rep: &mut Report, g: &Golden) {
    let full = g.mean_acc(&g.exp.adapt);
    let n_t = g.runs[0].target.len();
    let cap = n_t / 5;
    let fifo = g.mean_acc(&AdaptConfig {
        bank_mode: BankMode::Fifo { capacity: cap },
        ..g.exp.adapt.clone()
    });
    rep.line(
        "AC9 FIFO bank at 20% within 2 points of full bank",
        (fifo - full).abs() <= 0.02,
        format!("capacity {cap}/{n_t}: fifo {fifo:.4} vs full {full:.4}"),
    );
}

fn ac10_source_free(rep: &mut Report, g: &Golden) {
    let run = &g.runs[0];
    let cfg = AdaptConfig {
        epochs: 5,
        ..run.adapt_config(&g.exp.adapt)
    };
    // features only, labels stripped: any label read would fail
    let stripped = Dataset {
        labels: None,
        ..run.target.clone()
    };
    assert!(stripped.labels().is_err());
    let mut blind = run.source_model.clone();
    let sentinel_ok = adapt(&mut blind, stripped.unlabeled(), &cfg, None).is_ok();

    // with true labels or scrambled labels in the evaluator, training is unchanged
    let labels = run.target.labels().unwrap();
    let scrambled: Vec<usize> = labels.iter().map(|&y| (y + 1) % 3).collect();
    let mut with_truth = run.source_model.clone();
    let mut ev = LabeledEvaluator::from_labels(labels);
    let h1 = adapt(&mut with_truth, run.target.unlabeled(), &cfg, Some(&mut ev)).unwrap();
    let mut with_scrambled = run.source_model.clone();
    let mut ev2 = LabeledEvaluator::from_labels(&scrambled);
    let h2 = adapt(
        &mut with_scrambled,
        run.target.unlabeled(),
        &cfg,
        Some(&mut ev2),
    )
    .unwrap();
    let same_params =
        blind.params() == with_truth.params() && with_truth.params() == with_scrambled.params();
    let same_losses = h1
        .records
        .iter()
        .zip(&h2.records)
        .all(|(a, b)| a.total == b.total);
    rep.line(
        "AC10a adaptation never reads target labels",
        sentinel_ok && same_params && same_losses,
        format!(
            "label-free run ok: {sentinel_ok}; params identical across label views: {same_params}"
        ),
    );

    let csv = |_: ()| {
        let mut model = run.source_model.clone();
        let mut ev = LabeledEvaluator::new(&run.target).unwrap();
        let h = adapt(&mut model, run.target.unlabeled(), &cfg, Some(&mut ev)).unwrap();
        render_metrics_csv(&h, &cfg.describe())
    };
    let (a, b) = (csv(()), csv(()));
    rep.line(
        "AC10b identical runs give byte-identical metrics CSV",
        a == b,
        format!("{} bytes", a.len()),
    );
}

fn main() {
    let mut rep = Report { failures: 0 };
    ac1_gradients(&mut rep);
    ac2_knn(&mut rep);
    ac3_reciprocity(&mut rep);
    ac4_expanded(&mut rep);

    let exp = golden_experiment();
    let runs = SEEDS
        .iter()
        .map(|&s| GoldenRun::new(s, &exp).unwrap())
        .collect();
    let golden = Golden { exp, runs };
    ac5_gain(&mut rep, &golden);
    ac6_ablation(&mut rep, &golden);
    ac7_neighbor_types(&mut rep, &golden);
    ac8_r_sensitivity(&mut rep, &golden);
    ac9_fifo(&mut rep, &golden);
    ac10_source_free(&mut rep, &golden);

    if rep.failures > 0 {
        println!("{} acceptance criteria failed", rep.failures);
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
