//! The adaptation objective: neighbor consistency weighted by affinity,
//! expanded-neighbor consistency, self-regularization and prediction
//! diversity, each with its gradient with respect to the batch
//! probabilities.
//!
//! Stored bank scores are constants: gradients flow only through the live
//! batch predictions `p`.

use crate::bank::ScoreBank;
use crate::error::{NrcError, Result};
use crate::math::{dot, softmax_backward, Matrix};
use crate::neighbors::{ExpandedTable, NeighborTable};

/// Floor applied inside the diversity logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// A scalar loss and its gradient w.r.t. the batch probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct TermValue {
    pub value: f64,
    pub grad_probs: Matrix,
}

impl TermValue {
    fn zero(n: usize, c: usize) -> Self {
        Self {
            value: 0.0,
            grad_probs: Matrix::zeros(n, c),
        }
    }

    /// Chains the probability gradient through softmax.
    pub fn grad_logits(&self, probs: &Matrix) -> Matrix {
        softmax_backward(probs, &self.grad_probs)
    }

    fn accumulate(&mut self, other: &TermValue) {
        self.value += other.value;
        for (a, b) in self
            .grad_probs
            .as_mut_slice()
            .iter_mut()
            .zip(other.grad_probs.as_slice())
        {
            *a += b;
        }
    }
}

/// Which terms enter the objective. `affinity = false` weighs every
/// neighbor and expanded neighbor by 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossToggles {
    pub neighbor: bool,
    pub affinity: bool,
    pub expanded: bool,
    pub self_reg: bool,
    pub diversity: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            neighbor: true,
            affinity: true,
            expanded: true,
            self_reg: true,
            diversity: true,
        }
    }
}

impl LossToggles {
    pub const NONE: Self = Self {
        neighbor: false,
        affinity: false,
        expanded: false,
        self_reg: false,
        diversity: false,
    };

    /// Compact label such as `div+N+E+A+self`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.diversity {
            parts.push("div");
        }
        if self.neighbor {
            parts.push("N");
        }
        if self.expanded {
            parts.push("E");
        }
        if self.affinity {
            parts.push("A");
        }
        if self.self_reg {
            parts.push("self");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub l_n: f64,
    pub l_e: f64,
    pub l_self: f64,
    pub l_div: f64,
    pub total: f64,
    /// `dL/dlogits`, batch x C.
    pub grad_logits: Matrix,
}

fn check_rows(p: &Matrix, rows: usize, what: &str) -> Result<()> {
    if rows != p.rows() {
        return Err(NrcError::Shape(format!(
            "{what} has {rows} rows for a batch of {}",
            p.rows()
        )));
    }
    if p.rows() == 0 {
        return Err(NrcError::EmptyDataset);
    }
    Ok(())
}

/// `−(1/n) Σ_i Σ_{k ∈ N_i} A_ik · S_kᵀ p_i`.
pub fn loss_neighbor(p: &Matrix, scores: &ScoreBank, table: &NeighborTable) -> Result<TermValue> {
    check_rows(p, table.rows.len(), "neighbor table")?;
    let n = p.rows() as f64;
    let mut out = TermValue::zero(p.rows(), p.cols());
    for (i, row) in table.rows.iter().enumerate() {
        if row.neighbors.is_empty() {
            return Err(NrcError::Config(format!(
                "sample {} has no neighbors",
                row.query
            )));
        }
        for (&k, &a) in row.neighbors.iter().zip(&row.affinity) {
            let s = scores.row(k);
            out.value -= a * dot(s, p.row(i)) / n;
            for (g, &sv) in out.grad_probs.row_mut(i).iter_mut().zip(s) {
                *g -= a * sv / n;
            }
        }
    }
    Ok(out)
}

/// `−(1/n) Σ_i Σ_{m ∈ E_i} r · S_mᵀ p_i`; repeated members count repeatedly.
pub fn loss_expanded(
    p: &Matrix,
    scores: &ScoreBank,
    expanded: &ExpandedTable,
    r: f64,
) -> Result<TermValue> {
    check_rows(p, expanded.rows.len(), "expanded table")?;
    let n = p.rows() as f64;
    let mut out = TermValue::zero(p.rows(), p.cols());
    for (i, row) in expanded.rows.iter().enumerate() {
        for &m in &row.members {
            let s = scores.row(m);
            out.value -= r * dot(s, p.row(i)) / n;
            for (g, &sv) in out.grad_probs.row_mut(i).iter_mut().zip(s) {
                *g -= r * sv / n;
            }
        }
    }
    Ok(out)
}

/// `−(1/n) Σ_i S_iᵀ p_i` with the stored scores `S_i` held constant.
pub fn loss_self(p: &Matrix, stored: &Matrix) -> Result<TermValue> {
    check_rows(p, stored.rows(), "stored scores")?;
    if stored.cols() != p.cols() {
        return Err(NrcError::Shape(
            "stored score width differs from batch".into(),
        ));
    }
    let n = p.rows() as f64;
    let mut out = TermValue::zero(p.rows(), p.cols());
    for i in 0..p.rows() {
        out.value -= dot(stored.row(i), p.row(i)) / n;
        for (g, &sv) in out.grad_probs.row_mut(i).iter_mut().zip(stored.row(i)) {
            *g = -sv / n;
        }
    }
    Ok(out)
}

/// KL divergence of the batch-mean prediction from the uniform distribution.
pub fn loss_diversity(p: &Matrix) -> Result<TermValue> {
    if p.rows() == 0 {
        return Err(NrcError::EmptyDataset);
    }
    let (n, c) = (p.rows() as f64, p.cols());
    let mut mean = vec![0.0; c];
    for row in p.iter_rows() {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v / n);
    }
    let mut out = TermValue::zero(p.rows(), c);
    let mut dmean = vec![0.0; c];
    for (cls, &m) in mean.iter().enumerate() {
        let log_ratio = (m.max(LOG_FLOOR) * c as f64).ln();
        if m > 0.0 {
            out.value += m * log_ratio;
        }
        dmean[cls] = (log_ratio + 1.0) / n;
    }
    for i in 0..p.rows() {
        out.grad_probs.row_mut(i).copy_from_slice(&dmean);
    }
    Ok(out)
}

/// Inputs for one batch of the combined objective.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub probs: &'a Matrix,
    pub scores: &'a ScoreBank,
    /// Bank scores of the batch samples themselves.
    pub self_scores: &'a Matrix,
    pub neighbors: Option<&'a NeighborTable>,
    pub expanded: Option<&'a ExpandedTable>,
    pub expanded_r: f64,
}

/// Sums the enabled terms with unit weights and chains the summed
/// probability gradient through softmax.
pub fn total_loss(inputs: &LossInputs<'_>, toggles: &LossToggles) -> Result<LossBreakdown> {
    let p = inputs.probs;
    let mut sum = TermValue::zero(p.rows(), p.cols());
    let mut parts = [0.0; 4];
    if toggles.neighbor {
        let table = inputs
            .neighbors
            .ok_or_else(|| NrcError::Config("neighbor table missing".into()))?;
        let t = loss_neighbor(p, inputs.scores, table)?;
        parts[0] = t.value;
        sum.accumulate(&t);
    }
    if toggles.expanded {
        let table = inputs
            .expanded
            .ok_or_else(|| NrcError::Config("expanded table missing".into()))?;
        let t = loss_expanded(p, inputs.scores, table, inputs.expanded_r)?;
        parts[1] = t.value;
        sum.accumulate(&t);
    }
    if toggles.self_reg {
        let t = loss_self(p, inputs.self_scores)?;
        parts[2] = t.value;
        sum.accumulate(&t);
    }
    if toggles.diversity {
        let t = loss_diversity(p)?;
        parts[3] = t.value;
        sum.accumulate(&t);
    }
    let [l_n, l_e, l_self, l_div] = parts;
    Ok(LossBreakdown {
        l_n,
        l_e,
        l_self,
        l_div,
        total: l_n + l_e + l_self + l_div,
        grad_logits: sum.grad_logits(p),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neighbors::{ExpandedRow, NeighborRow};

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn table(rows: Vec<(Vec<usize>, Vec<f64>)>) -> NeighborTable {
        NeighborTable {
            rows: rows
                .into_iter()
                .enumerate()
                .map(|(q, (neighbors, affinity))| NeighborRow {
                    query: q,
                    similarities: vec![0.0; neighbors.len()],
                    reciprocal: affinity.iter().map(|&a| a == 1.0).collect(),
                    neighbors,
                    affinity,
                })
                .collect(),
        }
    }

    #[test]
    fn neighbor_examples() {
        let bank = ScoreBank::new(m(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let p = m(&[&[0.6, 0.4]]);
        let t = loss_neighbor(&p, &bank, &table(vec![(vec![0], vec![1.0])])).unwrap();
        assert!((t.value + 0.6).abs() < 1e-15);
        let t = loss_neighbor(&p, &bank, &table(vec![(vec![0, 1], vec![0.0, 0.0])])).unwrap();
        assert_eq!(t.value, 0.0);
        let t = loss_neighbor(
            &m(&[&[1.0, 0.0]]),
            &bank,
            &table(vec![(vec![0], vec![1.0])]),
        )
        .unwrap();
        assert_eq!(t.value, -1.0);
        assert!(loss_neighbor(&p, &bank, &table(vec![(vec![], vec![])])).is_err());
    }

    #[test]
    fn expanded_counts_duplicates() {
        let bank = ScoreBank::new(m(&[&[1.0, 0.0]])).unwrap();
        let p = m(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let e = ExpandedTable {
            rows: vec![
                ExpandedRow {
                    query: 0,
                    members: vec![0, 0],
                },
                ExpandedRow {
                    query: 1,
                    members: vec![],
                },
            ],
        };
        let t = loss_expanded(&p, &bank, &e, 0.1).unwrap();
        assert!((t.value - 2.0 * (-0.1 * 0.5) / 2.0).abs() < 1e-15);
        assert_eq!(loss_expanded(&p, &bank, &e, 0.0).unwrap().value, 0.0);
    }

    #[test]
    fn self_examples() {
        let p = m(&[&[0.5, 0.5]]);
        assert!((loss_self(&p, &p).unwrap().value + 0.5).abs() < 1e-15);
        let one = m(&[&[0.0, 1.0]]);
        assert_eq!(loss_self(&one, &one).unwrap().value, -1.0);
        // gradient is -S/n, not -2p/n
        let p = m(&[&[0.2, 0.8], &[0.7, 0.3]]);
        let s = m(&[&[0.4, 0.6], &[0.1, 0.9]]);
        let t = loss_self(&p, &s).unwrap();
        assert_eq!(t.grad_probs, m(&[&[-0.2, -0.3], &[-0.05, -0.45]]));
    }

    #[test]
    fn after_bank_update_self_is_negative_mean_square_norm() {
        let p = m(&[&[0.2, 0.8], &[0.7, 0.3]]);
        let expect = -(0.04 + 0.64 + 0.49 + 0.09) / 2.0;
        assert!((loss_self(&p, &p).unwrap().value - expect).abs() < 1e-15);
    }

    #[test]
    fn diversity_examples() {
        assert_eq!(
            loss_diversity(&m(&[&[0.5, 0.5], &[0.5, 0.5]]))
                .unwrap()
                .value,
            0.0
        );
        let t = loss_diversity(&m(&[&[1.0, 0.0], &[1.0, 0.0]])).unwrap();
        assert!((t.value - std::f64::consts::LN_2).abs() < 1e-12);
        // balanced mean from unbalanced rows
        assert!(
            loss_diversity(&m(&[&[1.0, 0.0], &[0.0, 1.0]]))
                .unwrap()
                .value
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn toggled_off_terms_vanish() {
        let p = m(&[&[0.3, 0.7], &[0.9, 0.1]]);
        let bank = ScoreBank::new(p.clone()).unwrap();
        let inputs = LossInputs {
            probs: &p,
            scores: &bank,
            self_scores: &p,
            neighbors: None,
            expanded: None,
            expanded_r: 0.1,
        };
        let toggles = LossToggles {
            neighbor: false,
            expanded: false,
            affinity: false,
            ..Default::default()
        };
        let b = total_loss(&inputs, &toggles).unwrap();
        let expect = loss_self(&p, &p).unwrap().value + loss_diversity(&p).unwrap().value;
        assert!((b.total - expect).abs() < 1e-15);
        assert_eq!((b.l_n, b.l_e), (0.0, 0.0));
        assert!(total_loss(&inputs, &LossToggles::default()).is_err());
        let none = total_loss(&inputs, &LossToggles::NONE).unwrap();
        assert_eq!(none.total, 0.0);
        assert!(none.grad_logits.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn toggle_labels() {
        assert_eq!(LossToggles::default().label(), "div+N+E+A+self");
        assert_eq!(LossToggles::NONE.label(), "none");
    }
}
