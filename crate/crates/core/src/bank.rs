//! Feature and score memory banks over the target set.
//!
//! Features are L2-normalized when written, so retrieval is a plain inner
//! product. Every row carries a sample id; in full-bank mode row `i` holds
//! sample `i`, in FIFO mode ids record which sample a row came from.

use std::collections::VecDeque;

use crate::error::{NrcError, Result};
use crate::math::{l2_normalize, Matrix};
use crate::model::MlpModel;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    rows: Matrix,
    ids: Vec<usize>,
}

impl FeatureBank {
    /// Normalizes every row of `features`; row `i` gets id `i`.
    pub fn from_features(features: &Matrix) -> Result<Self> {
        let ids = (0..features.rows()).collect();
        Self::with_ids(features, ids)
    }

    pub fn with_ids(features: &Matrix, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != features.rows() {
            return Err(NrcError::Shape(format!(
                "{} ids for {} rows",
                ids.len(),
                features.rows()
            )));
        }
        let mut rows = Matrix::zeros(features.rows(), features.cols());
        for i in 0..features.rows() {
            rows.row_mut(i)
                .copy_from_slice(&l2_normalize(features.row(i))?);
        }
        Ok(Self { rows, ids })
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    #[inline]
    pub fn id(&self, i: usize) -> usize {
        self.ids[i]
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn matrix(&self) -> &Matrix {
        &self.rows
    }

    fn write(&mut self, i: usize, z: &[f64]) -> Result<()> {
        let unit = l2_normalize(z)?;
        self.rows.row_mut(i).copy_from_slice(&unit);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBank {
    rows: Matrix,
}

impl ScoreBank {
    pub fn new(scores: Matrix) -> Result<Self> {
        for (i, r) in scores.iter_rows().enumerate() {
            check_distribution(r).map_err(|m| NrcError::Shape(format!("score row {i}: {m}")))?;
        }
        Ok(Self { rows: scores })
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_classes(&self) -> usize {
        self.rows.cols()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.rows
    }
}

fn check_distribution(row: &[f64]) -> std::result::Result<(), String> {
    if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err("negative or non-finite probability".into());
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(format!("sums to {s}"));
    }
    Ok(())
}

/// The pair of banks `F` and `S`, indexed identically.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBanks {
    pub features: FeatureBank,
    pub scores: ScoreBank,
}

impl MemoryBanks {
    pub fn new(features: FeatureBank, scores: ScoreBank) -> Result<Self> {
        if features.len() != scores.len() {
            return Err(NrcError::Shape(format!(
                "feature bank has {} rows, score bank {}",
                features.len(),
                scores.len()
            )));
        }
        Ok(Self { features, scores })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One evaluation-mode pass over the whole target set.
pub fn init_banks(model: &MlpModel, target: &Matrix) -> Result<MemoryBanks> {
    if target.rows() == 0 {
        return Err(NrcError::EmptyDataset);
    }
    let out = model.predict(target)?;
    MemoryBanks::new(
        FeatureBank::from_features(&out.features)?,
        ScoreBank::new(out.probs)?,
    )
}

/// Overwrites the rows of the current batch with fresh outputs. The stored
/// values are plain copies; nothing here participates in backpropagation.
pub fn update_banks(
    banks: &mut MemoryBanks,
    batch_indices: &[usize],
    batch_features: &Matrix,
    batch_scores: &Matrix,
) -> Result<()> {
    let n = banks.len();
    if batch_features.rows() != batch_indices.len() || batch_scores.rows() != batch_indices.len() {
        return Err(NrcError::Shape(
            "batch outputs do not match batch indices".into(),
        ));
    }
    if batch_features.cols() != banks.features.dim()
        || batch_scores.cols() != banks.scores.n_classes()
    {
        return Err(NrcError::Shape(
            "batch output width does not match bank".into(),
        ));
    }
    if let Some(&bad) = batch_indices.iter().find(|&&i| i >= n) {
        return Err(NrcError::IndexOutOfRange { index: bad, len: n });
    }
    for (b, &i) in batch_indices.iter().enumerate() {
        banks.features.write(i, batch_features.row(b))?;
        banks
            .scores
            .rows
            .row_mut(i)
            .copy_from_slice(batch_scores.row(b));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FifoEntry {
    /// Unit-normalized feature.
    pub feature: Vec<f64>,
    pub score: Vec<f64>,
    pub sample_id: usize,
}

impl FifoEntry {
    pub fn new(feature: &[f64], score: &[f64], sample_id: usize) -> Result<Self> {
        Ok(Self {
            feature: l2_normalize(feature)?,
            score: score.to_vec(),
            sample_id,
        })
    }
}

/// Fixed-capacity bank: new rows are appended and the oldest evicted.
#[derive(Debug, Clone)]
pub struct FifoBank {
    capacity: usize,
    entries: VecDeque<FifoEntry>,
}

impl FifoBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(NrcError::Config("FIFO capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &FifoEntry> {
        self.entries.iter()
    }

    /// Copies the current contents into indexable banks, oldest row first.
    pub fn snapshot(&self) -> Result<MemoryBanks> {
        let dim = self.entries.front().map_or(0, |e| e.feature.len());
        let classes = self.entries.front().map_or(0, |e| e.score.len());
        let mut f = Matrix::zeros(self.len(), dim);
        let mut s = Matrix::zeros(self.len(), classes);
        let mut ids = Vec::with_capacity(self.len());
        for (i, e) in self.entries.iter().enumerate() {
            f.row_mut(i).copy_from_slice(&e.feature);
            s.row_mut(i).copy_from_slice(&e.score);
            ids.push(e.sample_id);
        }
        MemoryBanks::new(FeatureBank { rows: f, ids }, ScoreBank { rows: s })
    }
}

pub fn fifo_push(bank: &mut FifoBank, batch: Vec<FifoEntry>) -> Result<()> {
    if batch.len() > bank.capacity {
        return Err(NrcError::Config(format!(
            "batch of {} exceeds FIFO capacity {}",
            batch.len(),
            bank.capacity
        )));
    }
    if let (Some(first), Some(new)) = (bank.entries.front(), batch.first()) {
        if first.feature.len() != new.feature.len() || first.score.len() != new.score.len() {
            return Err(NrcError::Shape("FIFO entry width mismatch".into()));
        }
    }
    let overflow = (bank.entries.len() + batch.len()).saturating_sub(bank.capacity);
    bank.entries.drain(..overflow);
    bank.entries.extend(batch);
    Ok(())
}
