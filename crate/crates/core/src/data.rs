//! Datasets, a synthetic covariate-shift generator and CSV I/O.
//!
//! CSV layout: a header with one name per feature column followed by
//! `label`, then one row per sample. Label cells are class indices, or
//! empty for unlabeled data.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NrcError, Result};
use crate::math::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
    pub n_classes: usize,
    pub domain: Domain,
}

/// Feature-only view of a dataset; the adaptation loop receives this and
/// has no path to the labels.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledView<'a> {
    features: &'a Matrix,
    n_classes: usize,
}

impl<'a> UnlabeledView<'a> {
    pub fn new(features: &'a Matrix, n_classes: usize) -> Self {
        Self {
            features,
            n_classes,
        }
    }

    pub fn features(&self) -> &'a Matrix {
        self.features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Option<Vec<usize>>,
        n_classes: usize,
        domain: Domain,
    ) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != features.rows() {
                return Err(NrcError::Shape(format!(
                    "{} labels for {} rows",
                    l.len(),
                    features.rows()
                )));
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= n_classes) {
                return Err(NrcError::LabelOutOfRange {
                    label: bad,
                    classes: n_classes,
                });
            }
        }
        Ok(Self {
            features,
            labels,
            n_classes,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels.as_deref().ok_or(NrcError::Unlabeled)
    }

    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView::new(&self.features, self.n_classes)
    }
}

/// Parameters of a Gaussian-blob source domain and its shifted target.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Distance between adjacent class centroids.
    pub class_separation: f64,
    /// Rotation in the plane of the first two coordinates, radians.
    pub rotation_angle: f64,
    pub translation: Vec<f64>,
    pub scale: f64,
    pub noise_sigma: f64,
    /// Class proportions; empty means uniform.
    pub label_prior: Vec<f64>,
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            n_classes: 3,
            dim: 2,
            samples_per_class: 50,
            class_separation: 4.0,
            rotation_angle: 15f64.to_radians(),
            translation: vec![1.5, 0.0],
            scale: 1.0,
            noise_sigma: 1.0,
            label_prior: vec![],
            seed: 0,
        }
    }
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(NrcError::Config(m.into()));
        if self.n_classes == 0 {
            return fail("need at least one class");
        }
        if self.dim == 0 || self.samples_per_class == 0 {
            return fail("dim and samples_per_class must be positive");
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.scale)
            || !(positive(self.noise_sigma) || self.noise_sigma == 0.0)
            || !self.class_separation.is_finite()
        {
            return fail("scale must be positive, noise nonnegative");
        }
        if !self.translation.is_empty() && self.translation.len() != self.dim {
            return fail("translation length must equal dim");
        }
        if !self.label_prior.is_empty() {
            if self.label_prior.len() != self.n_classes
                || self.label_prior.iter().any(|&w| w.is_nan() || w < 0.0)
            {
                return fail("label prior must have one nonnegative weight per class");
            }
            if (self.label_prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return fail("label prior must sum to 1");
            }
        }
        Ok(())
    }

    /// Centroids spaced evenly on a circle in the first two coordinates
    /// (on a line when `dim == 1`), adjacent ones `class_separation` apart.
    pub fn centroids(&self) -> Vec<Vec<f64>> {
        let c = self.n_classes;
        (0..c)
            .map(|k| {
                let mut v = vec![0.0; self.dim];
                if c == 1 {
                    return v;
                }
                if self.dim == 1 {
                    v[0] = (k as f64 - (c - 1) as f64 / 2.0) * self.class_separation;
                } else {
                    let radius =
                        self.class_separation / (2.0 * (std::f64::consts::PI / c as f64).sin());
                    let t = 2.0 * std::f64::consts::PI * k as f64 / c as f64;
                    v[0] = radius * t.cos();
                    v[1] = radius * t.sin();
                }
                v
            })
            .collect()
    }

    /// The target map `x ↦ R(θ)(s·x) + t`.
    pub fn shift_point(&self, x: &[f64]) -> Vec<f64> {
        let mut y: Vec<f64> = x.iter().map(|v| v * self.scale).collect();
        if self.dim >= 2 {
            let (s, c) = self.rotation_angle.sin_cos();
            let (a, b) = (y[0], y[1]);
            y[0] = c * a - s * b;
            y[1] = s * a + c * b;
        }
        for (v, t) in y.iter_mut().zip(&self.translation) {
            *v += t;
        }
        y
    }

    fn class_counts(&self) -> Vec<usize> {
        if self.label_prior.is_empty() {
            vec![self.samples_per_class; self.n_classes]
        } else {
            let total = (self.samples_per_class * self.n_classes) as f64;
            self.label_prior
                .iter()
                .map(|w| (w * total).round() as usize)
                .collect()
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, shifted: bool) -> Result<(Matrix, Vec<usize>)> {
        let noise =
            Normal::new(0.0, self.noise_sigma).map_err(|e| NrcError::Config(e.to_string()))?;
        let centroids = self.centroids();
        let counts = self.class_counts();
        let n: usize = counts.iter().sum();
        let mut labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
            .collect();
        // interleave classes so that row order carries no label information
        for i in (1..labels.len()).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        let mut x = Matrix::zeros(n, self.dim);
        for (i, &y) in labels.iter().enumerate() {
            let p: Vec<f64> = centroids[y].iter().map(|c| c + noise.sample(rng)).collect();
            let p = if shifted { self.shift_point(&p) } else { p };
            x.row_mut(i).copy_from_slice(&p);
        }
        Ok((x, labels))
    }
}

/// Draws a labeled source domain and its shifted target counterpart.
/// Target labels are kept for evaluation only.
pub fn generate_pair(spec: &ShiftSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut src_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tgt_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    tgt_rng.set_stream(1);
    let (xs, ys) = spec.sample(&mut src_rng, false)?;
    let (xt, yt) = spec.sample(&mut tgt_rng, true)?;
    Ok((
        Dataset::new(xs, Some(ys), spec.n_classes, Domain::Source)?,
        Dataset::new(xt, Some(yt), spec.n_classes, Domain::Target)?,
    ))
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_io)?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_io)?;
    for i in 0..dataset.len() {
        // Display for f64 is the shortest string that parses back bit-exactly.
        let mut rec: Vec<String> = dataset
            .features
            .row(i)
            .iter()
            .map(|v| v.to_string())
            .collect();
        rec.push(
            dataset
                .labels
                .as_ref()
                .map_or(String::new(), |l| l[i].to_string()),
        );
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> NrcError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => NrcError::Io(io),
        other => NrcError::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Reads a dataset. With `n_classes` given, labels must lie below it;
/// otherwise the class count is inferred as `max label + 1`.
pub fn load_csv(
    path: impl AsRef<Path>,
    n_classes: Option<usize>,
    domain: Domain,
) -> Result<Dataset> {
    let path = path.as_ref();
    let parse_err = |line: usize, msg: String| NrcError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_io)?;
    let header = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let width = header.len();
    if width < 2 || &header[width - 1] != "label" {
        return Err(parse_err(
            1,
            "header must list feature columns followed by `label`".into(),
        ));
    }
    let dim = width - 1;
    let mut data = Vec::new();
    let mut labels: Vec<Option<usize>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != width {
            return Err(parse_err(
                line,
                format!("expected {width} cells, found {}", rec.len()),
            ));
        }
        for (j, cell) in rec.iter().take(dim).enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                parse_err(line, format!("column {}: `{cell}` is not a number", j + 1))
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    line,
                    format!("column {}: non-finite value", j + 1),
                ));
            }
            data.push(v);
        }
        let cell = &rec[dim];
        let label = if cell.is_empty() {
            None
        } else {
            let y: usize = cell
                .parse()
                .map_err(|_| parse_err(line, format!("label `{cell}` is not a class index")))?;
            if let Some(c) = n_classes {
                if y >= c {
                    return Err(parse_err(
                        line,
                        format!("label {y} out of range for {c} classes"),
                    ));
                }
            }
            Some(y)
        };
        if labels
            .first()
            .is_some_and(|f: &Option<usize>| f.is_some() != label.is_some())
        {
            return Err(parse_err(line, "mixes labeled and unlabeled rows".into()));
        }
        labels.push(label);
    }
    let labels: Option<Vec<usize>> = labels.into_iter().collect();
    let classes = n_classes.unwrap_or_else(|| {
        labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |m| m + 1)
    });
    let rows = data.len() / dim;
    Dataset::new(Matrix::from_vec(rows, dim, data)?, labels, classes, domain)
}
