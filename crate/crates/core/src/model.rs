//! A small multilayer perceptron split into a feature extractor and a
//! (optionally weight-normalized) linear classifier, with hand-written
//! backward passes and an SGD-momentum optimizer.
//!
//! Parameters are kept as a flat list of matrices in a fixed order:
//! for each extractor layer `weight (out x in)`, `bias (1 x out)`, then the
//! classifier as either `weight, bias` or `direction, scale (1 x C), bias`.
//! Gradients, momentum buffers and checkpoints all follow that order.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NrcError, Result};
use crate::math::{argmax, dot, softmax_rows, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Widths of the ReLU hidden layers.
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub n_classes: usize,
    pub weight_norm: bool,
}

impl ModelConfig {
    pub fn new(input_dim: usize, n_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![64, 64],
            feature_dim: 32,
            n_classes,
            weight_norm: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.n_classes < 2 {
            return Err(NrcError::Config(format!("degenerate model shape {self:?}")));
        }
        if self.hidden.contains(&0) {
            return Err(NrcError::Config("hidden layer of width 0".into()));
        }
        Ok(())
    }
}

/// Outputs of one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Extractor output `z`, one row per sample.
    pub features: Matrix,
    pub logits: Matrix,
    /// Softmax of `logits`.
    pub probs: Matrix,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    /// Input to every extractor layer plus the classifier input (= features).
    inputs: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct MlpModel {
    params: Vec<Matrix>,
    n_extractor: usize,
    weight_norm: bool,
    cache: Option<ForwardCache>,
}

/// Parameter gradients, shaped like [`MlpModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Matrix>);

impl Gradients {
    pub fn scaled(&self, s: f64) -> Self {
        Self(
            self.0
                .iter()
                .map(|m| {
                    let mut m = m.clone();
                    m.scale(s);
                    m
                })
                .collect(),
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|m| m.as_slice())
            .fold(0.0, |a, &b| a.max(b.abs()))
    }
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// `x · wᵀ + b` for a batch `x`.
fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.rows());
    let bias = b.row(0);
    for i in 0..x.rows() {
        let xi = x.row(i);
        for (o, (wrow, &bo)) in out.row_mut(i).iter_mut().zip(w.iter_rows().zip(bias)) {
            *o = dot(xi, wrow) + bo;
        }
    }
    out
}

/// Gradients of `y = x · wᵀ + b`: returns (dW, db, dX).
fn affine_backward(
    x: &Matrix,
    w: &Matrix,
    dy: &Matrix,
    need_dx: bool,
) -> (Matrix, Matrix, Option<Matrix>) {
    let mut dw = Matrix::zeros(w.rows(), w.cols());
    let mut db = Matrix::zeros(1, w.rows());
    for n in 0..x.rows() {
        let (xn, dyn_) = (x.row(n), dy.row(n));
        for (o, &g) in dyn_.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            db.as_mut_slice()[o] += g;
            for (d, &xv) in dw.row_mut(o).iter_mut().zip(xn) {
                *d += g * xv;
            }
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = Matrix::zeros(x.rows(), x.cols());
        for n in 0..x.rows() {
            let dyn_ = dy.row(n);
            let dxn = dx.row_mut(n);
            for (o, &g) in dyn_.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                for (d, &wv) in dxn.iter_mut().zip(w.row(o)) {
                    *d += g * wv;
                }
            }
        }
        dx
    });
    (dw, db, dx)
}

/// Effective weight `scale_c · v_c / ‖v_c‖` of a weight-normalized layer.
fn weight_norm_effective(direction: &Matrix, scale: &Matrix) -> Matrix {
    let mut w = direction.clone();
    for c in 0..w.rows() {
        let n = dot(direction.row(c), direction.row(c)).sqrt();
        let g = scale.as_slice()[c];
        w.row_mut(c).iter_mut().for_each(|v| *v *= g / n);
    }
    w
}

impl MlpModel {
    /// Xavier-uniform weights, zero biases. Weight-norm scales start at the
    /// direction norms so the initial effective weight equals the direction.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![config.input_dim];
        widths.extend(&config.hidden);
        widths.push(config.feature_dim);
        let mut params = Vec::new();
        for pair in widths.windows(2) {
            params.push(xavier(&mut rng, pair[1], pair[0]));
            params.push(Matrix::zeros(1, pair[1]));
        }
        let w = xavier(&mut rng, config.n_classes, config.feature_dim);
        if config.weight_norm {
            let norms = w.iter_rows().map(|r| dot(r, r).sqrt()).collect();
            params.push(w);
            params.push(Matrix::from_vec(1, config.n_classes, norms)?);
        } else {
            params.push(w);
        }
        params.push(Matrix::zeros(1, config.n_classes));
        Ok(Self {
            params,
            n_extractor: widths.len() - 1,
            weight_norm: config.weight_norm,
            cache: None,
        })
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Matrix] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.params[0].cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.params[2 * self.n_extractor - 2].rows()
    }

    pub fn n_classes(&self) -> usize {
        self.params.last().map_or(0, Matrix::cols)
    }

    pub fn is_weight_normalized(&self) -> bool {
        self.weight_norm
    }

    fn classifier_weight(&self) -> Matrix {
        let base = 2 * self.n_extractor;
        if self.weight_norm {
            weight_norm_effective(&self.params[base], &self.params[base + 1])
        } else {
            self.params[base].clone()
        }
    }

    fn run(&self, x: &Matrix, keep: bool) -> Result<(ForwardOutput, Option<ForwardCache>)> {
        if x.cols() != self.input_dim() {
            return Err(NrcError::Shape(format!(
                "input has {} columns, model expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.n_extractor + 1);
        let mut h = x.clone();
        for l in 0..self.n_extractor {
            let mut out = affine(&h, &self.params[2 * l], &self.params[2 * l + 1]);
            // the last extractor layer is the linear feature embedding
            if l + 1 < self.n_extractor {
                out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            if keep {
                inputs.push(h);
            }
            h = out;
        }
        let logits = affine(&h, &self.classifier_weight(), self.params.last().unwrap());
        let probs = softmax_rows(&logits)?;
        let cache = keep.then(|| {
            inputs.push(h.clone());
            ForwardCache { inputs }
        });
        Ok((
            ForwardOutput {
                features: h,
                logits,
                probs,
            },
            cache,
        ))
    }

    /// Training-mode forward: caches activations for [`MlpModel::backward`].
    pub fn forward(&mut self, x: &Matrix) -> Result<ForwardOutput> {
        let (out, cache) = self.run(x, true)?;
        self.cache = cache;
        Ok(out)
    }

    /// Evaluation-mode forward; leaves the cache untouched.
    pub fn predict(&self, x: &Matrix) -> Result<ForwardOutput> {
        Ok(self.run(x, false)?.0)
    }

    /// Backpropagates `dL/dlogits` for the batch of the last `forward` call.
    pub fn backward(&self, grad_logits: &Matrix) -> Result<Gradients> {
        let cache = self.cache.as_ref().ok_or(NrcError::NoForwardCache)?;
        let feats = &cache.inputs[self.n_extractor];
        if grad_logits.rows() != feats.rows() || grad_logits.cols() != self.n_classes() {
            return Err(NrcError::Shape(format!(
                "grad_logits is {}x{}, expected {}x{}",
                grad_logits.rows(),
                grad_logits.cols(),
                feats.rows(),
                self.n_classes()
            )));
        }
        let mut grads: Vec<Matrix> = self
            .params
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        let base = 2 * self.n_extractor;
        let weight = self.classifier_weight();
        let (dw, db, dz) = affine_backward(feats, &weight, grad_logits, true);
        if self.weight_norm {
            let (v, g) = (&self.params[base], &self.params[base + 1]);
            for c in 0..v.rows() {
                let vc = v.row(c);
                let n = dot(vc, vc).sqrt();
                let gw = dw.row(c);
                let proj = dot(gw, vc) / n;
                grads[base + 1].as_mut_slice()[c] = proj;
                let s = g.as_slice()[c] / n;
                for ((d, &gwi), &vi) in grads[base].row_mut(c).iter_mut().zip(gw).zip(vc) {
                    *d = s * (gwi - proj * vi / n);
                }
            }
            grads[base + 2] = db;
        } else {
            grads[base] = dw;
            grads[base + 1] = db;
        }
        let mut upstream = dz.expect("dx requested");
        for l in (0..self.n_extractor).rev() {
            if l + 1 < self.n_extractor {
                // ReLU gate: the next layer's input is this layer's activation
                let act = &cache.inputs[l + 1];
                for (u, &a) in upstream.as_mut_slice().iter_mut().zip(act.as_slice()) {
                    if a <= 0.0 {
                        *u = 0.0;
                    }
                }
            }
            let (dw, db, dx) =
                affine_backward(&cache.inputs[l], &self.params[2 * l], &upstream, l > 0);
            grads[2 * l] = dw;
            grads[2 * l + 1] = db;
            if let Some(dx) = dx {
                upstream = dx;
            }
        }
        Ok(Gradients(grads))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Checkpoint layout: `b"NRCM"`, version byte, tensor count (u32 LE),
    /// then per tensor rows, cols (u32 LE) and row-major f64 LE values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(p.cols() as u32).to_le_bytes());
            for v in p.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint. The extractor contributes an even number of
    /// tensors, so an odd total marks a weight-normalized classifier.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(NrcError::Checkpoint("truncated".into()));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(NrcError::Checkpoint("bad magic".into()));
        }
        let version = take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(NrcError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let read_u32 = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let count = read_u32(take(4)?);
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let rows = read_u32(take(4)?);
            let cols = read_u32(take(4)?);
            let len = rows
                .checked_mul(cols)
                .ok_or_else(|| NrcError::Checkpoint("tensor too large".into()))?;
            let raw = take(
                len.checked_mul(8)
                    .ok_or_else(|| NrcError::Checkpoint("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(Matrix::from_vec(rows, cols, data)?);
        }
        if !cur.is_empty() {
            return Err(NrcError::Checkpoint("trailing bytes".into()));
        }
        let weight_norm = count % 2 == 1;
        let cls = if weight_norm { 3 } else { 2 };
        if count < cls + 2 {
            return Err(NrcError::Checkpoint(format!("too few tensors ({count})")));
        }
        let model = Self {
            params,
            n_extractor: (count - cls) / 2,
            weight_norm,
            cache: None,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let bad = |msg: String| Err(NrcError::Checkpoint(msg));
        let mut width = self.params[0].cols();
        for l in 0..self.n_extractor {
            let (w, b) = (&self.params[2 * l], &self.params[2 * l + 1]);
            if w.cols() != width || b.rows() != 1 || b.cols() != w.rows() {
                return bad(format!("layer {l} shapes do not chain"));
            }
            width = w.rows();
        }
        let base = 2 * self.n_extractor;
        let w = &self.params[base];
        let classes = w.rows();
        if w.cols() != width || classes < 2 {
            return bad("classifier shape does not chain".into());
        }
        for extra in &self.params[base + 1..] {
            if extra.rows() != 1 || extra.cols() != classes {
                return bad("classifier vectors do not match class count".into());
            }
        }
        if self.weight_norm && w.iter_rows().any(|r| dot(r, r) == 0.0) {
            return bad("zero weight-norm direction".into());
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"NRCM";
const CHECKPOINT_VERSION: u8 = 1;

/// SGD with (heavy-ball) momentum.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    buffers: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(model: &MlpModel, learning_rate: f64, momentum: f64) -> Self {
        let buffers = model
            .params()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            learning_rate,
            momentum,
            buffers,
        }
    }

    pub fn buffers(&self) -> &[Matrix] {
        &self.buffers
    }
}

/// `buffer ← momentum·buffer + grad; param ← param − lr·buffer`.
pub fn sgd_step(model: &mut MlpModel, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    let params = model.params_mut();
    if grads.0.len() != params.len() || state.buffers.len() != params.len() {
        return Err(NrcError::Shape("gradient/parameter count mismatch".into()));
    }
    for ((p, g), b) in params.iter().zip(&grads.0).zip(&state.buffers) {
        if (p.rows(), p.cols()) != (g.rows(), g.cols())
            || (p.rows(), p.cols()) != (b.rows(), b.cols())
        {
            return Err(NrcError::Shape("gradient tensor shape mismatch".into()));
        }
    }
    let (lr, mu) = (state.learning_rate, state.momentum);
    for ((p, g), b) in params
        .iter_mut()
        .zip(&grads.0)
        .zip(state.buffers.iter_mut())
    {
        for ((pv, &gv), bv) in p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(b.as_mut_slice())
        {
            *bv = mu * *bv + gv;
            *pv -= lr * *bv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Label-smoothing ε in `[0, 1)`.
    pub smoothing: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            smoothing: 0.1,
            learning_rate: 1e-2,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainEpoch {
    pub epoch: usize,
    /// Mean smoothed cross-entropy over the epoch's batches.
    pub loss: f64,
    /// Training accuracy measured after the epoch.
    pub accuracy: f64,
}

/// `(1 − ε)·onehot(label) + ε/C`.
pub fn smoothed_target(label: usize, n_classes: usize, smoothing: f64) -> Vec<f64> {
    let mut t = vec![smoothing / n_classes as f64; n_classes];
    t[label] += 1.0 - smoothing;
    t
}

/// Mean label-smoothed cross-entropy of a batch and its gradient w.r.t. logits.
pub fn smoothed_cross_entropy(probs: &Matrix, labels: &[usize], smoothing: f64) -> (f64, Matrix) {
    let (n, c) = (probs.rows(), probs.cols());
    let mut grad = Matrix::zeros(n, c);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let target = smoothed_target(y, c, smoothing);
        for (k, &t) in target.iter().enumerate() {
            let p = probs.get(i, k);
            loss -= t * p.max(1e-300).ln();
            grad.set(i, k, (p - t) / n as f64);
        }
    }
    (loss / n as f64, grad)
}

pub fn accuracy(probs: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(probs.row(i)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Supervised source training with label smoothing and SGD-momentum.
pub fn pretrain_source(
    model: &mut MlpModel,
    features: &Matrix,
    labels: &[usize],
    config: &PretrainConfig,
) -> Result<Vec<PretrainEpoch>> {
    if features.rows() == 0 {
        return Err(NrcError::EmptyDataset);
    }
    if labels.len() != features.rows() {
        return Err(NrcError::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            features.rows()
        )));
    }
    let classes = model.n_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(NrcError::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    if !(0.0..1.0).contains(&config.smoothing) || config.batch_size == 0 {
        return Err(NrcError::Config(format!(
            "invalid pretraining config {config:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = OptimizerState::new(model, config.learning_rate, config.momentum);
    let mut order: Vec<usize> = (0..features.rows()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let x = features.select_rows(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let out = model.forward(&x)?;
            let (loss, grad) = smoothed_cross_entropy(&out.probs, &y, config.smoothing);
            let grads = model.backward(&grad)?;
            sgd_step(model, &grads, &mut opt)?;
            total += loss;
            batches += 1;
        }
        let acc = accuracy(&model.predict(features)?.probs, labels);
        history.push(PretrainEpoch {
            epoch,
            loss: total / batches as f64,
            accuracy: acc,
        });
    }
    Ok(history)
}
