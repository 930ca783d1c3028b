//! Miniature end-to-end learning through the G-CRF layer.
//!
//! A [`ToyModel`] maps per-pixel features linearly to unary scores and, with
//! one map per label, to embedding columns. The loss is per-pixel softmax
//! cross-entropy on the layer output. Training follows a two-phase schedule:
//! the unary map first with embeddings frozen at zero, then the embedding
//! maps with the unary map frozen, each with polynomially decaying SGD.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cg::{CgConfig, CgReport};
use crate::error::{Error, Result};
use crate::layer::{EmbeddingMatrix, GcrfLayer, LayerGradients};
use crate::synth::LabeledSample;
use crate::tensor::{axpy, read_matrix, write_matrix, Dims, Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr_unary: f64,
    pub base_lr_pairwise: f64,
    pub poly_power: f64,
    pub iters_per_phase: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda: f64,
    /// Standard deviation of the embedding maps at the start of phase 2. The
    /// embedding gradient vanishes at zero embeddings, so they cannot start
    /// there.
    pub embed_init_std: f64,
    /// Keep updating the unary map during phase 2.
    pub joint_finetune: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr_unary: 1e-2,
            base_lr_pairwise: 2.5e-3,
            poly_power: 0.9,
            iters_per_phase: 2000,
            batch_size: 4,
            seed: 0,
            lambda: 1.0,
            embed_init_std: 0.1,
            joint_finetune: false,
        }
    }
}

impl TrainConfig {
    /// Learning rates, schedule length and batch size of the original
    /// large-network regime (20K iterations per phase, batch 10).
    pub fn large_network_regime() -> Self {
        TrainConfig {
            base_lr_unary: 1e-3,
            base_lr_pairwise: 2.5e-4,
            iters_per_phase: 20_000,
            batch_size: 10,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("train.{name} must be positive, got {v}")))
            }
        };
        positive("base_lr_unary", self.base_lr_unary)?;
        positive("base_lr_pairwise", self.base_lr_pairwise)?;
        positive("lambda", self.lambda)?;
        if !(self.poly_power > 0.0 && self.poly_power <= 1.0) {
            return Err(Error::Config(format!(
                "train.poly_power must be in (0, 1], got {}",
                self.poly_power
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.embed_init_std >= 0.0 && self.embed_init_std.is_finite()) {
            return Err(Error::Config("train.embed_init_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// `base * (1 - t / total)^power`.
pub fn poly_lr(base: f64, t: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - t as f64 / total as f64).max(0.0).powf(power)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub dl_dx: Vector,
    pub pixel_accuracy: f64,
}

/// Mean per-pixel softmax cross-entropy of the score blocks of `x`.
/// `dL/dx` is `(softmax - onehot) / P` per pixel block.
pub fn softmax_xent(x: &Vector, truth: &[usize], dims: &Dims) -> Result<LossReport> {
    let (p, l) = (dims.pixels, dims.labels);
    if x.len() != dims.variables() {
        return Err(Error::shape("softmax_xent scores", dims.variables(), x.len()));
    }
    if truth.len() != p {
        return Err(Error::shape("softmax_xent truth", p, truth.len()));
    }
    let mut grad = vec![0.0; x.len()];
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (px, (&t, block)) in truth.iter().zip(x.as_slice().chunks_exact(l)).enumerate() {
        if t >= l {
            return Err(Error::Index {
                what: "label",
                index: t,
                bound: l,
            });
        }
        let (arg, max) = argmax(block);
        let denom: f64 = block.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + denom.ln();
        loss += log_z - block[t];
        correct += usize::from(arg == t);
        let out = &mut grad[px * l..(px + 1) * l];
        for (o, v) in out.iter_mut().zip(block) {
            *o = (v - log_z).exp() / p as f64;
        }
        out[t] -= 1.0 / p as f64;
    }
    Ok(LossReport {
        loss: loss / p as f64,
        dl_dx: Vector::new(grad)?,
        pixel_accuracy: correct as f64 / p as f64,
    })
}

/// First index of the largest value.
fn argmax(block: &[f64]) -> (usize, f64) {
    block.iter().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
    )
}

/// Fraction of pixels whose highest-scoring label matches `truth`.
pub fn pixel_accuracy(x: &Vector, truth: &[usize], labels: usize) -> f64 {
    let correct = x
        .as_slice()
        .chunks_exact(labels)
        .zip(truth)
        .filter(|(block, &t)| argmax(block).0 == t)
        .count();
    correct as f64 / truth.len().max(1) as f64
}

/// Linear unary and embedding streams over `F`-dimensional pixel features.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    /// `L x F`
    pub w_unary: Matrix,
    /// one `D x F` map per label
    pub w_embed: Vec<Matrix>,
    pub dims: Dims,
    pub feature_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightGradients {
    pub d_unary: Matrix,
    pub d_embed: Vec<Matrix>,
}

impl WeightGradients {
    fn zeros_like(model: &ToyModel) -> Self {
        WeightGradients {
            d_unary: Matrix::zeros(model.dims.labels, model.feature_dim),
            d_embed: vec![Matrix::zeros(model.dims.embed_dim, model.feature_dim); model.dims.labels],
        }
    }

    fn accumulate(&mut self, other: &WeightGradients, scale: f64) {
        axpy(scale, other.d_unary.as_slice(), self.d_unary.as_mut_slice());
        for (a, b) in self.d_embed.iter_mut().zip(&other.d_embed) {
            axpy(scale, b.as_slice(), a.as_mut_slice());
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub unary: Vector,
    pub embeddings: EmbeddingMatrix,
    pub x: Vector,
    pub report: CgReport,
    pub layer: GcrfLayer,
}

impl ToyModel {
    pub fn zeros(dims: Dims, feature_dim: usize) -> Self {
        ToyModel {
            w_unary: Matrix::zeros(dims.labels, feature_dim),
            w_embed: vec![Matrix::zeros(dims.embed_dim, feature_dim); dims.labels],
            dims,
            feature_dim,
        }
    }

    fn check_features(&self, features: &Matrix) -> Result<()> {
        let expected = (self.feature_dim, self.dims.pixels);
        if features.shape() != expected {
            return Err(Error::shape(
                "model features",
                format!("{expected:?}"),
                format!("{:?}", features.shape()),
            ));
        }
        Ok(())
    }

    /// Unary scores: `B[(p, l)] = W_unary[l] . f_p`.
    pub fn unary_scores(&self, features: &Matrix) -> Result<Vector> {
        self.check_features(features)?;
        let per_label = self.w_unary.matmul(features)?; // L x P
        let (l, p) = (self.dims.labels, self.dims.pixels);
        let mut b = vec![0.0; l * p];
        for lab in 0..l {
            for (px, v) in per_label.row(lab).iter().enumerate() {
                b[px * l + lab] = *v;
            }
        }
        Vector::new(b)
    }

    /// Embeddings: column `(p, l)` is `W_embed[l] f_p`.
    pub fn embeddings(&self, features: &Matrix) -> Result<EmbeddingMatrix> {
        self.check_features(features)?;
        let (l, p, d) = (self.dims.labels, self.dims.pixels, self.dims.embed_dim);
        let n = l * p;
        let mut e = vec![0.0; d * n];
        for (lab, w) in self.w_embed.iter().enumerate() {
            let proj = w.matmul(features)?; // D x P
            for dd in 0..d {
                let dst = &mut e[dd * n..(dd + 1) * n];
                for (px, v) in proj.row(dd).iter().enumerate() {
                    dst[px * l + lab] = *v;
                }
            }
        }
        Ok(EmbeddingMatrix::new(Matrix::new(d, n, e)?))
    }

    pub fn forward(&self, features: &Matrix, lambda: f64, cg: &CgConfig) -> Result<ModelOutput> {
        model_forward(self, features, lambda, cg)
    }

    pub fn save(&self, dir: impl AsRef<Path>, lambda: f64, cg: &CgConfig) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_matrix(dir.join("w_unary.txt"), &self.w_unary)?;
        let mut embed_files = Vec::new();
        for (l, w) in self.w_embed.iter().enumerate() {
            let name = format!("w_embed_{l}.txt");
            write_matrix(dir.join(&name), w)?;
            embed_files.push(name);
        }
        let manifest = ModelManifest {
            pixels: self.dims.pixels,
            labels: self.dims.labels,
            embed_dim: self.dims.embed_dim,
            feature_dim: self.feature_dim,
            lambda,
            cg: *cg,
            w_unary: "w_unary.txt".into(),
            w_embed: embed_files,
        };
        let path = dir.join(MODEL_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Loads a checkpoint, returning the model with its stored `lambda` and
    /// solver settings.
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, f64, CgConfig)> {
        let dir = dir.as_ref();
        let path = dir.join(MODEL_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: ModelManifest = serde_json::from_str(&text)?;
        let dims = Dims::new(m.pixels, m.labels, m.embed_dim)?;
        let w_unary = read_matrix(dir.join(&m.w_unary))?;
        let w_embed = m
            .w_embed
            .iter()
            .map(|f| read_matrix(dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        let model = ToyModel {
            w_unary,
            w_embed,
            dims,
            feature_dim: m.feature_dim,
        };
        model.validate()?;
        Ok((model, m.lambda, m.cg))
    }

    fn validate(&self) -> Result<()> {
        let (l, d, f) = (self.dims.labels, self.dims.embed_dim, self.feature_dim);
        if self.w_unary.shape() != (l, f) {
            return Err(Error::shape(
                "w_unary",
                format!("{l}x{f}"),
                format!("{:?}", self.w_unary.shape()),
            ));
        }
        if self.w_embed.len() != l {
            return Err(Error::shape("w_embed count", l, self.w_embed.len()));
        }
        for w in &self.w_embed {
            if w.shape() != (d, f) {
                return Err(Error::shape("w_embed", format!("{d}x{f}"), format!("{:?}", w.shape())));
            }
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        self.w_unary
            .as_slice()
            .iter()
            .chain(self.w_embed.iter().flat_map(|w| w.as_slice()))
            .all(|v| v.is_finite())
    }
}

pub const MODEL_MANIFEST: &str = "model.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    #[serde(rename = "P")]
    pixels: usize,
    #[serde(rename = "L")]
    labels: usize,
    #[serde(rename = "D")]
    embed_dim: usize,
    #[serde(rename = "F")]
    feature_dim: usize,
    lambda: f64,
    cg: CgConfig,
    w_unary: String,
    w_embed: Vec<String>,
}

/// Unary scores, embeddings and the G-CRF solution for one image.
pub fn model_forward(model: &ToyModel, features: &Matrix, lambda: f64, cg: &CgConfig) -> Result<ModelOutput> {
    let unary = model.unary_scores(features)?;
    let embeddings = model.embeddings(features)?;
    let layer = GcrfLayer::new(embeddings.clone(), lambda, model.dims, *cg)?;
    let (x, report) = layer.forward(&unary)?;
    Ok(ModelOutput {
        unary,
        embeddings,
        x,
        report,
        layer,
    })
}

/// Pulls layer gradients back through the linear streams:
/// `dW_unary[l] = sum_p dB[(p, l)] f_p^T` and
/// `dW_embed[l] = sum_p dE[:, (p, l)] f_p^T`.
pub fn model_backward(model: &ToyModel, features: &Matrix, grads: &LayerGradients) -> Result<WeightGradients> {
    model.check_features(features)?;
    let (l, p, d, f) = (
        model.dims.labels,
        model.dims.pixels,
        model.dims.embed_dim,
        model.feature_dim,
    );
    let n = l * p;
    if grads.d_unary.len() != n || grads.d_embeddings.shape() != (d, n) {
        return Err(Error::shape(
            "model_backward layer gradients",
            format!("{n} and {d}x{n}"),
            format!("{} and {:?}", grads.d_unary.len(), grads.d_embeddings.shape()),
        ));
    }
    let du = grads.d_unary.as_slice();
    let de = grads.d_embeddings.as_slice();
    let mut out = WeightGradients::zeros_like(model);
    for k in 0..f {
        let fk = features.row(k);
        for lab in 0..l {
            let mut acc = 0.0;
            for (px, &fv) in fk.iter().enumerate() {
                acc += du[px * l + lab] * fv;
            }
            out.d_unary.as_mut_slice()[lab * f + k] = acc;
            for dd in 0..d {
                let row = &de[dd * n..(dd + 1) * n];
                let mut acc = 0.0;
                for (px, &fv) in fk.iter().enumerate() {
                    acc += row[px * l + lab] * fv;
                }
                out.d_embed[lab].as_mut_slice()[dd * f + k] = acc;
            }
        }
    }
    Ok(out)
}

/// Loss and weight gradients for one labeled image.
pub fn sample_loss_and_grad(
    model: &ToyModel,
    sample: &LabeledSample,
    lambda: f64,
    cg: &CgConfig,
) -> Result<(LossReport, WeightGradients)> {
    let out = model_forward(model, &sample.features, lambda, cg)?;
    let loss = softmax_xent(&out.x, &sample.truth, &model.dims)?;
    let (layer_grads, _) = out.layer.backward(&out.x, &loss.dl_dx)?;
    let grads = model_backward(model, &sample.features, &layer_grads)?;
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    pub phase: u8,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

pub const HISTORY_HEADER: &str = "iter,phase,lr,loss,accuracy";

impl HistoryRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:e},{},{}",
            self.iter, self.phase, self.lr, self.loss, self.accuracy
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model after phase 1 (unary stream only).
    pub phase1: ToyModel,
    /// Final model.
    pub model: ToyModel,
    pub history: Vec<HistoryRow>,
}

/// Cycles through the dataset in reshuffled epochs.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(len: usize, rng: ChaCha8Rng) -> Self {
        BatchSampler {
            order: (0..len).collect(),
            cursor: len,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Two-phase piecewise training: phase 1 fits the unary map with the
/// embeddings held at zero; phase 2 freezes the unary map (unless
/// `joint_finetune`) and fits the embedding maps.
pub fn train_two_phase(
    data: &[LabeledSample],
    dims: Dims,
    feature_dim: usize,
    cfg: &TrainConfig,
    cg: &CgConfig,
    mut on_row: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let mut model = ToyModel::zeros(dims, feature_dim);
    for s in data {
        model.check_features(&s.features)?;
        if s.truth.len() != dims.pixels {
            return Err(Error::shape("sample truth", dims.pixels, s.truth.len()));
        }
    }

    let mut sampler = BatchSampler::new(data.len(), ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut history = Vec::with_capacity(2 * cfg.iters_per_phase);
    let total = cfg.iters_per_phase;
    let mut phase1 = None;

    for phase in [1u8, 2] {
        if phase == 2 && total > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(1);
            for w in &mut model.w_embed {
                for v in w.as_mut_slice() {
                    *v = cfg.embed_init_std * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        let base_lr = if phase == 1 {
            cfg.base_lr_unary
        } else {
            cfg.base_lr_pairwise
        };
        for t in 0..total {
            let iter = (phase as usize - 1) * total + t;
            let lr = poly_lr(base_lr, t, total, cfg.poly_power);
            let batch = sampler.next_batch(cfg.batch_size);
            let mut grads = WeightGradients::zeros_like(&model);
            let (mut loss, mut acc) = (0.0, 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &i in &batch {
                let (report, g) =
                    sample_loss_and_grad(&model, &data[i], cfg.lambda, cg).map_err(|e| Error::Divergence {
                        phase,
                        iteration: iter,
                        message: e.to_string(),
                    })?;
                loss += scale * report.loss;
                acc += scale * report.pixel_accuracy;
                grads.accumulate(&g, scale);
            }
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    phase,
                    iteration: iter,
                    message: format!("loss is {loss}"),
                });
            }
            if phase == 1 || cfg.joint_finetune {
                axpy(-lr, grads.d_unary.as_slice(), model.w_unary.as_mut_slice());
            }
            if phase == 2 {
                for (w, g) in model.w_embed.iter_mut().zip(&grads.d_embed) {
                    axpy(-lr, g.as_slice(), w.as_mut_slice());
                }
            }
            if !model.is_finite() {
                return Err(Error::Divergence {
                    phase,
                    iteration: iter,
                    message: "non-finite weights".into(),
                });
            }
            let row = HistoryRow {
                iter,
                phase,
                lr,
                loss,
                accuracy: acc,
            };
            on_row(&row);
            history.push(row);
        }
        if phase == 1 {
            phase1 = Some(model.clone());
        }
    }
    let phase1 = phase1.unwrap_or_else(|| model.clone());
    Ok(TrainOutcome { phase1, model, history })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    /// Accuracy with the embeddings forced to zero.
    pub unary_acc: f64,
    /// Accuracy of the full dense G-CRF.
    pub dense_acc: f64,
}

impl EvalReport {
    pub fn delta(&self) -> f64 {
        self.dense_acc - self.unary_acc
    }
}

/// Pixel accuracy pooled over `samples`, unary-only and with the G-CRF.
pub fn evaluate(model: &ToyModel, samples: &[LabeledSample], lambda: f64, cg: &CgConfig) -> Result<EvalReport> {
    let (mut unary_hits, mut dense_hits, mut total) = (0.0, 0.0, 0usize);
    for s in samples {
        let out = model_forward(model, &s.features, lambda, cg)?;
        let p = s.truth.len();
        // x = B / lambda when the embeddings are zero: same argmax as B
        unary_hits += pixel_accuracy(&out.unary, &s.truth, model.dims.labels) * p as f64;
        dense_hits += pixel_accuracy(&out.x, &s.truth, model.dims.labels) * p as f64;
        total += p;
    }
    let total = total.max(1) as f64;
    Ok(EvalReport {
        unary_acc: unary_hits / total,
        dense_acc: dense_hits / total,
    })
}
