//! Learned equalizers: the forward/backward stage network and a plain
//! two-hidden-layer baseline, sharing one flat parameter representation.
//!
//! Parameters live in a single `Vec<f64>` with a parallel prune mask. A
//! [`Tensor`] table names every slice of it, so optimizers, pruning and
//! checkpointing never need to know the architecture.

mod mlp;
mod neq;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::distr::{Distribution, Uniform};
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::rng::{Domain, Part, StreamKey};
use crate::signal::Modulation;

pub use mlp::{Mlp, MlpConfig};
pub use neq::{op_count, param_count, NeuralEq, NeuralEqConfig, OpCount};

/// Rows per unit of batched work. Fixed so results do not depend on the
/// thread count.
pub const CHUNK_ROWS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    /// Prunable weight matrix or vector.
    Weight,
    Bias,
    /// Learned initial state of a chain.
    Init,
    /// Input perceptron scalar.
    Scalar,
}

/// Which left-to-right layer a tensor belongs to, for sparsity reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    /// Stage consuming window position `0..T`.
    Stage(usize),
    Layer(usize),
    Init,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub kind: TensorKind,
    pub group: Group,
    /// Fan-in and fan-out for initialization.
    pub fans: (usize, usize),
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn prunable(&self) -> bool {
        self.kind == TensorKind::Weight
    }
}

/// Builds a contiguous tensor table.
#[derive(Default)]
pub(crate) struct LayoutBuilder {
    tensors: Vec<Tensor>,
    next: usize,
}

impl LayoutBuilder {
    pub(crate) fn push(
        &mut self,
        name: String,
        rows: usize,
        cols: usize,
        kind: TensorKind,
        group: Group,
        fans: (usize, usize),
    ) -> usize {
        let offset = self.next;
        self.tensors.push(Tensor { name, offset, rows, cols, kind, group, fans });
        self.next += rows * cols;
        offset
    }

    pub(crate) fn finish(self) -> (Vec<Tensor>, usize) {
        (self.tensors, self.next)
    }
}

/// Uniform Glorot draw for weights and scalars, zeros elsewhere.
pub(crate) fn glorot_init(tensors: &[Tensor], total: usize, seed: u64) -> Vec<f64> {
    let mut rng = StreamKey::block(seed, Domain::Init, 0, Part::Symbols).rng();
    let mut values = vec![0.0; total];
    for t in tensors {
        if matches!(t.kind, TensorKind::Weight | TensorKind::Scalar) {
            let limit = (6.0 / (t.fans.0 + t.fans.1) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            for v in &mut values[t.range()] {
                *v = dist.sample(&mut rng);
            }
        }
    }
    values
}

/// Common interface of the trainable window classifiers.
pub trait Network: Send + Sync {
    fn kind(&self) -> &'static str;
    /// Window length `T`.
    fn window(&self) -> usize;
    /// 1-based target position `D` within the window.
    fn target(&self) -> usize;
    fn classes(&self) -> usize;
    fn tensors(&self) -> &[Tensor];
    fn values(&self) -> &[f64];
    fn values_mut(&mut self) -> &mut [f64];
    fn mask(&self) -> &[bool];
    fn mask_mut(&mut self) -> &mut [bool];

    /// Class probabilities for each row of `windows`.
    fn chunk_probabilities(&self, windows: ArrayView2<f64>) -> Array2<f64>;

    /// Summed cross-entropy over the rows, adding the summed gradient into
    /// `grad`.
    fn chunk_loss_grad(&self, windows: ArrayView2<f64>, labels: &[usize], grad: &mut [f64]) -> f64;

    fn param_count(&self) -> usize {
        self.values().len()
    }

    fn probabilities(&self, windows: ArrayView2<f64>) -> Array2<f64> {
        let parts: Vec<Array2<f64>> = chunk_starts(windows.nrows())
            .into_par_iter()
            .map(|r| self.chunk_probabilities(windows.slice(s![r, ..])))
            .collect();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        if views.is_empty() {
            return Array2::zeros((0, self.classes()));
        }
        ndarray::concatenate(Axis(0), &views).expect("congruent chunks")
    }

    /// Argmax class per window, ties to the lower class.
    fn classify(&self, windows: ArrayView2<f64>) -> Vec<usize> {
        self.probabilities(windows)
            .rows()
            .into_iter()
            .map(|r| crate::hmm::argmax(r.iter().copied()))
            .collect()
    }

    /// Mean loss over the batch and its gradient. Chunks are reduced in a
    /// fixed order, so the result is bit-identical for any thread count.
    fn loss_grad(&self, windows: ArrayView2<f64>, labels: &[usize]) -> (f64, Vec<f64>) {
        let n = self.values().len();
        let parts: Vec<(f64, Vec<f64>)> = chunk_starts(windows.nrows())
            .into_par_iter()
            .map(|r| {
                let mut g = vec![0.0; n];
                let loss = self.chunk_loss_grad(windows.slice(s![r.clone(), ..]), &labels[r], &mut g);
                (loss, g)
            })
            .collect();
        let mut grad = vec![0.0; n];
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let scale = 1.0 / labels.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        (loss * scale, grad)
    }

    /// Symbol decisions for a received stream, indexed like the transmitted
    /// symbols. Symbols without a full window fall back to slicing the
    /// main-cursor sample.
    fn predict_stream(&self, x: &[f64], pre: usize, modulation: &Modulation) -> Result<Vec<usize>> {
        let t = self.window();
        if x.len() < t {
            return Err(invalid(format!(
                "stream of {} samples is shorter than the window {t}",
                x.len()
            )));
        }
        let windows = sliding_windows(x, t);
        let classes = self.classify(windows.view());
        let offset = crate::signal::label_offset(self.target(), pre);
        Ok((0..x.len())
            .map(|j| {
                let k = j as isize - offset;
                if k >= 0 && (k as usize) < classes.len() {
                    classes[k as usize]
                } else {
                    modulation.slice(x[(j + pre).min(x.len() - 1)])
                }
            })
            .collect())
    }
}

fn chunk_starts(rows: usize) -> Vec<std::ops::Range<usize>> {
    (0..rows)
        .step_by(CHUNK_ROWS)
        .map(|a| a..(a + CHUNK_ROWS).min(rows))
        .collect()
}

/// Every length-`t` window of `x` as rows.
pub fn sliding_windows(x: &[f64], t: usize) -> Array2<f64> {
    let rows = (x.len() + 1).saturating_sub(t);
    Array2::from_shape_fn((rows, t), |(k, i)| x[k + i])
}

/// Row-wise softmax in place.
pub(crate) fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Summed clamped cross-entropy; turns `probs` into the logit gradient.
pub(crate) fn cross_entropy_backward(probs: &mut Array2<f64>, labels: &[usize]) -> f64 {
    let mut loss = 0.0;
    for (mut row, &label) in probs.rows_mut().into_iter().zip(labels) {
        loss -= crate::train::clamp_probability(row[label]).ln();
        row[label] -= 1.0;
    }
    loss
}

/// Hyperbolic tangent through a branch-free exponential, accurate to a few
/// ulps of 1 in absolute terms and several times faster than the libm call,
/// which dominates inference cost.
#[inline(always)]
pub fn tanh(x: f64) -> f64 {
    // round-to-nearest trick: adding 1.5*2^52 leaves the integer in the low bits
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x2 = 2.0 * x.abs();
    // written as a select so NaN propagates
    let x2 = if x2 > 40.0 { 40.0 } else { x2 };
    let y = x2 * std::f64::consts::LOG2_E + SHIFT;
    let k = y.to_bits().wrapping_sub(SHIFT.to_bits()) as i64;
    let kf = y - SHIFT;
    let r = x2 - kf * LN2_HI - kf * LN2_LO;
    // Taylor series of e^r to degree 12; |r| <= ln2/2 keeps the tail below 1e-16
    let mut p = 1.0 / 479_001_600.0;
    for c in TAYLOR {
        p = p * r + c;
    }
    let e = p * f64::from_bits(((k + 1023) as u64) << 52);
    ((e - 1.0) / (e + 1.0)).copysign(x)
}

const TAYLOR: [f64; 12] = [
    1.0 / 39_916_800.0,
    1.0 / 3_628_800.0,
    1.0 / 362_880.0,
    1.0 / 40_320.0,
    1.0 / 5_040.0,
    1.0 / 720.0,
    1.0 / 120.0,
    1.0 / 24.0,
    1.0 / 6.0,
    0.5,
    1.0,
    1.0,
];

/// Add `a` into the gradient slice of `tensor`, viewed as a row vector.
pub(crate) fn accumulate(grad: &mut [f64], offset: usize, a: impl IntoIterator<Item = f64>) {
    for (g, v) in grad[offset..].iter_mut().zip(a) {
        *g += v;
    }
}

#[cfg(test)]
mod tests;
