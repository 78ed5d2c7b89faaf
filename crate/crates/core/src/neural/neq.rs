//! Stage-chain equalizer.
//!
//! A forward chain of `D` stages reads window positions `1..=D` starting
//! from a learned vector `a0`; a backward chain of `T-D` stages reads
//! positions `T` down to `D+1` from `b0`. Each stage squashes its sample
//! through a scalar perceptron, injects it as an extra input to a two-layer
//! tanh block and hands the result to the next stage. A two-layer head
//! merges both chain outputs into class probabilities.
//!
//! Storage order is forward stages `1..=D`, backward stages `T..=D+1`,
//! `a0`, `b0`, then the head. Within a stage: `w_in`, `b_in`, `u`, `W1`,
//! `v`, `c1`, `W2`, `c2`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};

use super::{
    accumulate, cross_entropy_backward, glorot_init, softmax_rows, tanh, Group, LayoutBuilder,
    Network, Tensor, TensorKind,
};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NeuralEqConfig {
    /// Window length `T`.
    pub window: usize,
    /// 1-based target position `D`.
    pub target: usize,
    /// Neurons per layer `N`.
    pub width: usize,
    pub mod_order: usize,
}

impl NeuralEqConfig {
    pub fn new(window: usize, target: usize, width: usize, mod_order: usize) -> Result<Self> {
        let cfg = Self { window, target, width, mod_order };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target < 1 || self.target > self.window {
            return Err(invalid(format!(
                "target position {} outside window 1..={}",
                self.target, self.window
            )));
        }
        if self.width < 1 {
            return Err(invalid("width must be at least 1"));
        }
        if !matches!(self.mod_order, 2 | 4) {
            return Err(invalid(format!("unsupported modulation order {}", self.mod_order)));
        }
        Ok(())
    }

    fn stage_len(&self) -> usize {
        let n = self.width;
        2 * n * n + 3 * n + 3
    }

    /// Window position (0-based) read by storage stage `s`.
    pub fn stage_position(&self, s: usize) -> usize {
        if s < self.target {
            s
        } else {
            self.window - 1 - (s - self.target)
        }
    }
}

/// Closed-form parameter count of the wiring described in the module docs.
pub fn param_count(cfg: &NeuralEqConfig) -> usize {
    let (n, m) = (cfg.width, cfg.mod_order);
    cfg.window * (2 * n * n + 3 * n + 3) + 2 * n + (2 * n * n + n) + (m * n + m)
}

/// Arithmetic cost of one two-layer stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpCount {
    pub multiplies: usize,
    pub adds: usize,
    pub tanhs: usize,
    /// The input perceptron's two multiplies, reported apart.
    pub perceptron_multiplies: usize,
}

pub fn op_count(cfg: &NeuralEqConfig) -> OpCount {
    let n = cfg.width;
    OpCount {
        multiplies: 2 * n * n + n,
        adds: 2 * n * n + n,
        tanhs: 3 * n,
        perceptron_multiplies: 2,
    }
}

// offsets inside a stage
const W_IN: usize = 0;
const B_IN: usize = 1;
const U: usize = 2;
const W1: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct NeuralEq {
    cfg: NeuralEqConfig,
    tensors: Vec<Tensor>,
    values: Vec<f64>,
    mask: Vec<bool>,
    a0: usize,
    b0: usize,
    head: usize,
}

/// Borrowed views of one stage's parameters.
struct StageView<'a> {
    w_in: f64,
    b_in: f64,
    u: f64,
    w1: ArrayView2<'a, f64>,
    v: ArrayView1<'a, f64>,
    c1: ArrayView1<'a, f64>,
    w2: ArrayView2<'a, f64>,
    c2: ArrayView1<'a, f64>,
}

struct StageCache {
    /// Perceptron activation per row.
    t: Array1<f64>,
    hidden: Array2<f64>,
    out: Array2<f64>,
}

impl NeuralEq {
    /// Glorot-uniform weights, zero biases and initial vectors, full mask.
    pub fn init(cfg: NeuralEqConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(cfg)?;
        net.values = glorot_init(&net.tensors, net.values.len(), seed);
        Ok(net)
    }

    pub fn zeros(cfg: NeuralEqConfig) -> Result<Self> {
        cfg.validate()?;
        let (n, m, d, t) = (cfg.width, cfg.mod_order, cfg.target, cfg.window);
        let mut b = LayoutBuilder::default();
        for s in 0..t {
            let pos = cfg.stage_position(s);
            let name = if s < d {
                format!("fwd{}", s + 1)
            } else {
                format!("bwd{}", pos + 1)
            };
            let g = Group::Stage(pos);
            b.push(format!("{name}.w_in"), 1, 1, TensorKind::Scalar, g, (1, 1));
            b.push(format!("{name}.b_in"), 1, 1, TensorKind::Bias, g, (1, 1));
            b.push(format!("{name}.u"), 1, 1, TensorKind::Scalar, g, (1, 1));
            b.push(format!("{name}.W1"), n, n, TensorKind::Weight, g, (n, n));
            b.push(format!("{name}.v"), n, 1, TensorKind::Weight, g, (1, n));
            b.push(format!("{name}.c1"), n, 1, TensorKind::Bias, g, (1, 1));
            b.push(format!("{name}.W2"), n, n, TensorKind::Weight, g, (n, n));
            b.push(format!("{name}.c2"), n, 1, TensorKind::Bias, g, (1, 1));
        }
        let a0 = b.push("a0".into(), n, 1, TensorKind::Init, Group::Init, (1, 1));
        let b0 = b.push("b0".into(), n, 1, TensorKind::Init, Group::Init, (1, 1));
        let head = b.push("head.Wg1".into(), n, 2 * n, TensorKind::Weight, Group::Head, (2 * n, n));
        b.push("head.cg1".into(), n, 1, TensorKind::Bias, Group::Head, (1, 1));
        b.push("head.Wg2".into(), m, n, TensorKind::Weight, Group::Head, (n, m));
        b.push("head.cg2".into(), m, 1, TensorKind::Bias, Group::Head, (1, 1));
        let (tensors, total) = b.finish();
        debug_assert_eq!(total, param_count(&cfg));
        Ok(Self {
            cfg,
            tensors,
            values: vec![0.0; total],
            mask: vec![true; total],
            a0,
            b0,
            head,
        })
    }

    pub fn config(&self) -> &NeuralEqConfig {
        &self.cfg
    }

    fn stage_offset(&self, s: usize) -> usize {
        s * self.cfg.stage_len()
    }

    fn stage(&self, s: usize) -> StageView<'_> {
        let n = self.cfg.width;
        let p = &self.values[self.stage_offset(s)..];
        let mat = |o: usize| ArrayView2::from_shape((n, n), &p[o..o + n * n]).expect("shape");
        let vec = |o: usize| ArrayView1::from(&p[o..o + n]);
        StageView {
            w_in: p[W_IN],
            b_in: p[B_IN],
            u: p[U],
            w1: mat(W1),
            v: vec(W1 + n * n),
            c1: vec(W1 + n * n + n),
            w2: mat(W1 + n * n + 2 * n),
            c2: vec(W1 + 2 * n * n + 2 * n),
        }
    }

    fn head_views(&self) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>, ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (n, m) = (self.cfg.width, self.cfg.mod_order);
        let p = &self.values[self.head..];
        let wg1 = ArrayView2::from_shape((n, 2 * n), &p[..2 * n * n]).expect("shape");
        let cg1 = ArrayView1::from(&p[2 * n * n..2 * n * n + n]);
        let o = 2 * n * n + n;
        let wg2 = ArrayView2::from_shape((m, n), &p[o..o + m * n]).expect("shape");
        let cg2 = ArrayView1::from(&p[o + m * n..o + m * n + m]);
        (wg1, cg1, wg2, cg2)
    }

    /// Reference single-window inference with plain loops.
    pub fn forward_infer(&self, window: &[f64]) -> Result<Vec<f64>> {
        let (t, d, n) = (self.cfg.window, self.cfg.target, self.cfg.width);
        if window.len() != t {
            return Err(Error::LengthMismatch { expected: t, got: window.len() });
        }
        let run_stage = |s: usize, state: &[f64]| -> Vec<f64> {
            let p = self.stage(s);
            let m = tanh(p.w_in * window[self.cfg.stage_position(s)] + p.b_in) * p.u;
            let hidden: Vec<f64> = (0..n)
                .map(|i| {
                    let z: f64 = (0..n).map(|j| p.w1[[i, j]] * state[j]).sum();
                    tanh(z + m * p.v[i] + p.c1[i])
                })
                .collect();
            (0..n)
                .map(|i| {
                    let z: f64 = (0..n).map(|j| p.w2[[i, j]] * hidden[j]).sum();
                    tanh(z + p.c2[i])
                })
                .collect()
        };
        let mut a = self.values[self.a0..self.a0 + n].to_vec();
        for s in 0..d {
            a = run_stage(s, &a);
        }
        let mut b = self.values[self.b0..self.b0 + n].to_vec();
        for s in d..t {
            b = run_stage(s, &b);
        }
        let (wg1, cg1, wg2, cg2) = self.head_views();
        let ab: Vec<f64> = a.into_iter().chain(b).collect();
        let g: Vec<f64> = (0..n)
            .map(|i| tanh((0..2 * n).map(|j| wg1[[i, j]] * ab[j]).sum::<f64>() + cg1[i]))
            .collect();
        let logits: Vec<f64> = (0..self.cfg.mod_order)
            .map(|k| (0..n).map(|j| wg2[[k, j]] * g[j]).sum::<f64>() + cg2[k])
            .collect();
        let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = e.iter().sum();
        Ok(e.into_iter().map(|v| v / sum).collect())
    }

    fn stage_forward(&self, s: usize, input: ArrayView2<f64>, x: ArrayView1<f64>) -> StageCache {
        let p = self.stage(s);
        let t = x.mapv(|xv| tanh(p.w_in * xv + p.b_in));
        let mut hidden = input.dot(&p.w1.t());
        for (mut row, &tv) in hidden.rows_mut().into_iter().zip(&t) {
            let m = tv * p.u;
            Zip::from(&mut row)
                .and(&p.v)
                .and(&p.c1)
                .for_each(|h, &v, &c| *h = tanh(*h + m * v + c));
        }
        let mut out = hidden.dot(&p.w2.t());
        for mut row in out.rows_mut() {
            Zip::from(&mut row).and(&p.c2).for_each(|o, &c| *o = tanh(*o + c));
        }
        StageCache { t, hidden, out }
    }

    /// Backpropagates `d_out` through stage `s`, returning the gradient with
    /// respect to the stage input.
    fn stage_backward(
        &self,
        s: usize,
        input: ArrayView2<f64>,
        x: ArrayView1<f64>,
        cache: &StageCache,
        mut d_out: Array2<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let n = self.cfg.width;
        let p = self.stage(s);
        let base = self.stage_offset(s);
        let (o_w1, o_v, o_c1, o_w2, o_c2) =
            (base + W1, base + W1 + n * n, base + W1 + n * n + n, base + W1 + n * n + 2 * n, base + W1 + 2 * n * n + 2 * n);

        Zip::from(&mut d_out).and(&cache.out).for_each(|d, &o| *d *= 1.0 - o * o);
        let dz2 = d_out;
        general_mat_mul(1.0, &dz2.t(), &cache.hidden, 1.0, &mut grad_mat(grad, o_w2, n, n));
        accumulate(grad, o_c2, dz2.sum_axis(Axis(0)));

        let mut dz1 = dz2.dot(&p.w2);
        Zip::from(&mut dz1).and(&cache.hidden).for_each(|d, &h| *d *= 1.0 - h * h);
        general_mat_mul(1.0, &dz1.t(), &input, 1.0, &mut grad_mat(grad, o_w1, n, n));
        accumulate(grad, o_c1, dz1.sum_axis(Axis(0)));

        let m = &cache.t * p.u;
        accumulate(grad, o_v, dz1.t().dot(&m));
        let dm = dz1.dot(&p.v);
        let (mut dw, mut db, mut du) = (0.0, 0.0, 0.0);
        for ((&g, &t), &xv) in dm.iter().zip(&cache.t).zip(&x) {
            du += g * t;
            let dpre = g * p.u * (1.0 - t * t);
            dw += dpre * xv;
            db += dpre;
        }
        grad[base + W_IN] += dw;
        grad[base + B_IN] += db;
        grad[base + U] += du;

        dz1.dot(&p.w1)
    }

    fn initial(&self, offset: usize, rows: usize) -> Array2<f64> {
        let n = self.cfg.width;
        let v = ArrayView1::from(&self.values[offset..offset + n]);
        v.broadcast((rows, n)).expect("broadcast").to_owned()
    }

    /// Runs both chains, returning the per-stage caches in storage order.
    fn run_chains(&self, windows: ArrayView2<f64>) -> Vec<StageCache> {
        let (t, d) = (self.cfg.window, self.cfg.target);
        let rows = windows.nrows();
        let mut caches: Vec<StageCache> = Vec::with_capacity(t);
        for s in 0..t {
            let x = windows.column(self.cfg.stage_position(s));
            let cache = if s == 0 || s == d {
                let init = self.initial(if s == 0 { self.a0 } else { self.b0 }, rows);
                self.stage_forward(s, init.view(), x)
            } else {
                self.stage_forward(s, caches[s - 1].out.view(), x)
            };
            caches.push(cache);
        }
        caches
    }

    fn chain_outputs(&self, caches: &[StageCache], rows: usize) -> Array2<f64> {
        let (t, d) = (self.cfg.window, self.cfg.target);
        let b = if t > d {
            caches[t - 1].out.clone()
        } else {
            self.initial(self.b0, rows)
        };
        concatenate(Axis(1), &[caches[d - 1].out.view(), b.view()]).expect("rows match")
    }

    fn head_forward(&self, ab: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let (wg1, cg1, wg2, cg2) = self.head_views();
        let mut g = ab.dot(&wg1.t());
        for mut row in g.rows_mut() {
            Zip::from(&mut row).and(&cg1).for_each(|v, &c| *v = tanh(*v + c));
        }
        let mut logits = g.dot(&wg2.t());
        logits += &cg2;
        softmax_rows(&mut logits);
        (g, logits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Checkpoint bytes: `NEQ1`, version, `T`, `D`, `N`, order as u32, the
    /// parameters as little-endian f64, then the mask packed LSB-first.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * self.values.len() + self.mask.len() / 8 + 1);
        out.extend_from_slice(b"NEQ1");
        for v in [CHECKPOINT_VERSION, self.cfg.window as u32, self.cfg.target as u32, self.cfg.width as u32, self.cfg.mod_order as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for chunk in self.mask.chunks(8) {
            out.push(chunk.iter().enumerate().fold(0u8, |b, (i, &m)| b | (m as u8) << i));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 24 || &bytes[..4] != b"NEQ1" {
            return Err(bad("missing NEQ1 header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        if word(0) != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {}", word(0))));
        }
        let cfg = NeuralEqConfig::new(word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize)
            .map_err(|e| bad(&e.to_string()))?;
        let mut net = Self::zeros(cfg)?;
        let n = net.values.len();
        let want = 24 + 8 * n + n.div_ceil(8);
        if bytes.len() != want {
            return Err(bad(&format!("expected {want} bytes, found {}", bytes.len())));
        }
        for (v, chunk) in net.values.iter_mut().zip(bytes[24..24 + 8 * n].chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        let packed = &bytes[24 + 8 * n..];
        for (i, m) in net.mask.iter_mut().enumerate() {
            *m = packed[i / 8] >> (i % 8) & 1 == 1;
        }
        if net.values.iter().zip(&net.mask).any(|(&v, &m)| !m && v != 0.0) {
            return Err(bad("masked parameter with nonzero value"));
        }
        Ok(net)
    }
}

const CHECKPOINT_VERSION: u32 = 1;

fn grad_mat(grad: &mut [f64], offset: usize, rows: usize, cols: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut grad[offset..offset + rows * cols]).expect("shape")
}

impl Network for NeuralEq {
    fn kind(&self) -> &'static str {
        "neuraleq"
    }

    fn window(&self) -> usize {
        self.cfg.window
    }

    fn target(&self) -> usize {
        self.cfg.target
    }

    fn classes(&self) -> usize {
        self.cfg.mod_order
    }

    fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    fn values(&self) -> &[f64] {
        &self.values
    }

    fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn mask(&self) -> &[bool] {
        &self.mask
    }

    fn mask_mut(&mut self) -> &mut [bool] {
        &mut self.mask
    }

    fn chunk_probabilities(&self, windows: ArrayView2<f64>) -> Array2<f64> {
        let caches = self.run_chains(windows);
        let ab = self.chain_outputs(&caches, windows.nrows());
        self.head_forward(&ab).1
    }

    fn chunk_loss_grad(&self, windows: ArrayView2<f64>, labels: &[usize], grad: &mut [f64]) -> f64 {
        let (t, d, n, m) = (self.cfg.window, self.cfg.target, self.cfg.width, self.cfg.mod_order);
        let rows = windows.nrows();
        let caches = self.run_chains(windows);
        let ab = self.chain_outputs(&caches, rows);
        let (g, mut probs) = self.head_forward(&ab);
        let loss = cross_entropy_backward(&mut probs, labels);
        let dlogits = probs;

        let o_wg1 = self.head;
        let o_cg1 = o_wg1 + 2 * n * n;
        let o_wg2 = o_cg1 + n;
        let o_cg2 = o_wg2 + m * n;
        let (wg1, _, wg2, _) = self.head_views();
        general_mat_mul(1.0, &dlogits.t(), &g, 1.0, &mut grad_mat(grad, o_wg2, m, n));
        accumulate(grad, o_cg2, dlogits.sum_axis(Axis(0)));
        let mut dg = dlogits.dot(&wg2);
        Zip::from(&mut dg).and(&g).for_each(|d, &v| *d *= 1.0 - v * v);
        general_mat_mul(1.0, &dg.t(), &ab, 1.0, &mut grad_mat(grad, o_wg1, n, 2 * n));
        accumulate(grad, o_cg1, dg.sum_axis(Axis(0)));
        let dab = dg.dot(&wg1);

        // each chain is walked from its last stage back to its initial vector
        let chains = [(0..d, self.a0, dab.slice(s![.., ..n]).to_owned()), (d..t, self.b0, dab.slice(s![.., n..]).to_owned())];
        for (range, init_offset, d_last) in chains {
            let mut delta = d_last;
            let start = range.start;
            for s in range.rev() {
                let x = windows.column(self.cfg.stage_position(s));
                delta = if s == start {
                    let init = self.initial(init_offset, rows);
                    self.stage_backward(s, init.view(), x, &caches[s], delta, grad)
                } else {
                    self.stage_backward(s, caches[s - 1].out.view(), x, &caches[s], delta, grad)
                };
            }
            accumulate(grad, init_offset, delta.sum_axis(Axis(0)));
        }
        loss
    }
}
