//! Fully connected baseline: window, two tanh hidden layers, softmax.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};

use super::{
    accumulate, cross_entropy_backward, glorot_init, softmax_rows, tanh, Group, LayoutBuilder,
    Network, Tensor, TensorKind,
};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpConfig {
    pub window: usize,
    /// 1-based target position, used only to align labels.
    pub target: usize,
    pub hidden: [usize; 2],
    pub mod_order: usize,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(invalid("hidden sizes must be at least 1"));
        }
        if self.target < 1 || self.target > self.window {
            return Err(invalid(format!(
                "target position {} outside window 1..={}",
                self.target, self.window
            )));
        }
        if !matches!(self.mod_order, 2 | 4) {
            return Err(invalid(format!("unsupported modulation order {}", self.mod_order)));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let [h1, h2] = self.hidden;
        let (t, m) = (self.window, self.mod_order);
        t * h1 + h1 + h1 * h2 + h2 + h2 * m + m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    cfg: MlpConfig,
    tensors: Vec<Tensor>,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl Mlp {
    pub fn init(cfg: MlpConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(cfg)?;
        net.values = glorot_init(&net.tensors, net.values.len(), seed);
        Ok(net)
    }

    pub fn zeros(cfg: MlpConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = [cfg.window, cfg.hidden[0], cfg.hidden[1], cfg.mod_order];
        let mut b = LayoutBuilder::default();
        for l in 0..3 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let g = Group::Layer(l);
            b.push(format!("W{}", l + 1), fan_out, fan_in, TensorKind::Weight, g, (fan_in, fan_out));
            b.push(format!("b{}", l + 1), fan_out, 1, TensorKind::Bias, g, (1, 1));
        }
        let (tensors, total) = b.finish();
        Ok(Self { cfg, tensors, values: vec![0.0; total], mask: vec![true; total] })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.cfg
    }

    fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (w, b) = (&self.tensors[2 * l], &self.tensors[2 * l + 1]);
        (
            ArrayView2::from_shape((w.rows, w.cols), &self.values[w.range()]).expect("shape"),
            ArrayView1::from(&self.values[b.range()]),
        )
    }

    /// Single-window inference.
    pub fn forward(&self, window: &[f64]) -> Result<Vec<f64>> {
        if window.len() != self.cfg.window {
            return Err(Error::LengthMismatch { expected: self.cfg.window, got: window.len() });
        }
        let x = ArrayView2::from_shape((1, window.len()), window).expect("shape");
        Ok(self.chunk_probabilities(x).row(0).to_vec())
    }

    fn activations(&self, x: ArrayView2<f64>) -> [Array2<f64>; 3] {
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(3);
        for l in 0..3 {
            let (w, b) = self.layer(l);
            let input = if l == 0 { x } else { acts[l - 1].view() };
            let mut z = input.dot(&w.t());
            for mut row in z.rows_mut() {
                Zip::from(&mut row).and(&b).for_each(|v, &c| {
                    *v = if l < 2 { tanh(*v + c) } else { *v + c };
                });
            }
            acts.push(z);
        }
        let mut it = acts.into_iter();
        let (h1, h2, mut logits) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        softmax_rows(&mut logits);
        [h1, h2, logits]
    }
}

impl Network for Mlp {
    fn kind(&self) -> &'static str {
        "mlp"
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
        let [_, _, probs] = self.activations(windows);
        probs
    }

    fn chunk_loss_grad(&self, windows: ArrayView2<f64>, labels: &[usize], grad: &mut [f64]) -> f64 {
        let [h1, h2, mut delta] = self.activations(windows);
        let loss = cross_entropy_backward(&mut delta, labels);
        let inputs = [windows, h1.view(), h2.view()];
        for l in (0..3).rev() {
            let (w, _) = self.layer(l);
            let (tw, tb) = (&self.tensors[2 * l], &self.tensors[2 * l + 1]);
            let mut gw = ArrayViewMut2::from_shape((tw.rows, tw.cols), &mut grad[tw.range()]).expect("shape");
            general_mat_mul(1.0, &delta.t(), &inputs[l], 1.0, &mut gw);
            accumulate(grad, tb.offset, delta.sum_axis(Axis(0)));
            if l > 0 {
                let mut next = delta.dot(&w);
                Zip::from(&mut next).and(&inputs[l]).for_each(|d, &a| *d *= 1.0 - a * a);
                delta = next;
            }
        }
        loss
    }
}
