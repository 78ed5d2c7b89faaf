//! ISI-channel hidden Markov model and the scaled forward-backward (BCJR)
//! recursions.
//!
//! A state is the tuple of the last `L = |h|` transmitted symbols, packed as
//! `s = Σ_i hist[i]·M^i` with `hist[0]` the newest symbol. Its noiseless
//! output is `Σ_i level(hist[i])·h[i]`. Appending symbol `a` to state `s`
//! moves to `a + M·(s mod M^(L-1))`, so every state has exactly `M`
//! successors and `M` predecessors, each transition with probability `1/M`.
//!
//! Each recursion step is renormalized to sum 1. The log of the normalizer
//! (including the Gaussian constant) is recorded per step, so unscaled
//! quantities are `scaled · exp(Σ log_scales)`.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::signal::{Channel, Modulation};

pub const DEFAULT_STATE_CAP: usize = 1 << 20;

#[derive(Clone, Debug)]
pub struct Hmm {
    modulation: Modulation,
    channel: Channel,
    sigma: f64,
    outputs: Vec<f64>,
    /// `M^(L-1)`: number of distinct histories once the oldest symbol is dropped.
    tail_states: usize,
}

impl Hmm {
    pub fn build(channel: &Channel, modulation: &Modulation, sigma: f64) -> Result<Self> {
        Self::build_with_cap(channel, modulation, sigma, DEFAULT_STATE_CAP)
    }

    pub fn build_with_cap(
        channel: &Channel,
        modulation: &Modulation,
        sigma: f64,
        cap: usize,
    ) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(invalid(format!("sigma must be positive, got {sigma}")));
        }
        let m = modulation.order();
        let states = state_count(m, channel.len());
        if states > cap as u128 {
            return Err(Error::Capacity { states, cap });
        }
        let states = states as usize;
        let taps = channel.taps();
        let outputs = (0..states)
            .map(|s| {
                let mut rest = s;
                let mut acc = 0.0;
                for h in taps {
                    acc += modulation.level(rest % m) * h;
                    rest /= m;
                }
                acc
            })
            .collect();
        Ok(Self {
            modulation: modulation.clone(),
            channel: channel.clone(),
            sigma,
            outputs,
            tail_states: states / m,
        })
    }

    pub fn state_count(&self) -> usize {
        self.outputs.len()
    }

    pub fn modulation(&self) -> &Modulation {
        &self.modulation
    }

    pub fn channel(&self) -> &Channel {
        &self.channel
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn output(&self, state: usize) -> f64 {
        self.outputs[state]
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    /// Symbol history of a state, newest first.
    pub fn history(&self, state: usize) -> Vec<usize> {
        let m = self.modulation.order();
        let mut rest = state;
        (0..self.channel.len())
            .map(|_| {
                let a = rest % m;
                rest /= m;
                a
            })
            .collect()
    }

    /// Symbol transmitted at the time step this state belongs to.
    #[inline]
    pub fn newest_symbol(&self, state: usize) -> usize {
        state % self.modulation.order()
    }

    pub fn successors(&self, state: usize) -> impl Iterator<Item = usize> + '_ {
        let m = self.modulation.order();
        let base = m * (state % self.tail_states);
        (0..m).map(move |a| a + base)
    }

    pub fn transition_probability(&self) -> f64 {
        1.0 / self.modulation.order() as f64
    }

    /// Shifted emission weights for one observation: `w[s] = exp(-(x-o_s)²/2σ² + m)`
    /// where `m` makes the largest weight 1. Returns the log of the factor
    /// that converts `w` to true densities.
    fn emission_weights(&self, x: f64, out: &mut [f64]) -> f64 {
        let inv = 0.5 / (self.sigma * self.sigma);
        let mut min_e = f64::INFINITY;
        for (o, w) in self.outputs.iter().zip(out.iter_mut()) {
            let d = x - o;
            *w = d * d * inv;
            min_e = min_e.min(*w);
        }
        for w in out.iter_mut() {
            *w = (min_e - *w).exp();
        }
        -min_e - 0.5 * (2.0 * std::f64::consts::PI * self.sigma * self.sigma).ln()
    }
}

impl Hmm {
    fn log_gauss_norm(&self) -> f64 {
        -0.5 * (2.0 * std::f64::consts::PI * self.sigma * self.sigma).ln()
    }

    /// Forward step evaluated with log weights: fills `cur[a + M·r]` with
    /// `pred[r]·N(x; o_s, σ²)` up to a common factor and returns its log.
    fn log_domain_step(&self, x: f64, pred: &[f64], cur: &mut [f64]) -> f64 {
        let m = self.modulation.order();
        let inv = 0.5 / (self.sigma * self.sigma);
        let mut max = f64::NEG_INFINITY;
        for (s, c) in cur.iter_mut().enumerate() {
            let d = x - self.outputs[s];
            *c = pred[s / m].ln() - d * d * inv;
            max = max.max(*c);
        }
        cur.iter_mut().for_each(|c| *c = (*c - max).exp());
        max + self.log_gauss_norm()
    }

    /// Backward counterpart of [`Hmm::log_domain_step`], writing the
    /// per-tail sums into `scratch`.
    fn log_domain_backward(&self, x: f64, beta: &[f64], scratch: &mut [f64]) -> f64 {
        let m = self.modulation.order();
        let inv = 0.5 / (self.sigma * self.sigma);
        let log_w = |s: usize| {
            let d = x - self.outputs[s];
            beta[s].ln() - d * d * inv
        };
        let max = (0..beta.len()).map(log_w).fold(f64::NEG_INFINITY, f64::max);
        let a = self.transition_probability();
        for (r, v) in scratch.iter_mut().enumerate() {
            *v = a * (0..m).map(|sym| (log_w(sym + m * r) - max).exp()).sum::<f64>();
        }
        max + self.log_gauss_norm()
    }
}

fn state_count(order: usize, len: usize) -> u128 {
    (order as u128).saturating_pow(len as u32)
}

/// Gaussian observation density.
pub fn emission(x: f64, state_output: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    let u = (x - state_output) / sigma;
    Ok((-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI * sigma * sigma).sqrt())
}

/// Row-normalized recursion output (`T × |S|`) with per-step log scales.
#[derive(Clone, Debug)]
pub struct Scaled {
    pub values: Array2<f64>,
    pub log_scales: Vec<f64>,
}

/// State posteriors γ (`T × |S|`), rows summing to one.
#[derive(Clone, Debug)]
pub struct Posteriors {
    pub gamma: Array2<f64>,
    pub forward_log_scales: Vec<f64>,
}

fn normalize(row: &mut [f64], step: usize) -> Result<f64> {
    let total: f64 = row.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Numerical {
            step,
            what: "total probability underflow",
        });
    }
    let inv = 1.0 / total;
    row.iter_mut().for_each(|v| *v *= inv);
    Ok(total)
}

struct Emissions<'a> {
    x: &'a [f64],
    weights: Array2<f64>,
    log_factors: Vec<f64>,
}

fn emissions<'a>(hmm: &Hmm, x: &'a [f64]) -> Emissions<'a> {
    let mut weights = Array2::zeros((x.len(), hmm.state_count()));
    let log_factors = x
        .iter()
        .zip(weights.rows_mut())
        .map(|(&xt, mut row)| hmm.emission_weights(xt, row.as_slice_mut().unwrap()))
        .collect();
    Emissions {
        x,
        weights,
        log_factors,
    }
}

fn forward_pass(hmm: &Hmm, em: &Emissions) -> Result<Scaled> {
    let steps = em.weights.nrows();
    let n = hmm.state_count();
    let m = hmm.modulation.order();
    let tail = hmm.tail_states;
    let a = hmm.transition_probability();
    let mut alpha = Array2::zeros((steps, n));
    let mut log_scales = Vec::with_capacity(steps);
    let mut pred = vec![0.0; tail];

    for t in 0..steps {
        let e = em.weights.row(t);
        if t == 0 {
            let prior = 1.0 / n as f64;
            for (dst, &w) in alpha.row_mut(0).iter_mut().zip(e) {
                *dst = prior * w;
            }
        } else {
            let (prev, mut cur) = alpha.multi_slice_mut((ndarray::s![t - 1, ..], ndarray::s![t, ..]));
            let prev = prev.as_slice().unwrap();
            // predecessors of a + M·r are r + tail·c for every oldest symbol c
            for (r, p) in pred.iter_mut().enumerate() {
                *p = (0..m).map(|c| prev[r + tail * c]).sum::<f64>() * a;
            }
            let cur = cur.as_slice_mut().unwrap();
            for (r, &p) in pred.iter().enumerate() {
                for sym in 0..m {
                    let s = sym + m * r;
                    cur[s] = p * e[s];
                }
            }
            if !(cur.iter().sum::<f64>() > 0.0) {
                // every reachable state sits far below the global best one;
                // redo the step relative to the best reachable state
                let log_factor = hmm.log_domain_step(em.x[t], &pred, cur);
                let total = normalize(cur, t)?;
                log_scales.push(total.ln() + log_factor);
                continue;
            }
        }
        let total = normalize(alpha.row_mut(t).as_slice_mut().unwrap(), t)?;
        log_scales.push(total.ln() + em.log_factors[t]);
    }
    Ok(Scaled {
        values: alpha,
        log_scales,
    })
}

/// One backward step: `next[s] ∝ Σ_a (1/M)·e[a+M·r(s)]·beta[a+M·r(s)]`,
/// using the emissions of observation `t`. Returns the log of the factor
/// taking the normalized row back to true scale.
fn backward_step(
    hmm: &Hmm,
    em: &Emissions,
    t: usize,
    beta: &[f64],
    next: &mut [f64],
    scratch: &mut [f64],
) -> Result<f64> {
    let m = hmm.modulation.order();
    let tail = hmm.tail_states;
    let a = hmm.transition_probability();
    let e = em.weights.row(t);
    let e = e.as_slice().unwrap();
    for (r, v) in scratch.iter_mut().enumerate() {
        *v = (0..m).map(|sym| {
            let s = sym + m * r;
            e[s] * beta[s]
        }).sum::<f64>() * a;
    }
    let mut log_factor = em.log_factors[t];
    if !(scratch.iter().sum::<f64>() > 0.0) {
        log_factor = hmm.log_domain_backward(em.x[t], beta, scratch);
    }
    for (s, dst) in next.iter_mut().enumerate() {
        *dst = scratch[s % tail];
    }
    Ok(normalize(next, t - 1)?.ln() + log_factor)
}

pub fn forward(hmm: &Hmm, x: &[f64]) -> Result<Scaled> {
    if x.is_empty() {
        return Err(Error::EmptyStream("forward needs at least one observation"));
    }
    forward_pass(hmm, &emissions(hmm, x))
}

pub fn backward(hmm: &Hmm, x: &[f64]) -> Result<Scaled> {
    if x.is_empty() {
        return Err(Error::EmptyStream("backward needs at least one observation"));
    }
    let em = emissions(hmm, x);
    let steps = x.len();
    let n = hmm.state_count();
    let mut beta = Array2::zeros((steps, n));
    let mut log_scales = vec![0.0; steps];
    beta.row_mut(steps - 1).fill(1.0 / n as f64);
    log_scales[steps - 1] = (n as f64).ln();
    let mut scratch = vec![0.0; hmm.tail_states];
    for t in (1..steps).rev() {
        let (mut prev, cur) = beta.multi_slice_mut((ndarray::s![t - 1, ..], ndarray::s![t, ..]));
        log_scales[t - 1] = backward_step(
            hmm,
            &em,
            t,
            cur.as_slice().unwrap(),
            prev.as_slice_mut().unwrap(),
            &mut scratch,
        )?;
    }
    Ok(Scaled {
        values: beta,
        log_scales,
    })
}

pub fn state_posteriors(hmm: &Hmm, x: &[f64]) -> Result<Posteriors> {
    let alpha = forward(hmm, x)?;
    let beta = backward(hmm, x)?;
    let mut gamma = alpha.values * &beta.values;
    for (t, mut row) in gamma.rows_mut().into_iter().enumerate() {
        normalize(row.as_slice_mut().unwrap(), t)?;
    }
    Ok(Posteriors {
        gamma,
        forward_log_scales: alpha.log_scales,
    })
}

/// Per-position symbol posteriors (`T × M`): state posteriors marginalized
/// onto the newest-symbol coordinate.
pub fn posterior_symbols(hmm: &Hmm, x: &[f64]) -> Result<Array2<f64>> {
    if x.is_empty() {
        return Err(Error::EmptyStream("posterior needs at least one observation"));
    }
    let em = emissions(hmm, x);
    let alpha = forward_pass(hmm, &em)?;
    let steps = x.len();
    let n = hmm.state_count();
    let m = hmm.modulation.order();
    let mut out = Array2::zeros((steps, m));
    let mut beta = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    let mut scratch = vec![0.0; hmm.tail_states];

    for t in (0..steps).rev() {
        if t + 1 < steps {
            backward_step(hmm, &em, t + 1, &beta, &mut next, &mut scratch)?;
            std::mem::swap(&mut beta, &mut next);
        }
        let a = alpha.values.row(t);
        let mut row = out.row_mut(t);
        for (s, (&av, &bv)) in a.iter().zip(&beta).enumerate() {
            row[s % m] += av * bv;
        }
        if row.sum() == 0.0 && a.iter().chain(&beta).all(|v| v.is_finite()) {
            // past and future evidence disagree completely, which only
            // happens where the stream violates the model (a cold start);
            // fall back to the future evidence alone
            for (s, &bv) in beta.iter().enumerate() {
                row[s % m] += bv;
            }
        }
        normalize(row.as_slice_mut().unwrap(), t)?;
    }
    Ok(out)
}

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in row.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

pub fn default_overlap(channel: &Channel) -> usize {
    (4 * channel.len()).max(16)
}

/// MAP symbol decisions over a long stream, computed in overlapping blocks.
/// Each block contributes only its interior `block - 2·overlap` decisions
/// (plus the stream edges for the first and last block).
pub fn fb_decode(hmm: &Hmm, x: &[f64], block: usize, overlap: usize) -> Result<Vec<usize>> {
    if block <= 2 * overlap {
        return Err(invalid(format!(
            "block {block} must exceed twice the overlap {overlap}"
        )));
    }
    if overlap < hmm.channel.len() {
        return Err(invalid(format!(
            "overlap {overlap} must cover the channel length {}",
            hmm.channel.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::EmptyStream("nothing to decode"));
    }
    let decide = |post: &Array2<f64>| -> Vec<usize> {
        post.rows().into_iter().map(|r| argmax(r.iter().copied())).collect()
    };
    if x.len() <= block {
        return Ok(decide(&posterior_symbols(hmm, x)?));
    }
    let stride = block - 2 * overlap;
    let n = x.len();
    let blocks = n.div_ceil(stride);
    let parts = (0..blocks)
        .into_par_iter()
        .map(|i| {
            let keep_start = i * stride;
            let keep_end = ((i + 1) * stride).min(n);
            let lo = keep_start.saturating_sub(overlap);
            let hi = (keep_end + overlap).min(n);
            let post = posterior_symbols(hmm, &x[lo..hi])?;
            Ok(decide(&post)[keep_start - lo..keep_end - lo].to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}
