//! Streaming single-pass training with Adam.
//!
//! Every batch is generated afresh from its own keyed stream, so no window
//! is ever seen twice and a run can be interrupted after any batch and
//! resumed bit-exactly from a [`TrainState`].

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::ber::{count_errors, NetEqualizer};
use crate::error::{invalid, Error, Result};
use crate::neural::{Network, Tensor};
use crate::rng::{derive_seed, Domain, Part, StreamKey};
use crate::signal::{generate_block, label_offset, sigma_for_snr, Channel, Modulation};

/// Clamped cross-entropy of one probability vector.
pub fn ce_loss(probabilities: &[f64], label: usize) -> Result<f64> {
    let p = probabilities.get(label).ok_or_else(|| {
        invalid(format!("label {label} out of range for {} classes", probabilities.len()))
    })?;
    Ok(-clamp_probability(*p).ln())
}

/// Lower clamp keeping NaN visible, unlike `f64::max`.
pub(crate) fn clamp_probability(p: f64) -> f64 {
    if p < 1e-30 {
        1e-30
    } else {
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self { config, m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    /// One bias-corrected update. Masked entries are left at zero and their
    /// moments untouched.
    pub fn update(
        &mut self,
        params: &mut [f64],
        mask: &[bool],
        grads: &[f64],
        lr: f64,
        tensors: &[Tensor],
    ) -> Result<()> {
        if let Some(i) = grads.iter().zip(mask).position(|(g, &m)| m && !g.is_finite()) {
            let tensor = tensors
                .iter()
                .find(|t| t.range().contains(&i))
                .map_or_else(|| format!("parameter {i}"), |t| t.name.clone());
            return Err(Error::NonFiniteGradient { tensor });
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            if !mask[i] {
                params[i] = 0.0;
                continue;
            }
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub train_symbols: usize,
    pub valid_symbols: usize,
    pub test_symbols: usize,
    pub snr_db: f64,
    pub seed: u64,
    /// Batches between validation passes.
    pub validate_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8192,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            train_symbols: 20_000_000,
            valid_symbols: 2_000_000,
            test_symbols: 10_000_000,
            snr_db: 14.0,
            seed: 1,
            validate_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if self.train_symbols < self.batch_size {
            return Err(invalid(format!(
                "training budget {} is below one batch of {}",
                self.train_symbols, self.batch_size
            )));
        }
        if self.valid_symbols < 1000 {
            return Err(invalid("validation budget must be at least 1000 symbols"));
        }
        if self.validate_every == 0 {
            return Err(invalid("validation interval must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.snr_db.is_finite() {
            return Err(invalid("learning rate must be positive and SNR finite"));
        }
        Ok(())
    }

    pub fn batches(&self) -> u64 {
        (self.train_symbols / self.batch_size) as u64
    }

    /// Seed of the held-out validation stream.
    pub fn valid_seed(&self) -> u64 {
        derive_seed(self.seed, 0x76_616c_6964)
    }

    /// Seed of the test stream, disjoint from training and validation.
    pub fn test_seed(&self) -> u64 {
        derive_seed(self.seed, 0x7465_7374)
    }
}

/// Where a run draws its batches from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataPlan {
    pub domain: Domain,
    pub first_batch: u64,
    pub batches: u64,
}

/// Generates windows and labels for batch `index` of `domain`.
#[allow(clippy::too_many_arguments)]
pub fn training_batch(
    net: &dyn Network,
    channel: &Channel,
    modulation: &Modulation,
    sigma: f64,
    batch_size: usize,
    seed: u64,
    domain: Domain,
    index: u64,
) -> Result<(Array2<f64>, Vec<usize>)> {
    let t = net.window();
    // leading symbols let the channel memory fill before the first window
    let warm = channel.len();
    let len = warm + batch_size + t - 1;
    let key = StreamKey::block(seed, domain, index, Part::Symbols);
    let (z, x) = generate_block(channel, modulation, sigma, len, key)?;
    let offset = label_offset(net.target(), channel.pre_cursors());
    let windows = Array2::from_shape_fn((batch_size, t), |(k, i)| x.samples[warm + k + i]);
    let labels = (0..batch_size)
        .map(|k| z.indices[((warm + k) as isize + offset) as usize])
        .collect::<Vec<_>>();
    Ok((windows, labels))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TracePoint {
    pub step: u64,
    pub loss: f64,
    pub valid_ber: Option<f64>,
}

/// Everything needed to continue a run after an interruption.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub next_batch: u64,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub adam: Adam,
    pub best_values: Vec<f64>,
    pub best_ber: f64,
    pub best_step: u64,
    pub trace: Vec<TracePoint>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<N> {
    /// Network at the best validation BER.
    pub net: N,
    pub best_ber: f64,
    pub best_step: u64,
    pub trace: Vec<TracePoint>,
}

pub enum TrainRun<N> {
    Finished(TrainOutcome<N>),
    /// Stopped early on request; resume from the state.
    Interrupted(Box<TrainState>),
}

#[derive(Default)]
pub struct TrainOptions {
    pub resume: Option<TrainState>,
    /// Stop after this many batches of the current invocation.
    pub stop_after: Option<u64>,
}

/// Trains `net` from scratch over the full budget.
pub fn train<N: Network + Clone>(
    net: N,
    cfg: &TrainConfig,
    channel: &Channel,
    modulation: &Modulation,
) -> Result<TrainOutcome<N>> {
    match train_with(net, cfg, channel, modulation, TrainOptions::default())? {
        TrainRun::Finished(o) => Ok(o),
        TrainRun::Interrupted(_) => unreachable!("no stop requested"),
    }
}

/// Validation BER of `net` on the held-out stream of `cfg`.
pub fn validation_ber(
    net: &dyn Network,
    cfg: &TrainConfig,
    channel: &Channel,
    modulation: &Modulation,
) -> Result<f64> {
    let sigma = sigma_for_snr(channel, modulation, cfg.snr_db);
    let eq = NetEqualizer { net, modulation: modulation.clone(), pre: channel.pre_cursors() };
    let (e, b) = count_errors(&eq, channel, modulation, sigma, cfg.valid_symbols, cfg.valid_seed())?;
    Ok(e as f64 / b as f64)
}

pub fn train_with<N: Network + Clone>(
    mut net: N,
    cfg: &TrainConfig,
    channel: &Channel,
    modulation: &Modulation,
    options: TrainOptions,
) -> Result<TrainRun<N>> {
    cfg.validate()?;
    if net.classes() != modulation.order() {
        return Err(invalid("network output size does not match the modulation"));
    }
    let plan = DataPlan { domain: Domain::Train, first_batch: 0, batches: cfg.batches() };
    let mut state = match options.resume {
        Some(s) => {
            if s.values.len() != net.values().len() {
                return Err(invalid("resume state does not match the network"));
            }
            net.values_mut().copy_from_slice(&s.values);
            net.mask_mut().copy_from_slice(&s.mask);
            s
        }
        None => TrainState {
            next_batch: 0,
            values: Vec::new(),
            mask: Vec::new(),
            adam: Adam::new(net.values().len(), cfg.adam),
            best_values: net.values().to_vec(),
            best_ber: f64::INFINITY,
            best_step: 0,
            trace: Vec::new(),
        },
    };
    let sigma = sigma_for_snr(channel, modulation, cfg.snr_db);
    let mut done_here = 0;
    while state.next_batch < plan.batches {
        if options.stop_after.is_some_and(|s| done_here >= s) {
            state.values = net.values().to_vec();
            state.mask = net.mask().to_vec();
            return Ok(TrainRun::Interrupted(Box::new(state)));
        }
        let step = state.next_batch + 1;
        let loss = sgd_step(&mut net, &mut state.adam, cfg, channel, modulation, sigma, plan.domain, plan.first_batch + state.next_batch)?;
        let mut point = TracePoint { step, loss, valid_ber: None };
        if step % cfg.validate_every == 0 || step == plan.batches {
            let ber = validation_ber(&net, cfg, channel, modulation)?;
            log::info!("step {step}: loss {loss:.5}, validation BER {ber:.3e}");
            point.valid_ber = Some(ber);
            if ber < state.best_ber {
                state.best_ber = ber;
                state.best_step = step;
                state.best_values = net.values().to_vec();
            }
        }
        state.trace.push(point);
        state.next_batch += 1;
        done_here += 1;
    }
    net.values_mut().copy_from_slice(&state.best_values);
    Ok(TrainRun::Finished(TrainOutcome {
        net,
        best_ber: state.best_ber,
        best_step: state.best_step,
        trace: state.trace,
    }))
}

/// One optimizer step on a freshly generated batch; returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn sgd_step<N: Network>(
    net: &mut N,
    adam: &mut Adam,
    cfg: &TrainConfig,
    channel: &Channel,
    modulation: &Modulation,
    sigma: f64,
    domain: Domain,
    index: u64,
) -> Result<f64> {
    let (x, labels) = training_batch(net, channel, modulation, sigma, cfg.batch_size, cfg.seed, domain, index)?;
    let (loss, grad) = net.loss_grad(x.view(), &labels);
    if !loss.is_finite() {
        return Err(Error::Diverged { step: adam.step as usize + 1, loss, last_good: net.values().to_vec() });
    }
    let tensors = net.tensors().to_vec();
    let mask = net.mask().to_vec();
    adam.update(net.values_mut(), &mask, &grad, cfg.learning_rate, &tensors)?;
    Ok(loss)
}

/// Continues training `net` for a fixed number of batches from `domain`,
/// without validation. Used for fine-tuning between pruning rounds.
pub fn finetune<N: Network>(
    net: &mut N,
    cfg: &TrainConfig,
    channel: &Channel,
    modulation: &Modulation,
    plan: DataPlan,
) -> Result<Vec<f64>> {
    let sigma = sigma_for_snr(channel, modulation, cfg.snr_db);
    let mut adam = Adam::new(net.values().len(), cfg.adam);
    (0..plan.batches)
        .map(|b| sgd_step(net, &mut adam, cfg, channel, modulation, sigma, plan.domain, plan.first_batch + b))
        .collect()
}

pub fn write_trace_csv(path: &Path, trace: &[TracePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss", "valid_ber"])?;
    for p in trace {
        let ber = p.valid_ber.map(|b| b.to_string()).unwrap_or_default();
        w.write_record([p.step.to_string(), p.loss.to_string(), ber])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean of each consecutive `width`-batch block of the loss trace.
pub fn block_means(trace: &[TracePoint], width: usize) -> Vec<f64> {
    trace
        .chunks_exact(width.max(1))
        .map(|c| c.iter().map(|p| p.loss).sum::<f64>() / c.len() as f64)
        .collect()
}

const STATE_MAGIC: &[u8; 4] = b"NEQS";

impl TrainState {
    /// Binary form: magic, counters, then length-prefixed little-endian
    /// vectors and the trace.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = STATE_MAGIC.to_vec();
        for v in [self.next_batch, self.adam.step, self.best_step, self.trace.len() as u64] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.best_ber.to_le_bytes());
        let c = self.adam.config;
        for v in [c.beta1, c.beta2, c.epsilon] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for vec in [&self.values, &self.adam.m, &self.adam.v, &self.best_values] {
            put_f64s(&mut out, vec);
        }
        put_f64s(&mut out, &self.mask.iter().map(|&m| f64::from(u8::from(m))).collect::<Vec<_>>());
        for p in &self.trace {
            out.extend_from_slice(&p.step.to_le_bytes());
            out.extend_from_slice(&p.loss.to_le_bytes());
            out.extend_from_slice(&p.valid_ber.unwrap_or(f64::NAN).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != STATE_MAGIC {
            return Err(Error::Checkpoint("missing NEQS header".into()));
        }
        let next_batch = r.u64()?;
        let step = r.u64()?;
        let best_step = r.u64()?;
        let trace_len = r.u64()? as usize;
        let best_ber = r.f64()?;
        let config = AdamConfig { beta1: r.f64()?, beta2: r.f64()?, epsilon: r.f64()? };
        let values = r.f64s()?;
        let m = r.f64s()?;
        let v = r.f64s()?;
        let best_values = r.f64s()?;
        let mask = r.f64s()?.into_iter().map(|b| b != 0.0).collect();
        let mut trace = Vec::with_capacity(trace_len.min(1 << 24));
        for _ in 0..trace_len {
            let step = r.u64()?;
            let loss = r.f64()?;
            let ber = r.f64()?;
            trace.push(TracePoint { step, loss, valid_ber: (!ber.is_nan()).then_some(ber) });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes in training state".into()));
        }
        Ok(Self {
            next_batch,
            values,
            mask,
            adam: Adam { config, m, v, step },
            best_values,
            best_ber,
            best_step,
            trace,
        })
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
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated training state".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > self.bytes.len() / 8 {
            return Err(Error::Checkpoint("implausible vector length".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}
