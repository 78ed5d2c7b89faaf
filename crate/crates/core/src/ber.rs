//! Monte-Carlo bit error rate measurement.
//!
//! A measurement is split into shards of [`SHARD_SYMBOLS`] counted symbols.
//! Each shard draws its own keyed stream padded by a margin on both sides,
//! so cold-start and window-edge symbols never enter the counts and shards
//! can be evaluated in any order.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::hmm::{fb_decode, Hmm};
use crate::linear::{dfe_run, ffe_decide, DfeConfig, FfeTaps};
use crate::neural::Network;
use crate::rng::{Domain, Part, StreamKey};
use crate::signal::{bit_errors, generate_block, sigma_for_snr, Channel, Modulation};

pub const SHARD_SYMBOLS: usize = 65_536;

/// Two-sided 95% standard normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// A symbol detector working on a whole received stream.
pub trait Equalizer: Sync {
    fn id(&self) -> String;
    /// Symbols at either end of a stream whose decisions are unreliable.
    fn edge(&self) -> usize;
    /// One decision per transmitted symbol, same length as `x`.
    fn detect(&self, x: &[f64]) -> Result<Vec<usize>>;
}

/// Shifts sample-indexed decisions so index `t` refers to symbol `t`.
fn align(mut decisions: Vec<usize>, pre: usize) -> Vec<usize> {
    let n = decisions.len();
    if pre > 0 && n > 0 {
        decisions.drain(..pre.min(n));
        let last = decisions.last().copied().unwrap_or(0);
        decisions.resize(n, last);
    }
    decisions
}

/// Nearest-level decision on the main-cursor sample.
pub struct Slicer {
    pub modulation: Modulation,
    pub pre: usize,
}

impl Equalizer for Slicer {
    fn id(&self) -> String {
        "slicer".into()
    }

    fn edge(&self) -> usize {
        self.pre
    }

    fn detect(&self, x: &[f64]) -> Result<Vec<usize>> {
        Ok(align(x.iter().map(|&v| self.modulation.slice(v)).collect(), self.pre))
    }
}

pub struct Ffe {
    pub taps: FfeTaps,
    pub modulation: Modulation,
    pub pre: usize,
}

impl Equalizer for Ffe {
    fn id(&self) -> String {
        format!("ffe{}", self.taps.taps.len())
    }

    fn edge(&self) -> usize {
        self.taps.taps.len() + self.pre
    }

    fn detect(&self, x: &[f64]) -> Result<Vec<usize>> {
        Ok(align(ffe_decide(&self.taps, x, &self.modulation), self.pre))
    }
}

pub struct Dfe {
    pub config: DfeConfig,
    pub modulation: Modulation,
    pub pre: usize,
}

impl Equalizer for Dfe {
    fn id(&self) -> String {
        format!("dfe{}-{}", self.config.ff.taps.len(), self.config.fb.len())
    }

    fn edge(&self) -> usize {
        self.config.ff.taps.len() + self.config.fb.len() + self.pre
    }

    fn detect(&self, x: &[f64]) -> Result<Vec<usize>> {
        Ok(align(dfe_run(&self.config, x, &self.modulation), self.pre))
    }
}

/// Block forward-backward MAP detection.
pub struct ForwardBackward {
    pub hmm: Hmm,
    pub block: usize,
    pub overlap: usize,
}

impl ForwardBackward {
    pub fn new(hmm: Hmm) -> Self {
        let overlap = crate::hmm::default_overlap(hmm.channel());
        Self { hmm, block: 4096.max(8 * overlap), overlap }
    }
}

impl Equalizer for ForwardBackward {
    fn id(&self) -> String {
        "fb".into()
    }

    fn edge(&self) -> usize {
        self.hmm.channel().len()
    }

    fn detect(&self, x: &[f64]) -> Result<Vec<usize>> {
        fb_decode(&self.hmm, x, self.block, self.overlap)
    }
}

/// Adapter running a trained network over a stream.
pub struct NetEqualizer<'a> {
    pub net: &'a dyn Network,
    pub modulation: Modulation,
    pub pre: usize,
}

impl Equalizer for NetEqualizer<'_> {
    fn id(&self) -> String {
        self.net.kind().into()
    }

    fn edge(&self) -> usize {
        self.net.window() + self.pre
    }

    fn detect(&self, x: &[f64]) -> Result<Vec<usize>> {
        self.net.predict_stream(x, self.pre, &self.modulation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BerPoint {
    pub snr_db: f64,
    pub equalizer: String,
    pub bit_errors: u64,
    pub total_bits: u64,
    pub ber: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub seed: u64,
}

impl BerPoint {
    pub fn new(snr_db: f64, equalizer: String, bit_errors: u64, total_bits: u64, seed: u64) -> Self {
        let (ci_low, ci_high) = wilson_interval(bit_errors, total_bits);
        let ber = if total_bits == 0 { 0.0 } else { bit_errors as f64 / total_bits as f64 };
        Self { snr_db, equalizer, bit_errors, total_bits, ber, ci_low, ci_high, seed }
    }

    /// True when the two 95% intervals are disjoint and `self` is lower.
    pub fn clearly_below(&self, other: &BerPoint) -> bool {
        self.ci_high < other.ci_low
    }
}

/// Wilson score interval at 95% confidence.
pub fn wilson_interval(errors: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = errors as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let low = if errors == 0 { 0.0 } else { (center - half).max(0.0) };
    (low, (center + half).min(1.0))
}

/// Counted-symbol sizes of the shards making up `n_symbols`.
pub fn shard_sizes(n_symbols: usize) -> Vec<usize> {
    let mut sizes = vec![SHARD_SYMBOLS; n_symbols / SHARD_SYMBOLS];
    if !n_symbols.is_multiple_of(SHARD_SYMBOLS) {
        sizes.push(n_symbols % SHARD_SYMBOLS);
    }
    sizes
}

/// Bit errors of one shard: `(errors, bits)`.
pub fn evaluate_shard(
    eq: &dyn Equalizer,
    channel: &Channel,
    modulation: &Modulation,
    sigma: f64,
    counted: usize,
    key: StreamKey,
) -> Result<(u64, u64)> {
    let margin = eq.edge().max(channel.len());
    let (z, x) = generate_block(channel, modulation, sigma, counted + 2 * margin, key)?;
    let decisions = eq.detect(&x.samples)?;
    let range = margin..margin + counted;
    bit_errors(&z.indices[range.clone()], &decisions[range], modulation)
}

/// Measures the bit error rate of `eq` over `n_symbols` counted symbols.
pub fn evaluate_ber(
    eq: &dyn Equalizer,
    channel: &Channel,
    modulation: &Modulation,
    snr_db: f64,
    n_symbols: usize,
    seed: u64,
) -> Result<BerPoint> {
    let sigma = sigma_for_snr(channel, modulation, snr_db);
    let (errors, bits) = count_errors(eq, channel, modulation, sigma, n_symbols, seed)?;
    Ok(BerPoint::new(snr_db, eq.id(), errors, bits, seed))
}

/// As [`evaluate_ber`] with the noise level given directly.
pub fn count_errors(
    eq: &dyn Equalizer,
    channel: &Channel,
    modulation: &Modulation,
    sigma: f64,
    n_symbols: usize,
    seed: u64,
) -> Result<(u64, u64)> {
    if n_symbols < 1000 {
        return Err(invalid(format!("need at least 1000 symbols, got {n_symbols}")));
    }
    let parts: Vec<Result<(u64, u64)>> = shard_sizes(n_symbols)
        .into_par_iter()
        .enumerate()
        .map(|(i, counted)| {
            let key = StreamKey::block(seed, Domain::Eval, i as u64, Part::Symbols);
            evaluate_shard(eq, channel, modulation, sigma, counted, key)
        })
        .collect();
    let mut total = (0, 0);
    for p in parts {
        let (e, b) = p?;
        total.0 += e;
        total.1 += b;
    }
    Ok(total)
}

pub fn write_ber_csv(path: &Path, points: &[BerPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ber_csv_to(out: impl Write, points: &[BerPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ber_csv(path: &Path) -> Result<Vec<BerPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
