//! Signal model: PAM modulation, ISI channel, AWGN and training windows.
//!
//! Symbols are carried as level indices in `[0, order)`. Amplitudes come from
//! [`Modulation::levels`], bits from the Gray map over ascending levels.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::rng::StreamKey;

/// PAM constellation with equally spaced levels in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Modulation {
    order: usize,
    levels: Vec<f64>,
}

impl Modulation {
    pub fn pam2() -> Self {
        Self {
            order: 2,
            levels: vec![-1.0, 1.0],
        }
    }

    pub fn pam4() -> Self {
        Self {
            order: 4,
            levels: vec![-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0],
        }
    }

    pub fn from_order(order: usize) -> Result<Self> {
        match order {
            2 => Ok(Self::pam2()),
            4 => Ok(Self::pam4()),
            _ => Err(invalid(format!("unsupported modulation order {order}"))),
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    #[inline]
    pub fn level(&self, index: usize) -> f64 {
        self.levels[index]
    }

    pub fn bits_per_symbol(&self) -> u32 {
        self.order.trailing_zeros()
    }

    /// E[level²] under uniform symbols.
    pub fn mean_power(&self) -> f64 {
        self.levels.iter().map(|l| l * l).sum::<f64>() / self.order as f64
    }

    /// Gray-coded bit pattern of a level index.
    #[inline]
    pub fn gray(&self, index: usize) -> u32 {
        let i = index as u32;
        i ^ (i >> 1)
    }

    /// Nearest-level slicer; ties go to the lower index.
    #[inline]
    pub fn slice(&self, value: f64) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, &l) in self.levels.iter().enumerate() {
            let d = (value - l).abs();
            if d < best_dist {
                best = i;
                best_dist = d;
            }
        }
        best
    }

    pub fn name(&self) -> &'static str {
        match self.order {
            2 => "pam2",
            _ => "pam4",
        }
    }
}

impl std::str::FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pam2" | "2" => Ok(Self::pam2()),
            "pam4" | "4" => Ok(Self::pam4()),
            other => Err(invalid(format!("unknown modulation '{other}'"))),
        }
    }
}

/// Discrete-time channel impulse response.
///
/// `taps` are in time order; the main cursor sits at index `pre_cursors`.
#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    taps: Vec<f64>,
    pre_cursors: usize,
}

impl Channel {
    pub fn new(taps: Vec<f64>, pre_cursors: usize) -> Result<Self> {
        if taps.is_empty() {
            return Err(invalid("channel needs at least one tap"));
        }
        if pre_cursors >= taps.len() {
            return Err(invalid(format!(
                "pre-cursor count {pre_cursors} must be below the tap count {}",
                taps.len()
            )));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(invalid("channel taps must be finite"));
        }
        let main = taps[pre_cursors].abs();
        if taps.iter().any(|t| t.abs() > main) {
            log::warn!("main cursor (index {pre_cursors}) is not the largest tap");
        }
        Ok(Self { taps, pre_cursors })
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn pre_cursors(&self) -> usize {
        self.pre_cursors
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn main_cursor(&self) -> f64 {
        self.taps[self.pre_cursors]
    }

    pub fn tap_power(&self) -> f64 {
        self.taps.iter().map(|t| t * t).sum()
    }

    pub fn max_abs_tap(&self) -> f64 {
        self.taps.iter().fold(0.0, |m, t| m.max(t.abs()))
    }

    /// Parses the text channel format: first data line is the pre-cursor
    /// count, every following data line one tap. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .enumerate()
            .filter(|(_, l)| !l.is_empty());
        let (_, head) = lines
            .next()
            .ok_or_else(|| Error::ChannelFormat("missing pre-cursor count".into()))?;
        let pre_cursors = head
            .parse::<usize>()
            .map_err(|_| Error::ChannelFormat(format!("bad pre-cursor count '{head}'")))?;
        let taps = lines
            .map(|(n, l)| {
                l.parse::<f64>()
                    .map_err(|_| Error::ChannelFormat(format!("line {}: bad tap '{l}'", n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(taps, pre_cursors).map_err(|e| Error::ChannelFormat(e.to_string()))
    }

    /// Text form with taps at 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.pre_cursors);
        for t in &self.taps {
            let _ = writeln!(out, "{t:.16e}");
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::ChannelFormat(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

impl Channel {
    /// Attenuation at half the symbol rate relative to DC, in dB.
    pub fn nyquist_loss_db(&self) -> f64 {
        let dc: f64 = self.taps.iter().sum();
        let nyquist: f64 = self
            .taps
            .iter()
            .enumerate()
            .map(|(k, t)| if k % 2 == 0 { *t } else { -t })
            .sum();
        20.0 * (dc.abs() / nyquist.abs()).log10()
    }

    /// Synthetic lossy channel with `n_taps` taps, `pre_cursors` of them
    /// ahead of the main cursor. Post-cursors decay as `r^k` and pre-cursors
    /// as `r^j / 4`; `r` is solved so the Nyquist loss equals `loss_db`.
    /// Taps are scaled to unit DC gain.
    pub fn synthesize(loss_db: f64, n_taps: usize, pre_cursors: usize) -> Result<Self> {
        if !(loss_db > 0.0 && loss_db.is_finite()) {
            return Err(invalid(format!("loss must be a positive number of dB, got {loss_db}")));
        }
        if n_taps < 2 || pre_cursors >= n_taps {
            return Err(invalid(format!(
                "need at least 2 taps and fewer pre-cursors than taps, got {n_taps} taps and {pre_cursors} pre-cursors"
            )));
        }
        let profile = |r: f64| {
            let taps: Vec<f64> = (0..n_taps)
                .map(|i| {
                    if i < pre_cursors {
                        0.25 * r.powi((pre_cursors - i) as i32)
                    } else {
                        r.powi((i - pre_cursors) as i32)
                    }
                })
                .collect();
            let dc: f64 = taps.iter().sum();
            Self { taps: taps.into_iter().map(|t| t / dc).collect(), pre_cursors }
        };
        let loss = |r: f64| profile(r).nyquist_loss_db();
        const GRID: usize = 2000;
        let mut lo = 0.0;
        let mut best = 0.0f64;
        let mut hi = None;
        for i in 1..GRID {
            let r = i as f64 / GRID as f64;
            let l = loss(r);
            if l >= loss_db {
                hi = Some(r);
                break;
            }
            best = best.max(l);
            lo = r;
        }
        let Some(mut hi) = hi else {
            return Err(invalid(format!(
                "a {n_taps}-tap profile reaches at most {best:.2} dB of Nyquist loss, below the requested {loss_db} dB"
            )));
        };
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if loss(mid) >= loss_db {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(profile(hi))
    }
}

/// Transmitted level indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolStream {
    pub indices: Vec<usize>,
    pub key: StreamKey,
}

impl SymbolStream {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Noisy channel output.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedStream {
    pub samples: Vec<f64>,
    pub sigma: f64,
}

/// Draws `count` i.i.d. uniform level indices.
pub fn random_symbols(
    count: usize,
    modulation: &Modulation,
    key: impl Into<StreamKey>,
) -> Result<SymbolStream> {
    if count == 0 {
        return Err(Error::EmptyStream("symbol count must be at least 1"));
    }
    let key = key.into();
    let mut rng = key.rng();
    let order = modulation.order();
    let indices = (0..count).map(|_| rng.random_range(0..order)).collect();
    Ok(SymbolStream { indices, key })
}

/// Same-length convolution with a cold start: symbols before the stream are
/// zero amplitude.
pub fn apply_channel(z: &[usize], modulation: &Modulation, channel: &Channel) -> Vec<f64> {
    let amps: Vec<f64> = z.iter().map(|&i| modulation.level(i)).collect();
    convolve_same(&amps, channel.taps())
}

pub(crate) fn convolve_same(amps: &[f64], taps: &[f64]) -> Vec<f64> {
    (0..amps.len())
        .map(|t| {
            taps.iter()
                .enumerate()
                .take(t + 1)
                .map(|(i, h)| h * amps[t - i])
                .sum()
        })
        .collect()
}

/// Noise standard deviation giving `snr_db` of received-signal power over
/// noise power.
pub fn sigma_for_snr(channel: &Channel, modulation: &Modulation, snr_db: f64) -> f64 {
    let rx_power = channel.tap_power() * modulation.mean_power();
    (rx_power / 10f64.powf(snr_db / 10.0)).sqrt()
}

pub fn add_awgn(signal: &[f64], sigma: f64, key: impl Into<StreamKey>) -> Result<ObservedStream> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("noise sigma must be finite and >= 0, got {sigma}")));
    }
    let mut rng = key.into().rng();
    let samples = if sigma == 0.0 {
        signal.to_vec()
    } else {
        signal
            .iter()
            .map(|&s| {
                let n: f64 = rng.sample(StandardNormal);
                s + sigma * n
            })
            .collect()
    };
    Ok(ObservedStream { samples, sigma })
}

/// Gray-coded bit errors between two index sequences.
pub fn bit_errors(truth: &[usize], decisions: &[usize], modulation: &Modulation) -> Result<(u64, u64)> {
    if truth.len() != decisions.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            got: decisions.len(),
        });
    }
    let errors = truth
        .iter()
        .zip(decisions)
        .map(|(&a, &b)| (modulation.gray(a) ^ modulation.gray(b)).count_ones() as u64)
        .sum();
    Ok((errors, truth.len() as u64 * modulation.bits_per_symbol() as u64))
}

/// Generates `len` symbols and their noisy channel output. Symbols and noise
/// use the [`Part::Symbols`](crate::rng::Part) and `Part::Noise` sub-streams
/// of `key`.
pub fn generate_block(
    channel: &Channel,
    modulation: &Modulation,
    sigma: f64,
    len: usize,
    key: StreamKey,
) -> Result<(SymbolStream, ObservedStream)> {
    use crate::rng::Part;
    let z = random_symbols(len, modulation, key.with_part(Part::Symbols))?;
    let clean = apply_channel(&z.indices, modulation, channel);
    let x = add_awgn(&clean, sigma, key.with_part(Part::Noise))?;
    Ok((z, x))
}

/// Sliding windows over an observed stream with their target labels.
///
/// Window `k` covers `x[k..k+T]` and is labelled with `z[k + D - 1 - pre]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Windows {
    pub window_len: usize,
    /// Row-major `count × window_len`.
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    /// Start index (into `x`) of the first kept window.
    pub first_start: usize,
}

impl Windows {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.inputs
            .chunks_exact(self.window_len)
            .zip(self.labels.iter().copied())
    }
}

/// Offset from a window start to the index of the symbol it decides.
/// Negative when pre-cursors outnumber the leading window positions.
pub fn label_offset(target: usize, pre_cursors: usize) -> isize {
    target as isize - 1 - pre_cursors as isize
}

pub fn make_windows(
    x: &[f64],
    z: &[usize],
    window_len: usize,
    target: usize,
    pre_cursors: usize,
) -> Result<Windows> {
    if window_len == 0 || target == 0 || target > window_len {
        return Err(invalid(format!(
            "window needs 1 <= D <= T, got T={window_len}, D={target}"
        )));
    }
    let offset = label_offset(target, pre_cursors);
    let mut out = Windows {
        window_len,
        inputs: Vec::new(),
        labels: Vec::new(),
        first_start: 0,
    };
    if x.len() < window_len {
        return Ok(out);
    }
    let mut first = None;
    for k in 0..=x.len() - window_len {
        let label = k as isize + offset;
        if label < 0 || label as usize >= z.len() {
            continue;
        }
        first.get_or_insert(k);
        out.inputs.extend_from_slice(&x[k..k + window_len]);
        out.labels.push(z[label as usize]);
    }
    out.first_start = first.unwrap_or(0);
    Ok(out)
}
