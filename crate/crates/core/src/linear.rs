//! Classical baselines: MMSE feed-forward equalizer, decision feedback
//! equalizer and the nearest-level slicer.
//!
//! FFE output is aligned to the received samples: `y[t] = Σ_k w[k]·x[t + cursor - k]`
//! is the decision statistic for whatever symbol has its main cursor at
//! sample `t`. Callers shift by the channel's pre-cursor count to get
//! symbol-indexed decisions.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::signal::{Channel, Modulation};

#[derive(Clone, Debug, PartialEq)]
pub struct FfeTaps {
    pub taps: Vec<f64>,
    pub cursor: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DfeConfig {
    pub ff: FfeTaps,
    /// Weights applied to the previous `fb.len()` decisions, newest first.
    pub fb: Vec<f64>,
}

/// Default FFE cursor: two taps of anticausal reach beyond the pre-cursors.
pub fn default_cursor(channel: &Channel, n_taps: usize) -> usize {
    (channel.pre_cursors() + 2).min(n_taps.saturating_sub(1))
}

pub fn design_mmse_ffe(
    channel: &Channel,
    modulation: &Modulation,
    sigma: f64,
    n_taps: usize,
    cursor: usize,
) -> Result<FfeTaps> {
    let (ff, _) = design(channel, modulation, sigma, n_taps, cursor, 0)?;
    Ok(ff)
}

/// FFE+DFE design. The FFE is MMSE-optimal given that the first `n_fb`
/// post-cursors of the equalized pulse are cancelled by feedback, and the
/// feedback taps are those residual post-cursors.
pub fn design_ffe_dfe(
    channel: &Channel,
    modulation: &Modulation,
    sigma: f64,
    n_ff: usize,
    n_fb: usize,
) -> Result<DfeConfig> {
    let cursor = default_cursor(channel, n_ff);
    let (ff, fb) = design(channel, modulation, sigma, n_ff, cursor, n_fb)?;
    Ok(DfeConfig { ff, fb })
}

fn design(
    channel: &Channel,
    modulation: &Modulation,
    sigma: f64,
    n_taps: usize,
    cursor: usize,
    n_fb: usize,
) -> Result<(FfeTaps, Vec<f64>)> {
    if n_taps == 0 {
        return Err(invalid("FFE needs at least one tap"));
    }
    if cursor >= n_taps {
        return Err(invalid(format!("cursor {cursor} out of range for {n_taps} taps")));
    }
    if !(sigma >= 0.0) {
        return Err(invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    let h = channel.taps();
    let combined = n_taps + h.len() - 1;
    let target = cursor + channel.pre_cursors();
    // column j of the convolution matrix: how symbol at combined offset j
    // reaches FFE input k
    let col = |j: usize| DVector::from_fn(n_taps, |k, _| {
        j.checked_sub(k).and_then(|i| h.get(i)).copied().unwrap_or(0.0)
    });
    let noise = sigma * sigma / modulation.mean_power();
    let mut r = DMatrix::<f64>::identity(n_taps, n_taps) * noise;
    for j in (0..combined).filter(|j| !(target + 1..=target + n_fb).contains(j)) {
        let c = col(j);
        r += &c * c.transpose();
    }
    let p = col(target);
    let w = match r.clone().cholesky() {
        Some(ch) => ch.solve(&p),
        None => {
            log::warn!("singular FFE normal equations; using the least-squares solution");
            r.svd(true, true)
                .solve(&p, 1e-12)
                .map_err(|e| invalid(format!("FFE design failed: {e}")))?
        }
    };
    let ff = FfeTaps {
        taps: w.iter().copied().collect(),
        cursor,
    };
    let q = combined_response(&ff, channel);
    let fb = (1..=n_fb)
        .map(|j| q.get(target + j).copied().unwrap_or(0.0))
        .collect();
    Ok((ff, fb))
}

/// Pulse response of channel followed by FFE, `q = w * h`.
pub fn combined_response(ffe: &FfeTaps, channel: &Channel) -> Vec<f64> {
    let h = channel.taps();
    let mut q = vec![0.0; ffe.taps.len() + h.len() - 1];
    for (k, w) in ffe.taps.iter().enumerate() {
        for (i, hv) in h.iter().enumerate() {
            q[k + i] += w * hv;
        }
    }
    q
}

/// Off-cursor energy of a pulse relative to its cursor.
pub fn isi_ratio(pulse: &[f64], cursor: usize) -> f64 {
    let main = pulse[cursor];
    pulse
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != cursor)
        .map(|(_, v)| v * v)
        .sum::<f64>()
        / (main * main)
}

pub fn ffe_apply(ffe: &FfeTaps, x: &[f64]) -> Vec<f64> {
    let n = x.len() as isize;
    (0..n)
        .map(|t| {
            ffe.taps
                .iter()
                .enumerate()
                .filter_map(|(k, w)| {
                    let i = t + ffe.cursor as isize - k as isize;
                    (0..n).contains(&i).then(|| w * x[i as usize])
                })
                .sum()
        })
        .collect()
}

/// Sequential FFE+DFE detection; decisions indexed like `x`.
pub fn dfe_run(cfg: &DfeConfig, x: &[f64], modulation: &Modulation) -> Vec<usize> {
    dfe_run_with(cfg, x, modulation, |_, d| d)
}

/// As [`dfe_run`], with a hook that may override each decision before it is
/// fed back. Used to inject decision errors.
pub fn dfe_run_with(
    cfg: &DfeConfig,
    x: &[f64],
    modulation: &Modulation,
    mut hook: impl FnMut(usize, usize) -> usize,
) -> Vec<usize> {
    let y = ffe_apply(&cfg.ff, x);
    let mut decisions: Vec<usize> = Vec::with_capacity(y.len());
    for (t, &yt) in y.iter().enumerate() {
        let feedback: f64 = cfg
            .fb
            .iter()
            .enumerate()
            .filter_map(|(k, b)| {
                t.checked_sub(k + 1)
                    .map(|i| b * modulation.level(decisions[i]))
            })
            .sum();
        let d = hook(t, modulation.slice(yt - feedback));
        decisions.push(d);
    }
    decisions
}

pub fn ffe_decide(ffe: &FfeTaps, x: &[f64], modulation: &Modulation) -> Vec<usize> {
    ffe_apply(ffe, x).into_iter().map(|y| modulation.slice(y)).collect()
}

impl FfeTaps {
    /// Text form: cursor on the first line, then one tap per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.cursor);
        for t in &self.taps {
            let _ = writeln!(out, "{t:.16e}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut nums = data_lines(text);
        let cursor = next_usize(&mut nums, "cursor")?;
        let taps = nums.map(|l| parse_f64(&l)).collect::<Result<Vec<_>>>()?;
        if cursor >= taps.len() {
            return Err(Error::ChannelFormat(format!("cursor {cursor} out of range")));
        }
        Ok(Self { taps, cursor })
    }
}

impl DfeConfig {
    /// Text form: feedback count, the feedback taps, then the FFE block.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.fb.len());
        for t in &self.fb {
            let _ = writeln!(out, "{t:.16e}");
        }
        out + &self.ff.to_text()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<String> = data_lines(text).collect();
        let mut it = lines.iter().cloned();
        let n_fb = next_usize(&mut it, "feedback count")?;
        let fb = it
            .by_ref()
            .take(n_fb)
            .map(|l| parse_f64(&l))
            .collect::<Result<Vec<_>>>()?;
        if fb.len() != n_fb {
            return Err(Error::ChannelFormat("truncated feedback taps".into()));
        }
        let ff = FfeTaps::parse(&it.collect::<Vec<_>>().join("\n"))?;
        Ok(Self { ff, fb })
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = String> + '_ {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim().to_string())
        .filter(|l| !l.is_empty())
}

fn next_usize(it: &mut impl Iterator<Item = String>, what: &str) -> Result<usize> {
    let line = it
        .next()
        .ok_or_else(|| Error::ChannelFormat(format!("missing {what}")))?;
    line.parse()
        .map_err(|_| Error::ChannelFormat(format!("bad {what} '{line}'")))
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::ChannelFormat(format!("bad tap '{s}'")))
}
