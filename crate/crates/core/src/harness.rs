//! Experiment drivers: BER sweeps over SNR, channel-skew robustness and a
//! width search for the stage network.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::ber::{count_errors, evaluate_ber, BerPoint, Dfe, Equalizer, Ffe, ForwardBackward, NetEqualizer, Slicer};
use crate::error::{invalid, Error, Result};
use crate::hmm::Hmm;
use crate::linear::{default_cursor, design_ffe_dfe, design_mmse_ffe};
use crate::neural::{param_count, Mlp, MlpConfig, Network, NeuralEq, NeuralEqConfig};
use crate::rng::{derive_seed, Domain, Part, StreamKey};
use crate::signal::{sigma_for_snr, Channel, Modulation};
use crate::train::{train, TracePoint, TrainConfig};

const POINT_TAG: u64 = 0x70_6f69_6e74;
const TRIAL_SKEW_TAG: u64 = 0x736b_6577;
const TRIAL_EVAL_TAG: u64 = 0x74_7269_616c;

/// One roster entry of a sweep.
#[derive(Clone, Debug)]
pub enum EqSpec {
    Slicer,
    /// MMSE FFE redesigned at every SNR point.
    Ffe { taps: usize },
    /// MMSE FFE with a decision-feedback section, redesigned per point.
    Dfe { ff: usize, fb: usize },
    /// MAP detection; skipped when the trellis exceeds `state_cap`.
    Fb { state_cap: usize },
    /// Trained once at the training SNR unless a network is supplied.
    NeuralEq { config: NeuralEqConfig, pretrained: Option<NeuralEq> },
    Mlp { config: MlpConfig },
}

impl EqSpec {
    pub fn name(&self) -> String {
        match self {
            EqSpec::Slicer => "slicer".into(),
            EqSpec::Ffe { taps } => format!("ffe{taps}"),
            EqSpec::Dfe { ff, fb } => format!("dfe{ff}-{fb}"),
            EqSpec::Fb { .. } => "fb".into(),
            EqSpec::NeuralEq { .. } => "neuraleq".into(),
            EqSpec::Mlp { .. } => "mlp".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub channel: Channel,
    pub modulation: Modulation,
    pub snr_db: Vec<f64>,
    pub roster: Vec<EqSpec>,
    pub symbols_per_point: usize,
    pub seed: u64,
    /// Recipe for the learned equalizers. Its SNR is replaced by the
    /// median of the sweep unless `train_snr_db` is set.
    pub train: TrainConfig,
    pub train_snr_db: Option<f64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.snr_db.is_empty() {
            return Err(invalid("SNR list is empty"));
        }
        if self.snr_db.windows(2).any(|w| w[1] <= w[0]) || self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(invalid("SNR list must be finite and strictly increasing"));
        }
        if self.roster.is_empty() {
            return Err(invalid("equalizer roster is empty"));
        }
        Ok(())
    }

    /// SNR at which learned equalizers are trained.
    pub fn training_snr(&self) -> f64 {
        self.train_snr_db.unwrap_or_else(|| median(&self.snr_db))
    }

    /// Noise seed shared by every equalizer at point `index`.
    pub fn point_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, POINT_TAG + index as u64)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// A network produced by a sweep.
#[derive(Clone, Debug)]
pub enum Model {
    NeuralEq(NeuralEq),
    Mlp(Mlp),
}

impl Model {
    pub fn network(&self) -> &dyn Network {
        match self {
            Model::NeuralEq(n) => n,
            Model::Mlp(n) => n,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub name: String,
    pub model: Model,
    /// Best validation BER, or `None` for a supplied network.
    pub valid_ber: Option<f64>,
    pub trace: Vec<TracePoint>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Skipped {
    pub equalizer: String,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    /// Ordered by SNR point, then roster order.
    pub points: Vec<BerPoint>,
    pub skipped: Vec<Skipped>,
    pub models: Vec<TrainedModel>,
    pub training_snr_db: f64,
}

impl SweepResult {
    pub fn curve(&self, equalizer: &str) -> Vec<&BerPoint> {
        self.points.iter().filter(|p| p.equalizer == equalizer).collect()
    }
}

fn train_model(spec: &SweepSpec, entry: &EqSpec) -> Result<Option<TrainedModel>> {
    let cfg = TrainConfig { snr_db: spec.training_snr(), ..spec.train.clone() };
    let (model, valid_ber, trace) = match entry {
        EqSpec::NeuralEq { pretrained: Some(net), .. } => (Model::NeuralEq(net.clone()), None, Vec::new()),
        EqSpec::NeuralEq { config, pretrained: None } => {
            log::info!("training neuraleq at {:.2} dB", cfg.snr_db);
            let out = train(NeuralEq::init(*config, cfg.seed)?, &cfg, &spec.channel, &spec.modulation)?;
            (Model::NeuralEq(out.net), Some(out.best_ber), out.trace)
        }
        EqSpec::Mlp { config } => {
            log::info!("training mlp at {:.2} dB", cfg.snr_db);
            let out = train(Mlp::init(*config, cfg.seed)?, &cfg, &spec.channel, &spec.modulation)?;
            (Model::Mlp(out.net), Some(out.best_ber), out.trace)
        }
        _ => return Ok(None),
    };
    Ok(Some(TrainedModel { name: entry.name(), model, valid_ber, trace }))
}

/// Evaluates every roster entry at every SNR point. Linear equalizers and
/// the MAP detector are rebuilt for each point's noise level; learned
/// equalizers are trained once.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepResult> {
    spec.validate()?;
    let ch = &spec.channel;
    let m = &spec.modulation;
    let pre = ch.pre_cursors();
    let mut models = Vec::new();
    for entry in &spec.roster {
        if let Some(t) = train_model(spec, entry)? {
            models.push(t);
        }
    }
    let mut skipped = Vec::new();
    for entry in &spec.roster {
        if let EqSpec::Fb { state_cap } = entry {
            if let Err(e @ Error::Capacity { .. }) = Hmm::build_with_cap(ch, m, 1.0, *state_cap) {
                log::warn!("fb skipped: {e}");
                skipped.push(Skipped { equalizer: entry.name(), reason: e.to_string() });
            }
        }
    }
    let mut points = Vec::new();
    for (i, &snr) in spec.snr_db.iter().enumerate() {
        let sigma = sigma_for_snr(ch, m, snr);
        let seed = spec.point_seed(i);
        let mut models_iter = models.iter();
        for entry in &spec.roster {
            let eq: Box<dyn Equalizer + '_> = match entry {
                EqSpec::Slicer => Box::new(Slicer { modulation: m.clone(), pre }),
                EqSpec::Ffe { taps } => Box::new(Ffe {
                    taps: design_mmse_ffe(ch, m, sigma, *taps, default_cursor(ch, *taps))?,
                    modulation: m.clone(),
                    pre,
                }),
                EqSpec::Dfe { ff, fb } => Box::new(Dfe {
                    config: design_ffe_dfe(ch, m, sigma, *ff, *fb)?,
                    modulation: m.clone(),
                    pre,
                }),
                EqSpec::Fb { state_cap } => match Hmm::build_with_cap(ch, m, sigma, *state_cap) {
                    Ok(hmm) => Box::new(ForwardBackward::new(hmm)),
                    Err(Error::Capacity { .. }) => continue,
                    Err(e) => return Err(e),
                },
                EqSpec::NeuralEq { .. } | EqSpec::Mlp { .. } => {
                    let t = models_iter.next().expect("one model per learned entry");
                    Box::new(NetEqualizer { net: t.model.network(), modulation: m.clone(), pre })
                }
            };
            let mut point = evaluate_ber(eq.as_ref(), ch, m, snr, spec.symbols_per_point, seed)?;
            point.equalizer = entry.name();
            log::info!("{snr:.2} dB {}: BER {:.3e}", point.equalizer, point.ber);
            points.push(point);
        }
    }
    Ok(SweepResult { points, skipped, models, training_snr_db: spec.training_snr() })
}

/// Adds i.i.d. Gaussian noise of standard deviation `max|h|·p` to every
/// tap. The pre-cursor count is kept.
pub fn skew_channel(channel: &Channel, p: f64, seed: u64) -> Result<Channel> {
    if !(p >= 0.0 && p.is_finite()) {
        return Err(invalid(format!("skew level must be a non-negative number, got {p}")));
    }
    let sigma = channel.max_abs_tap() * p;
    let mut rng = StreamKey::block(seed, Domain::Skew, 0, Part::Symbols).rng();
    let taps = channel
        .taps()
        .iter()
        .map(|&h| {
            let s: f64 = StandardNormal.sample(&mut rng);
            h + sigma * s
        })
        .collect();
    Channel::new(taps, channel.pre_cursors())
}

#[derive(Clone, Debug)]
pub struct SkewSpec {
    pub channel: Channel,
    pub modulation: Modulation,
    pub snr_db: f64,
    pub p_values: Vec<f64>,
    pub trials: usize,
    pub symbols_per_trial: usize,
    pub seed: u64,
}

impl SkewSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p_values.is_empty() || self.p_values.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(invalid("skew levels must be a non-empty list of non-negative numbers"));
        }
        if self.trials == 0 {
            return Err(invalid("need at least one trial per skew level"));
        }
        Ok(())
    }

    /// Seed of the skew draw for `trial`. The same draw, scaled by `p`, is
    /// reused at every skew level.
    pub fn skew_seed(&self, trial: usize) -> u64 {
        derive_seed(self.seed, TRIAL_SKEW_TAG + trial as u64)
    }

    /// Noise seed for `trial`, shared by all equalizers and skew levels.
    pub fn eval_seed(&self, trial: usize) -> u64 {
        derive_seed(self.seed, TRIAL_EVAL_TAG + trial as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessRow {
    pub p: f64,
    pub equalizer: String,
    pub mean_ber: f64,
    pub std_ber: f64,
    pub trials: usize,
}

/// Evaluates equalizers built for the base channel on skewed versions of
/// it. The noise level stays the one of the base channel at `snr_db`.
pub fn robustness_experiment(spec: &SkewSpec, equalizers: &[&dyn Equalizer]) -> Result<Vec<RobustnessRow>> {
    spec.validate()?;
    if equalizers.is_empty() {
        return Err(invalid("no equalizers to evaluate"));
    }
    let sigma = sigma_for_snr(&spec.channel, &spec.modulation, spec.snr_db);
    let mut rows = Vec::new();
    for &p in &spec.p_values {
        let channels: Vec<Channel> = (0..spec.trials)
            .map(|t| skew_channel(&spec.channel, p, spec.skew_seed(t)))
            .collect::<Result<_>>()?;
        for eq in equalizers {
            let mut bers = Vec::with_capacity(spec.trials);
            for (t, ch) in channels.iter().enumerate() {
                let (e, b) = count_errors(*eq, ch, &spec.modulation, sigma, spec.symbols_per_trial, spec.eval_seed(t))?;
                bers.push(e as f64 / b as f64);
            }
            let n = bers.len() as f64;
            let mean = bers.iter().sum::<f64>() / n;
            let var = if bers.len() > 1 {
                bers.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            log::info!("p={p} {}: mean BER {mean:.3e}", eq.id());
            rows.push(RobustnessRow { p, equalizer: eq.id(), mean_ber: mean, std_ber: var.sqrt(), trials: spec.trials });
        }
    }
    Ok(rows)
}

/// `mean_ber(p) / mean_ber(p = 0)` for one equalizer.
pub fn degradation(rows: &[RobustnessRow], equalizer: &str, p: f64) -> Option<f64> {
    let find = |q: f64| rows.iter().find(|r| r.equalizer == equalizer && r.p == q).map(|r| r.mean_ber);
    Some(find(p)? / find(0.0)?)
}

pub fn write_robustness_csv(path: &Path, rows: &[RobustnessRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRow {
    pub width: usize,
    pub valid_ber: Option<f64>,
    pub param_count: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub best_width: usize,
    pub rows: Vec<GridRow>,
}

/// Trains one stage network per candidate width with the same budget and
/// seed, and picks the lowest validation BER. Ties go to the smaller width.
/// A failed candidate is reported in its row; the search fails only when
/// every candidate does.
pub fn grid_search_width(
    channel: &Channel,
    modulation: &Modulation,
    train_cfg: &TrainConfig,
    window: usize,
    target: usize,
    candidates: &[usize],
) -> Result<GridResult> {
    if candidates.is_empty() {
        return Err(invalid("no candidate widths"));
    }
    let mut rows = Vec::new();
    for &width in candidates {
        let cfg = NeuralEqConfig::new(window, target, width, modulation.order())?;
        let params = param_count(&cfg);
        let outcome = NeuralEq::init(cfg, train_cfg.seed).and_then(|net| train(net, train_cfg, channel, modulation));
        let row = match outcome {
            Ok(o) => GridRow { width, valid_ber: Some(o.best_ber), param_count: params, error: None },
            Err(e) => {
                log::warn!("width {width} failed: {e}");
                GridRow { width, valid_ber: None, param_count: params, error: Some(e.to_string()) }
            }
        };
        rows.push(row);
    }
    match best_width(&rows) {
        Some(best_width) => Ok(GridResult { best_width, rows }),
        None => Err(invalid(format!(
            "every candidate failed: {}",
            rows.iter().filter_map(|r| r.error.clone()).collect::<Vec<_>>().join("; ")
        ))),
    }
}

/// Width with the lowest validation BER, ties to the smaller width.
pub fn best_width(rows: &[GridRow]) -> Option<usize> {
    rows.iter()
        .filter_map(|r| r.valid_ber.map(|b| (b, r.width)))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, w)| w)
}

pub fn write_grid_csv(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["width", "valid_ber", "param_count", "error"])?;
    for r in rows {
        w.write_record([
            r.width.to_string(),
            r.valid_ber.map(|b| b.to_string()).unwrap_or_default(),
            r.param_count.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
