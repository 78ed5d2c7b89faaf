//! Global magnitude pruning with fine-tuning between rounds.
//!
//! Only weight matrices and vectors are candidates; biases, initial vectors
//! and perceptron scalars stay dense. A pruned weight is masked and held at
//! exactly zero for the rest of the network's life.

use std::path::Path;

use crate::ber::{count_errors, NetEqualizer};
use crate::error::{invalid, Result};
use crate::neural::{Group, Network};
use crate::rng::Domain;
use crate::signal::{sigma_for_snr, Channel, Modulation};
use crate::train::{finetune, DataPlan, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Each round removes a fraction of the weights still remaining.
    Geometric,
    /// Each round removes a fraction of the original prunable count.
    Linear,
}

/// Prunable weights as `(masked, total)`.
pub fn prunable_counts(net: &dyn Network) -> (usize, usize) {
    let mask = net.mask();
    net.tensors()
        .iter()
        .filter(|t| t.prunable())
        .fold((0, 0), |(m, n), t| {
            (m + mask[t.range()].iter().filter(|&&k| !k).count(), n + t.len())
        })
}

pub fn global_sparsity(net: &dyn Network) -> f64 {
    let (masked, total) = prunable_counts(net);
    masked as f64 / total as f64
}

/// Masks the smallest-magnitude remaining weights across all prunable
/// tensors; magnitude ties go to the lower flat index. Returns how many
/// weights were newly masked.
pub fn prune_step(net: &mut dyn Network, fraction: f64, schedule: Schedule) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(invalid(format!("prune fraction must lie in (0, 1), got {fraction}")));
    }
    let (masked, total) = prunable_counts(net);
    let remaining = total - masked;
    let count = match schedule {
        Schedule::Geometric => (fraction * remaining as f64).floor() as usize,
        Schedule::Linear => ((fraction * total as f64).floor() as usize).min(remaining),
    };
    if count == 0 {
        log::warn!("nothing left to prune ({remaining} weights remain)");
        return Ok(0);
    }
    let mut candidates: Vec<(f64, usize)> = net
        .tensors()
        .iter()
        .filter(|t| t.prunable())
        .flat_map(|t| t.range())
        .filter(|&i| net.mask()[i])
        .map(|i| (net.values()[i].abs(), i))
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for &(_, i) in &candidates[..count] {
        net.mask_mut()[i] = false;
        net.values_mut()[i] = 0.0;
    }
    Ok(count)
}

fn group_key(g: Group) -> Option<usize> {
    match g {
        Group::Stage(p) | Group::Layer(p) => Some(p),
        Group::Head => Some(usize::MAX),
        Group::Init => None,
    }
}

/// Layer labels in left-to-right order: window positions, then the head.
pub fn layer_labels(net: &dyn Network) -> Vec<String> {
    layer_groups(net)
        .into_iter()
        .map(|g| match g {
            Group::Stage(p) => format!("stage{}", p + 1),
            Group::Layer(l) => format!("layer{}", l + 1),
            Group::Head => "head".into(),
            Group::Init => "init".into(),
        })
        .collect()
}

fn layer_groups(net: &dyn Network) -> Vec<Group> {
    let mut groups: Vec<Group> = net
        .tensors()
        .iter()
        .filter(|t| t.prunable())
        .map(|t| t.group)
        .collect();
    groups.sort_by_key(|&g| group_key(g));
    groups.dedup();
    groups
}

/// Fraction of masked prunable weights per layer, ordered as
/// [`layer_labels`].
pub fn layer_sparsity(net: &dyn Network) -> Vec<f64> {
    layer_sizes(net)
        .into_iter()
        .map(|(masked, total)| masked as f64 / total as f64)
        .collect()
}

/// `(masked, total)` prunable weights per layer.
pub fn layer_sizes(net: &dyn Network) -> Vec<(usize, usize)> {
    let mask = net.mask();
    layer_groups(net)
        .into_iter()
        .map(|g| {
            net.tensors()
                .iter()
                .filter(|t| t.prunable() && t.group == g)
                .fold((0, 0), |(m, n), t| {
                    (m + mask[t.range()].iter().filter(|&&k| !k).count(), n + t.len())
                })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneConfig {
    pub target_sparsity: f64,
    pub fraction: f64,
    pub schedule: Schedule,
    pub finetune_batches: u64,
    /// Symbols per BER measurement.
    pub eval_symbols: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            target_sparsity: 0.5,
            fraction: 0.1,
            schedule: Schedule::Geometric,
            finetune_batches: 500,
            eval_symbols: 2_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneIteration {
    pub iteration: usize,
    pub global_sparsity: f64,
    pub layer_sparsity: Vec<f64>,
    pub ber: f64,
    pub normalized_ber: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneReport {
    pub baseline_ber: f64,
    pub layer_labels: Vec<String>,
    /// Starts with the unpruned network as iteration 0.
    pub iterations: Vec<PruneIteration>,
}

impl PruneReport {
    pub fn last(&self) -> &PruneIteration {
        self.iterations.last().expect("iteration 0 is always present")
    }

    /// Rows `(iteration, global_sparsity, layer_index, layer_sparsity)`.
    pub fn write_layers_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "global_sparsity", "layer_index", "layer_sparsity"])?;
        for it in &self.iterations {
            for (l, s) in it.layer_sparsity.iter().enumerate() {
                w.write_record([
                    it.iteration.to_string(),
                    it.global_sparsity.to_string(),
                    l.to_string(),
                    s.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Rows `(iteration, global_sparsity, normalized_ber)`.
    pub fn write_ber_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "global_sparsity", "normalized_ber"])?;
        for it in &self.iterations {
            w.write_record([
                it.iteration.to_string(),
                it.global_sparsity.to_string(),
                it.normalized_ber.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// BER on the test stream of `train_cfg`, shared by every pruning round.
fn test_ber(
    net: &dyn Network,
    train_cfg: &TrainConfig,
    channel: &Channel,
    modulation: &Modulation,
    symbols: usize,
) -> Result<f64> {
    let sigma = sigma_for_snr(channel, modulation, train_cfg.snr_db);
    let eq = NetEqualizer { net, modulation: modulation.clone(), pre: channel.pre_cursors() };
    let (e, b) = count_errors(&eq, channel, modulation, sigma, symbols, train_cfg.test_seed())?;
    Ok(e as f64 / b as f64)
}

fn normalized(ber: f64, baseline: f64) -> f64 {
    if baseline > 0.0 {
        ber / baseline
    } else if ber == 0.0 {
        1.0
    } else {
        f64::INFINITY
    }
}

/// Alternates pruning rounds and fine-tuning until the global sparsity
/// reaches the target.
pub fn iterative_prune<N: Network>(
    mut net: N,
    train_cfg: &TrainConfig,
    channel: &Channel,
    modulation: &Modulation,
    cfg: &PruneConfig,
) -> Result<(N, PruneReport)> {
    if !(cfg.target_sparsity > 0.0 && cfg.target_sparsity < 1.0) {
        return Err(invalid(format!(
            "target sparsity must lie in (0, 1), got {}",
            cfg.target_sparsity
        )));
    }
    let baseline = test_ber(&net, train_cfg, channel, modulation, cfg.eval_symbols)?;
    let mut report = PruneReport {
        baseline_ber: baseline,
        layer_labels: layer_labels(&net),
        iterations: vec![PruneIteration {
            iteration: 0,
            global_sparsity: global_sparsity(&net),
            layer_sparsity: layer_sparsity(&net),
            ber: baseline,
            normalized_ber: 1.0,
        }],
    };
    let mut iteration = 0;
    while global_sparsity(&net) < cfg.target_sparsity {
        iteration += 1;
        if prune_step(&mut net, cfg.fraction, cfg.schedule)? == 0 {
            break;
        }
        let plan = DataPlan {
            domain: Domain::Finetune,
            first_batch: (iteration as u64 - 1) * cfg.finetune_batches,
            batches: cfg.finetune_batches,
        };
        finetune(&mut net, train_cfg, channel, modulation, plan)?;
        let ber = test_ber(&net, train_cfg, channel, modulation, cfg.eval_symbols)?;
        let it = PruneIteration {
            iteration,
            global_sparsity: global_sparsity(&net),
            layer_sparsity: layer_sparsity(&net),
            ber,
            normalized_ber: normalized(ber, baseline),
        };
        log::info!(
            "prune round {iteration}: sparsity {:.3}, normalized BER {:.3}",
            it.global_sparsity,
            it.normalized_ber
        );
        report.iterations.push(it);
    }
    Ok((net, report))
}
