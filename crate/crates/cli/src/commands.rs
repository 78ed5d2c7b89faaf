use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use neq_core::ber::{evaluate_ber, write_ber_csv_to, Dfe, Equalizer, Ffe, ForwardBackward, NetEqualizer, Slicer};
use neq_core::harness::{
    degradation, grid_search_width, robustness_experiment, run_sweep, write_grid_csv, write_robustness_csv, EqSpec,
    Model, SkewSpec, SweepSpec,
};
use neq_core::hmm::Hmm;
use neq_core::linear::{default_cursor, design_ffe_dfe, design_mmse_ffe};
use neq_core::neural::{Mlp, MlpConfig, Network, NeuralEq, NeuralEqConfig};
use neq_core::prune::{iterative_prune, PruneConfig, Schedule};
use neq_core::signal::{sigma_for_snr, Channel, Modulation};
use neq_core::svg::{log_y_chart, Series};
use neq_core::train::{train, train_with, write_trace_csv, AdamConfig, TrainConfig, TrainOptions, TrainRun, TrainState};
use neq_core::Error;

use crate::config::RunConfig;
use crate::output::{hash_file, write_atomic, FileEntry, Manifest, OutDir};

pub const ROSTER_NAMES: &[&str] = &["slicer", "ffe", "dfe", "fb", "neuraleq", "mlp"];
const STATE_FILE: &str = "train_state.neqs";

/// Shared state of one command invocation.
struct Run<'a> {
    command: &'static str,
    cfg: &'a RunConfig,
    out: OutDir,
    inputs: Vec<FileEntry>,
    notes: BTreeMap<String, Value>,
}

impl<'a> Run<'a> {
    fn open(command: &'static str, cfg: &'a RunConfig, out: &Path) -> Result<Self> {
        Ok(Self { command, cfg, out: OutDir::open(out)?, inputs: Vec::new(), notes: BTreeMap::new() })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(hash_file(path)?);
        Ok(())
    }

    fn channel(&mut self) -> Result<(Channel, Modulation)> {
        let path = self.cfg.path("channel.file")?;
        let ch = Channel::load(&path)?;
        self.input(&path)?;
        let m: Modulation = self.cfg.get::<String>("channel.modulation")?.parse()?;
        Ok((ch, m))
    }

    fn note(&mut self, key: &str, value: Value) {
        self.notes.insert(key.to_string(), value);
    }

    fn commit(self) -> Result<()> {
        let manifest = Manifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.cfg.get("run.seed")?,
            config: self.cfg.resolved(),
            inputs: self.inputs,
            artifacts: Vec::new(),
            notes: self.notes,
        };
        self.out.commit(manifest)
    }

    /// The configured checkpoint, or a network trained with `[train]`.
    fn neuraleq(&mut self, tcfg: &TrainConfig, ch: &Channel, m: &Modulation) -> Result<NeuralEq> {
        if let Some(path) = self.cfg.optional_path("neuraleq.checkpoint")? {
            let net = NeuralEq::load(&path).with_context(|| format!("loading {}", path.display()))?;
            self.input(&path)?;
            if net.classes() != m.order() {
                bail!("checkpoint {} was trained for {} levels, channel uses {}", path.display(), net.classes(), m.order());
            }
            return Ok(net);
        }
        let net = NeuralEq::init(neq_config(self.cfg, m)?, tcfg.seed)?;
        let outcome = train(net, tcfg, ch, m)?;
        self.out.write("neuraleq.ckpt", &outcome.net.to_bytes())?;
        self.out.write_with("trace_neuraleq.csv", |p| write_trace_csv(p, &outcome.trace))?;
        self.note("neuraleq_valid_ber", json!(outcome.best_ber));
        Ok(outcome.net)
    }

    fn mlp(&mut self, tcfg: &TrainConfig, ch: &Channel, m: &Modulation) -> Result<Mlp> {
        let outcome = train(Mlp::init(mlp_config(self.cfg, m)?, tcfg.seed)?, tcfg, ch, m)?;
        self.out.write_with("trace_mlp.csv", |p| write_trace_csv(p, &outcome.trace))?;
        self.note("mlp_valid_ber", json!(outcome.best_ber));
        Ok(outcome.net)
    }
}

pub fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let tcfg = TrainConfig {
        batch_size: cfg.get("train.batch_size")?,
        learning_rate: cfg.get("train.learning_rate")?,
        adam: AdamConfig {
            beta1: cfg.get("train.beta1")?,
            beta2: cfg.get("train.beta2")?,
            epsilon: cfg.get("train.epsilon")?,
        },
        train_symbols: cfg.get("train.train_symbols")?,
        valid_symbols: cfg.get("train.valid_symbols")?,
        test_symbols: cfg.get("train.test_symbols")?,
        snr_db: cfg.get("train.snr_db")?,
        seed: cfg.get("run.seed")?,
        validate_every: cfg.get("train.validate_every")?,
    };
    tcfg.validate()?;
    Ok(tcfg)
}

pub fn neq_config(cfg: &RunConfig, m: &Modulation) -> Result<NeuralEqConfig> {
    Ok(NeuralEqConfig::new(
        cfg.get("neuraleq.window")?,
        cfg.get("neuraleq.target")?,
        cfg.get("neuraleq.width")?,
        m.order(),
    )?)
}

fn mlp_config(cfg: &RunConfig, m: &Modulation) -> Result<MlpConfig> {
    let hidden: Vec<usize> = cfg.list("mlp.hidden")?;
    let [h1, h2] = hidden[..] else {
        bail!("config key 'mlp.hidden' needs exactly two layer sizes, got {}", hidden.len());
    };
    let mc = MlpConfig { window: cfg.get("mlp.window")?, target: cfg.get("mlp.target")?, hidden: [h1, h2], mod_order: m.order() };
    mc.validate()?;
    Ok(mc)
}

fn roster(cfg: &RunConfig, key: &str) -> Result<Vec<String>> {
    let names: Vec<String> = cfg.list(key)?;
    if names.is_empty() {
        bail!("config key '{key}' lists no equalizers");
    }
    for n in &names {
        if !ROSTER_NAMES.contains(&n.as_str()) {
            bail!("unknown equalizer '{n}' in '{key}' (known: {})", ROSTER_NAMES.join(", "));
        }
    }
    Ok(names)
}

fn schedule(cfg: &RunConfig) -> Result<Schedule> {
    match cfg.get::<String>("prune.schedule")?.as_str() {
        "geometric" => Ok(Schedule::Geometric),
        "linear" => Ok(Schedule::Linear),
        other => bail!("config key 'prune.schedule' must be geometric or linear, got '{other}'"),
    }
}

fn csv_bytes(points: &[neq_core::ber::BerPoint]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_ber_csv_to(&mut buf, points)?;
    Ok(buf)
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: bool, stop_after: Option<u64>) -> Result<()> {
    let mut run = Run::open("train", cfg, out)?;
    let (ch, m) = run.channel()?;
    let tcfg = train_config(cfg)?;
    let ncfg = neq_config(cfg, &m)?;
    let state_path = run.out.path(STATE_FILE);
    let mut state = if resume {
        let s = TrainState::load(&state_path).with_context(|| format!("cannot resume from {}", state_path.display()))?;
        log::info!("resuming at batch {}", s.next_batch);
        Some(s)
    } else {
        None
    };
    let state_every: u64 = cfg.get("train.state_every")?;
    let mut budget = stop_after;
    let outcome = loop {
        let chunk = [(state_every > 0).then_some(state_every), budget].into_iter().flatten().min();
        let net = NeuralEq::init(ncfg, tcfg.seed)?;
        match train_with(net, &tcfg, &ch, &m, TrainOptions { resume: state.take(), stop_after: chunk }) {
            Ok(TrainRun::Finished(o)) => break o,
            Ok(TrainRun::Interrupted(s)) => {
                write_atomic(&state_path, &s.to_bytes())?;
                if let Some(b) = budget.as_mut() {
                    *b -= chunk.expect("a stop was requested");
                    if *b == 0 {
                        eprintln!("stopped at batch {}; continue with --resume", s.next_batch);
                        return Ok(());
                    }
                }
                state = Some(*s);
            }
            Err(Error::Diverged { step, loss, last_good }) => {
                let mut net = NeuralEq::zeros(ncfg)?;
                net.values_mut().copy_from_slice(&last_good);
                let path = run.out.path("last_good.ckpt");
                write_atomic(&path, &net.to_bytes())?;
                bail!("training diverged at step {step} (loss {loss}); last good parameters in {}", path.display());
            }
            Err(e) => return Err(e.into()),
        }
    };
    run.out.write("neuraleq.ckpt", &outcome.net.to_bytes())?;
    run.out.write_with("trace.csv", |p| write_trace_csv(p, &outcome.trace))?;
    let eq = NetEqualizer { net: &outcome.net, modulation: m.clone(), pre: ch.pre_cursors() };
    let point = evaluate_ber(&eq, &ch, &m, tcfg.snr_db, tcfg.test_symbols, tcfg.test_seed())?;
    run.out.write("test_ber.csv", &csv_bytes(std::slice::from_ref(&point))?)?;
    run.note("best_valid_ber", json!(outcome.best_ber));
    run.note("best_step", json!(outcome.best_step));
    run.note("test_ber", json!(point.ber));
    let _ = std::fs::remove_file(&state_path);
    run.commit()
}

fn sweep_spec(run: &mut Run, ch: Channel, m: Modulation) -> Result<SweepSpec> {
    let cfg = run.cfg;
    let mut entries = Vec::new();
    for name in roster(cfg, "sweep.roster")? {
        entries.push(match name.as_str() {
            "slicer" => EqSpec::Slicer,
            "ffe" => EqSpec::Ffe { taps: cfg.get("ffe.taps")? },
            "dfe" => EqSpec::Dfe { ff: cfg.get("dfe.ff")?, fb: cfg.get("dfe.fb")? },
            "fb" => EqSpec::Fb { state_cap: cfg.get("fb.state_cap")? },
            "neuraleq" => {
                let pretrained = match cfg.optional_path("neuraleq.checkpoint")? {
                    Some(p) => {
                        run.input(&p)?;
                        Some(NeuralEq::load(&p).with_context(|| format!("loading {}", p.display()))?)
                    }
                    None => None,
                };
                EqSpec::NeuralEq { config: neq_config(cfg, &m)?, pretrained }
            }
            "mlp" => EqSpec::Mlp { config: mlp_config(cfg, &m)? },
            _ => unreachable!("roster names are validated"),
        });
    }
    let spec = SweepSpec {
        channel: ch,
        modulation: m,
        snr_db: cfg.list("sweep.snr_db")?,
        roster: entries,
        symbols_per_point: cfg.get("sweep.symbols")?,
        seed: cfg.get("run.seed")?,
        train: train_config(cfg)?,
        train_snr_db: cfg.optional("sweep.train_snr_db")?,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut run = Run::open("sweep", cfg, out)?;
    let (ch, m) = run.channel()?;
    let spec = sweep_spec(&mut run, ch, m)?;
    let result = run_sweep(&spec)?;
    run.out.write("ber.csv", &csv_bytes(&result.points)?)?;
    let series: Vec<Series> = spec
        .roster
        .iter()
        .filter(|e| !result.skipped.iter().any(|s| s.equalizer == e.name()))
        .map(|e| Series {
            label: e.name(),
            points: result.curve(&e.name()).iter().map(|p| (p.snr_db, p.ber)).collect(),
        })
        .collect();
    let title = format!("BER vs SNR ({})", spec.modulation.name());
    run.out.write("ber.svg", log_y_chart(&title, "SNR (dB)", "BER", &series).as_bytes())?;
    for t in &result.models {
        if let (Model::NeuralEq(net), Some(_)) = (&t.model, t.valid_ber) {
            run.out.write("neuraleq.ckpt", &net.to_bytes())?;
        }
        if t.valid_ber.is_some() {
            run.out.write_with(&format!("trace_{}.csv", t.name), |p| write_trace_csv(p, &t.trace))?;
            run.note(&format!("{}_valid_ber", t.name), json!(t.valid_ber));
        }
    }
    for s in &result.skipped {
        eprintln!("warning: {} skipped: {}", s.equalizer, s.reason);
    }
    run.note("skipped", json!(result.skipped));
    run.note("training_snr_db", json!(result.training_snr_db));
    run.note("point_seeds", json!((0..spec.snr_db.len()).map(|i| spec.point_seed(i)).collect::<Vec<_>>()));
    run.commit()
}

pub fn cmd_prune(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut run = Run::open("prune", cfg, out)?;
    let (ch, m) = run.channel()?;
    let tcfg = train_config(cfg)?;
    let net = run.neuraleq(&tcfg, &ch, &m)?;
    let pcfg = PruneConfig {
        target_sparsity: cfg.get("prune.target_sparsity")?,
        fraction: cfg.get("prune.fraction")?,
        schedule: schedule(cfg)?,
        finetune_batches: cfg.get("prune.finetune_batches")?,
        eval_symbols: cfg.get("prune.eval_symbols")?,
    };
    let (pruned, report) = iterative_prune(net, &tcfg, &ch, &m, &pcfg)?;
    run.out.write_with("prune_layers.csv", |p| report.write_layers_csv(p))?;
    run.out.write_with("prune_ber.csv", |p| report.write_ber_csv(p))?;
    run.out.write("pruned.ckpt", &pruned.to_bytes())?;
    let last = report.last();
    run.note("baseline_ber", json!(report.baseline_ber));
    run.note("final_sparsity", json!(last.global_sparsity));
    run.note("final_normalized_ber", json!(last.normalized_ber));
    run.note("layer_labels", json!(report.layer_labels));
    run.commit()
}

pub fn cmd_robustness(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut run = Run::open("robustness", cfg, out)?;
    let (ch, m) = run.channel()?;
    let snr: f64 = cfg.get("robustness.snr_db")?;
    let sigma = sigma_for_snr(&ch, &m, snr);
    let tcfg = train_config(cfg)?;
    let pre = ch.pre_cursors();
    let names = roster(cfg, "robustness.roster")?;
    let mut nets: Vec<Box<dyn Network>> = Vec::new();
    let mut fixed: Vec<Box<dyn Equalizer>> = Vec::new();
    let mut order = Vec::new();
    for name in &names {
        match name.as_str() {
            "slicer" => fixed.push(Box::new(Slicer { modulation: m.clone(), pre })),
            "ffe" => {
                let n: usize = cfg.get("ffe.taps")?;
                let taps = design_mmse_ffe(&ch, &m, sigma, n, default_cursor(&ch, n))?;
                fixed.push(Box::new(Ffe { taps, modulation: m.clone(), pre }));
            }
            "dfe" => {
                let config = design_ffe_dfe(&ch, &m, sigma, cfg.get("dfe.ff")?, cfg.get("dfe.fb")?)?;
                fixed.push(Box::new(Dfe { config, modulation: m.clone(), pre }));
            }
            "fb" => {
                let hmm = Hmm::build_with_cap(&ch, &m, sigma, cfg.get("fb.state_cap")?)?;
                fixed.push(Box::new(ForwardBackward::new(hmm)));
            }
            "neuraleq" => nets.push(Box::new(run.neuraleq(&tcfg, &ch, &m)?)),
            "mlp" => nets.push(Box::new(run.mlp(&tcfg, &ch, &m)?)),
            _ => unreachable!("roster names are validated"),
        }
        order.push(name.as_str());
    }
    let adapters: Vec<NetEqualizer> =
        nets.iter().map(|n| NetEqualizer { net: n.as_ref(), modulation: m.clone(), pre }).collect();
    let (mut fi, mut ni) = (0, 0);
    let mut eqs: Vec<&dyn Equalizer> = Vec::new();
    for name in &order {
        if matches!(*name, "neuraleq" | "mlp") {
            eqs.push(&adapters[ni]);
            ni += 1;
        } else {
            eqs.push(fixed[fi].as_ref());
            fi += 1;
        }
    }
    let spec = SkewSpec {
        channel: ch,
        modulation: m.clone(),
        snr_db: snr,
        p_values: cfg.list("robustness.p")?,
        trials: cfg.get("robustness.trials")?,
        symbols_per_trial: cfg.get("robustness.symbols")?,
        seed: cfg.get("run.seed")?,
    };
    let rows = robustness_experiment(&spec, &eqs)?;
    run.out.write_with("robustness.csv", |p| write_robustness_csv(p, &rows))?;
    let max_p = spec.p_values.iter().copied().fold(0.0, f64::max);
    let ratios: BTreeMap<String, Option<f64>> =
        eqs.iter().map(|e| (e.id(), degradation(&rows, &e.id(), max_p))).collect();
    run.note("degradation_at_max_p", json!(ratios));
    run.note(
        "protocol",
        json!(format!(
            "{} skewed channels per p; trial t draws one Gaussian tap perturbation scaled by max|h|*p and one noise stream, both shared across p values and equalizers; equalizers are designed or trained on the unskewed channel; noise level fixed by the unskewed channel at {snr} dB",
            spec.trials
        )),
    );
    run.commit()
}

pub fn cmd_gridsearch(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut run = Run::open("gridsearch", cfg, out)?;
    let (ch, m) = run.channel()?;
    let tcfg = train_config(cfg)?;
    let widths: Vec<usize> = cfg.list("gridsearch.widths")?;
    let result = grid_search_width(&ch, &m, &tcfg, cfg.get("neuraleq.window")?, cfg.get("neuraleq.target")?, &widths)?;
    run.out.write_with("grid.csv", |p| write_grid_csv(p, &result.rows))?;
    run.note("best_width", json!(result.best_width));
    run.commit()
}

pub fn cmd_gen_channel(loss_db: f64, taps: usize, pre: usize, out: &Path) -> Result<()> {
    let ch = Channel::synthesize(loss_db, taps, pre)?;
    let text = format!(
        "# synthetic channel, {taps} taps, Nyquist loss {:.3} dB\n{}",
        ch.nyquist_loss_db(),
        ch.to_text()
    );
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(out, text.as_bytes())?;
    println!("{}: Nyquist loss {:.3} dB", out.display(), ch.nyquist_loss_db());
    Ok(())
}
