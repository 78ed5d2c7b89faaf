//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test -p neq-core --test acceptance` runs everything; numeric
//! arguments after `--` select criteria, e.g. `-- 1 4 5 6`.

use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use neq_core::ber::{write_ber_csv_to, BerPoint, Dfe, Equalizer, Ffe, NetEqualizer};
use neq_core::harness::{degradation, robustness_experiment, run_sweep, EqSpec, Model, SkewSpec, SweepSpec};
use neq_core::hmm::{posterior_symbols, Hmm};
use neq_core::linear::{default_cursor, design_ffe_dfe, design_mmse_ffe};
use neq_core::neural::{op_count, Mlp, MlpConfig, Network, NeuralEq, NeuralEqConfig};
use neq_core::prune::{iterative_prune, PruneConfig};
use neq_core::signal::{sigma_for_snr, Channel, Modulation};
use neq_core::train::{write_trace_csv, TrainConfig};

const MINUTE: u64 = 60;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn toy() -> Channel {
    Channel::new(vec![1.0, 0.4, 0.2, 0.1], 0).unwrap()
}

fn csv(points: &[BerPoint]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_ber_csv_to(&mut buf, points).unwrap();
    buf
}

fn find<'a>(points: &'a [BerPoint], snr: f64, eq: &str) -> &'a BerPoint {
    points.iter().find(|p| p.snr_db == snr && p.equalizer == eq).unwrap()
}

// ---------------------------------------------------------------- 1

/// Symbol posteriors by enumerating every PAM2 sequence, including the
/// `L-1` symbols sent before the first observation.
fn bayes_posteriors(h: &[f64], sigma: f64, x: &[f64]) -> Vec<[f64; 2]> {
    let l = h.len();
    let n = x.len() + l - 1;
    let level = |bit: usize| if bit == 0 { -1.0 } else { 1.0 };
    let mut log_w = Vec::with_capacity(1 << n);
    for seq in 0..1usize << n {
        let z = |j: usize| level((seq >> j) & 1);
        let ll: f64 = x
            .iter()
            .enumerate()
            .map(|(t, &xt)| {
                let y: f64 = h.iter().enumerate().map(|(k, hk)| hk * z(t + l - 1 - k)).sum();
                -(xt - y).powi(2) / (2.0 * sigma * sigma)
            })
            .sum();
        log_w.push(ll);
    }
    let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut post = vec![[0.0; 2]; x.len()];
    let mut total = 0.0;
    for (seq, lw) in log_w.iter().enumerate() {
        let w = (lw - top).exp();
        total += w;
        for (t, p) in post.iter_mut().enumerate() {
            p[(seq >> (t + l - 1)) & 1] += w;
        }
    }
    for p in &mut post {
        p[0] /= total;
        p[1] /= total;
    }
    post
}

fn criterion1() -> Verdict {
    let m = Modulation::pam2();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for h in [vec![1.0], vec![1.0, 0.5], vec![1.0, 0.4, 0.2]] {
        let ch = Channel::new(h.clone(), 0).unwrap();
        for t in 3..=6 {
            for _ in 0..100 {
                let sigma = rng.random_range(0.2..1.2);
                let noise = Normal::new(0.0, sigma).unwrap();
                let bits: Vec<usize> = (0..t + h.len() - 1).map(|_| rng.random_range(0..2)).collect();
                let x: Vec<f64> = (0..t)
                    .map(|i| {
                        let y: f64 = h
                            .iter()
                            .enumerate()
                            .map(|(k, hk)| hk * m.level(bits[i + h.len() - 1 - k]))
                            .sum();
                        y + noise.sample(&mut rng)
                    })
                    .collect();
                let hmm = Hmm::build(&ch, &m, sigma).unwrap();
                let got = posterior_symbols(&hmm, &x).unwrap();
                for (row, want) in got.rows().into_iter().zip(bayes_posteriors(&h, sigma, &x)) {
                    for s in 0..2 {
                        worst = worst.max((row[s] - want[s]).abs());
                    }
                }
                cases += 1;
            }
        }
    }
    verdict(worst <= 1e-9, format!("{cases} cases, max abs error {worst:.2e} (limit 1e-9)"))
}

// ---------------------------------------------------------------- 2

fn criterion2_points() -> Vec<BerPoint> {
    let spec = SweepSpec {
        channel: toy(),
        modulation: Modulation::pam4(),
        snr_db: (10..=20).map(f64::from).collect(),
        roster: vec![EqSpec::Ffe { taps: 8 }, EqSpec::Dfe { ff: 8, fb: 3 }, EqSpec::Fb { state_cap: 1 << 20 }],
        symbols_per_point: 1_000_000,
        seed: 2,
        train: TrainConfig::default(),
        train_snr_db: None,
    };
    run_sweep(&spec).unwrap().points
}

fn criterion2(points: &[BerPoint]) -> Verdict {
    let mut checked = Vec::new();
    let mut failed = Vec::new();
    for snr in (10..=20).map(f64::from) {
        let (ffe, dfe, fb) = (find(points, snr, "ffe8"), find(points, snr, "dfe8-3"), find(points, snr, "fb"));
        if !(1e-4..=1e-1).contains(&ffe.ber) {
            continue;
        }
        checked.push(snr);
        if !(fb.clearly_below(dfe) && dfe.clearly_below(ffe)) {
            failed.push(format!("{snr} dB (fb {:.3e}, dfe {:.3e}, ffe {:.3e})", fb.ber, dfe.ber, ffe.ber));
        }
    }
    let pass = !checked.is_empty() && failed.is_empty();
    let detail = if failed.is_empty() {
        format!("ordering holds at {checked:?} dB")
    } else {
        format!("ordering broken at {}", failed.join(", "))
    };
    verdict(pass, detail)
}

// ---------------------------------------------------------------- 3

/// SNR on the criterion-2 grid whose FB BER is nearest 1e-3 in log scale.
fn fb_snr_near_1e3(points: &[BerPoint]) -> f64 {
    points
        .iter()
        .filter(|p| p.equalizer == "fb" && p.ber > 0.0)
        .min_by(|a, b| (a.ber.log10() + 3.0).abs().total_cmp(&(b.ber.log10() + 3.0).abs()))
        .unwrap()
        .snr_db
}

struct Proximity {
    snr: f64,
    net: NeuralEq,
    points: Vec<BerPoint>,
    trace_csv: Vec<u8>,
    train: TrainConfig,
}

fn criterion3_run(snr: f64) -> Proximity {
    let train = TrainConfig { snr_db: snr, seed: 3, ..TrainConfig::default() };
    let spec = SweepSpec {
        channel: toy(),
        modulation: Modulation::pam4(),
        snr_db: vec![snr],
        roster: vec![
            EqSpec::Dfe { ff: 8, fb: 3 },
            EqSpec::Fb { state_cap: 1 << 20 },
            EqSpec::NeuralEq { config: NeuralEqConfig::new(12, 4, 32, 4).unwrap(), pretrained: None },
        ],
        symbols_per_point: 4_000_000,
        seed: 3,
        train: train.clone(),
        train_snr_db: Some(snr),
    };
    let result = run_sweep(&spec).unwrap();
    let trained = &result.models[0];
    let Model::NeuralEq(net) = &trained.model else { unreachable!() };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    write_trace_csv(&path, &trained.trace).unwrap();
    Proximity { snr, net: net.clone(), points: result.points, trace_csv: std::fs::read(path).unwrap(), train }
}

fn criterion3(run: &Proximity) -> Verdict {
    let (neq, dfe, fb) =
        (find(&run.points, run.snr, "neuraleq"), find(&run.points, run.snr, "dfe8-3"), find(&run.points, run.snr, "fb"));
    let pass = neq.ber < dfe.ber && neq.ber <= 3.0 * fb.ber;
    verdict(
        pass,
        format!(
            "{} dB: neuraleq {:.3e}, dfe {:.3e}, fb {:.3e} (ratio to fb {:.2})",
            run.snr,
            neq.ber,
            dfe.ber,
            fb.ber,
            neq.ber / fb.ber
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion4() -> Verdict {
    let cfg = NeuralEqConfig::new(4, 2, 3, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let step = 1e-4;
    let mut worst: f64 = 0.0;
    for draw in 0..20 {
        let mut net = NeuralEq::init(cfg, draw).unwrap();
        for v in net.values_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        let rows = 6;
        let x = Array2::from_shape_fn((rows, 4), |_| rng.random_range(-1.5..1.5));
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..4)).collect();
        let n = net.values().len();
        let mut grad = vec![0.0; n];
        net.chunk_loss_grad(x.view(), &labels, &mut grad);
        let mut scratch = vec![0.0; n];
        for (i, &analytic) in grad.iter().enumerate() {
            let orig = net.values()[i];
            net.values_mut()[i] = orig + step;
            let up = net.chunk_loss_grad(x.view(), &labels, &mut scratch);
            net.values_mut()[i] = orig - step;
            let down = net.chunk_loss_grad(x.view(), &labels, &mut scratch);
            net.values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    verdict(worst <= 1e-4, format!("20 draws, max relative error {worst:.2e} (limit 1e-4)"))
}

// ---------------------------------------------------------------- 5, 6

fn criterion5() -> Verdict {
    let ops = op_count(&NeuralEqConfig::new(12, 4, 32, 4).unwrap());
    verdict(
        ops.multiplies == 2080 && ops.tanhs == 96,
        format!("{} multiplies, {} tanh (want 2080, 96)", ops.multiplies, ops.tanhs),
    )
}

fn criterion6() -> Verdict {
    let mut found = Vec::new();
    let mut pass = true;
    for (hidden, want) in [([216, 376], 85_908), ([408, 488], 206_852)] {
        let cfg = MlpConfig { window: 12, target: 4, hidden, mod_order: 4 };
        let built = Mlp::zeros(cfg).unwrap().values().len();
        pass &= cfg.param_count() == want && built == want;
        found.push(format!("{hidden:?}: {} (want {want})", cfg.param_count()));
    }
    verdict(pass, found.join(", "))
}

// ---------------------------------------------------------------- 7

fn criterion7(run: &Proximity) -> Verdict {
    let pcfg = PruneConfig { target_sparsity: 0.5, ..PruneConfig::default() };
    let (_, report) = iterative_prune(run.net.clone(), &run.train, &toy(), &Modulation::pam4(), &pcfg).unwrap();
    let last = report.last();
    let cfg = run.net.config();
    let (first, outer, stage_d) =
        (last.layer_sparsity[0], last.layer_sparsity[cfg.window - 1], last.layer_sparsity[cfg.target - 1]);
    let outer_mean = 0.5 * (first + outer);
    let pass = last.global_sparsity >= 0.5 && last.normalized_ber <= 1.2 && outer_mean >= stage_d;
    verdict(
        pass,
        format!(
            "sparsity {:.3}, normalized BER {:.3} (limit 1.2), outer stages {outer_mean:.3} vs stage D {stage_d:.3}",
            last.global_sparsity, last.normalized_ber
        ),
    )
}

// ---------------------------------------------------------------- 8

fn criterion8(run: &Proximity) -> Verdict {
    let ch = toy();
    let m = Modulation::pam4();
    let sigma = sigma_for_snr(&ch, &m, run.snr);
    let dfe = Dfe { config: design_ffe_dfe(&ch, &m, sigma, 8, 3).unwrap(), modulation: m.clone(), pre: 0 };
    let ffe =
        Ffe { taps: design_mmse_ffe(&ch, &m, sigma, 8, default_cursor(&ch, 8)).unwrap(), modulation: m.clone(), pre: 0 };
    let neq = NetEqualizer { net: &run.net, modulation: m.clone(), pre: 0 };
    let spec = SkewSpec {
        channel: ch,
        modulation: m,
        snr_db: run.snr,
        p_values: vec![0.0, 0.01, 0.02],
        trials: 20,
        symbols_per_trial: 200_000,
        seed: 8,
    };
    let eqs: [&dyn Equalizer; 3] = [&ffe, &dfe, &neq];
    let rows = robustness_experiment(&spec, &eqs).unwrap();
    let d_neq = degradation(&rows, &neq.id(), 0.02).unwrap();
    let d_dfe = degradation(&rows, &dfe.id(), 0.02).unwrap();
    let d_ffe = degradation(&rows, &ffe.id(), 0.02).unwrap();
    verdict(
        d_neq <= d_dfe,
        format!("ber_p/ber_0 at p=0.02: neuraleq {d_neq:.3}, dfe {d_dfe:.3} (ffe {d_ffe:.3})"),
    )
}

// ---------------------------------------------------------------- 9

fn criterion9(c2: &[BerPoint], c3: &Proximity) -> Verdict {
    let again2 = criterion2_points();
    let again3 = criterion3_run(c3.snr);
    let same2 = csv(&again2) == csv(c2);
    let same3 = csv(&again3.points) == csv(&c3.points) && again3.trace_csv == c3.trace_csv;
    verdict(same2 && same3, format!("criterion 2 CSV identical: {same2}, criterion 3 CSVs identical: {same3}"))
}

// ----------------------------------------------------------------

fn report(n: u32, budget: Option<u64>, started: Instant, v: Verdict, failures: &mut u32) {
    let elapsed = started.elapsed();
    let in_time = budget.is_none_or(|b| elapsed <= Duration::from_secs(b));
    let pass = v.pass && in_time;
    if !pass {
        *failures += 1;
    }
    let limit = budget.map(|b| format!(" / limit {}s", b)).unwrap_or_default();
    println!(
        "criterion {n}: {} | {} | {:.1}s{limit}",
        if pass { "PASS" } else { "FAIL" },
        v.detail,
        elapsed.as_secs_f64()
    );
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut failures = 0;

    if run(1) {
        let t = Instant::now();
        report(1, Some(MINUTE), t, criterion1(), &mut failures);
    }
    let needs_c2 = [2, 3, 7, 8, 9].iter().any(|&n| run(n));
    let c2 = needs_c2.then(|| {
        let t = Instant::now();
        let points = criterion2_points();
        if run(2) {
            report(2, Some(10 * MINUTE), t, criterion2(&points), &mut failures);
        }
        points
    });
    let c3 = [3, 7, 8, 9].iter().any(|&n| run(n)).then(|| {
        let t = Instant::now();
        let snr = fb_snr_near_1e3(c2.as_ref().unwrap());
        let proximity = criterion3_run(snr);
        if run(3) {
            report(3, Some(30 * MINUTE), t, criterion3(&proximity), &mut failures);
        }
        proximity
    });
    if run(4) {
        let t = Instant::now();
        report(4, Some(10), t, criterion4(), &mut failures);
    }
    if run(5) {
        report(5, None, Instant::now(), criterion5(), &mut failures);
    }
    if run(6) {
        report(6, None, Instant::now(), criterion6(), &mut failures);
    }
    if run(7) {
        let t = Instant::now();
        report(7, Some(45 * MINUTE), t, criterion7(c3.as_ref().unwrap()), &mut failures);
    }
    if run(8) {
        let t = Instant::now();
        report(8, Some(30 * MINUTE), t, criterion8(c3.as_ref().unwrap()), &mut failures);
    }
    if run(9) {
        let t = Instant::now();
        report(9, None, t, criterion9(c2.as_ref().unwrap(), c3.as_ref().unwrap()), &mut failures);
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all selected criteria passed");
}
