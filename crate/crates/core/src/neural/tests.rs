use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_net(cfg: NeuralEqConfig, seed: u64) -> NeuralEq {
    let mut net = NeuralEq::init(cfg, seed).unwrap();
    // make biases and initial vectors nonzero so every path is exercised
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for v in net.values_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    net
}

fn random_windows(rows: usize, t: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, t), |_| rng.random_range(-1.5..1.5))
}

/// Central-difference check of the summed loss; returns the worst relative
/// error over all parameters.
fn worst_gradient_error<N: Network + Clone>(net: &N, x: ArrayView2<f64>, labels: &[usize]) -> f64 {
    let mut grad = vec![0.0; net.values().len()];
    net.chunk_loss_grad(x, labels, &mut grad);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for i in 0..grad.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        let up = probe.chunk_loss_grad(x, labels, &mut vec![0.0; grad.len()]);
        probe.values_mut()[i] = orig - h;
        let down = probe.chunk_loss_grad(x, labels, &mut vec![0.0; grad.len()]);
        probe.values_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

#[test]
fn parameter_counts() {
    assert_eq!(param_count(&NeuralEqConfig::new(1, 1, 1, 2).unwrap()), 17);
    let big = NeuralEqConfig::new(12, 4, 32, 4).unwrap();
    assert_eq!(param_count(&big), 28_040);
    assert_eq!(NeuralEq::zeros(big).unwrap().values().len(), 28_040);
    let at = |n| param_count(&NeuralEqConfig::new(12, 4, n, 4).unwrap()) as f64;
    assert!((at(2048) / at(1024) - 4.0).abs() < 0.01);
}

#[test]
fn operation_counts() {
    let c = op_count(&NeuralEqConfig::new(12, 4, 32, 4).unwrap());
    assert_eq!((c.multiplies, c.tanhs, c.adds), (2_080, 96, 2_080));
    assert_eq!(op_count(&NeuralEqConfig::new(1, 1, 1, 2).unwrap()).multiplies, 3);
}

#[test]
fn mlp_parameter_counts() {
    for (hidden, want) in [([216, 376], 85_908), ([408, 488], 206_852)] {
        let cfg = MlpConfig { window: 12, target: 4, hidden, mod_order: 4 };
        assert_eq!(cfg.param_count(), want);
        assert_eq!(Mlp::zeros(cfg).unwrap().values().len(), want);
    }
}

#[test]
fn config_validation() {
    assert!(NeuralEqConfig::new(4, 0, 3, 2).is_err());
    assert!(NeuralEqConfig::new(4, 5, 3, 2).is_err());
    assert!(NeuralEqConfig::new(4, 2, 0, 2).is_err());
    assert!(NeuralEqConfig::new(4, 2, 3, 8).is_err());
    let mlp = MlpConfig { window: 4, target: 2, hidden: [0, 3], mod_order: 4 };
    assert!(mlp.validate().is_err());
}

#[test]
fn zero_weights_give_uniform_output() {
    let net = NeuralEq::zeros(NeuralEqConfig::new(12, 4, 8, 4).unwrap()).unwrap();
    for p in net.forward_infer(&[0.3; 12]).unwrap() {
        assert_eq!(p, 0.25);
    }
    let mlp = Mlp::zeros(MlpConfig { window: 12, target: 4, hidden: [5, 6], mod_order: 2 }).unwrap();
    assert_eq!(mlp.forward(&[1.0; 12]).unwrap(), vec![0.5, 0.5]);
}

#[test]
fn outputs_are_normalized() {
    let net = random_net(NeuralEqConfig::new(6, 3, 5, 4).unwrap(), 1);
    let x = random_windows(50, 6, 2);
    for row in x.rows() {
        let p = net.forward_infer(row.as_slice().unwrap()).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(net.forward_infer(&[0.0; 5]).is_err());
}

#[test]
fn init_is_deterministic_glorot() {
    let cfg = NeuralEqConfig::new(12, 4, 32, 4).unwrap();
    let a = NeuralEq::init(cfg, 9).unwrap();
    assert_eq!(a, NeuralEq::init(cfg, 9).unwrap());
    assert_ne!(a, NeuralEq::init(cfg, 10).unwrap());
    let mut squares = 0.0;
    let mut count = 0;
    for t in a.tensors() {
        let vals = &a.values()[t.range()];
        match t.kind {
            TensorKind::Bias | TensorKind::Init => assert!(vals.iter().all(|&v| v == 0.0), "{}", t.name),
            _ => {}
        }
        if t.name.ends_with(".W1") {
            squares += vals.iter().map(|v| v * v).sum::<f64>();
            count += vals.len();
        }
    }
    let var = squares / count as f64;
    let want = 2.0 / 64.0;
    assert!((var / want - 1.0).abs() < 0.1, "{var} vs {want}");
    assert!(a.mask().iter().all(|&m| m));
}

/// T=2, D=1, N=1, PAM2 evaluated by hand.
#[test]
fn hand_computed_tiny_network() {
    let mut net = NeuralEq::zeros(NeuralEqConfig::new(2, 1, 1, 2).unwrap()).unwrap();
    // stage layout: w_in b_in u W1 v c1 W2 c2; then a0 b0 Wg1(1x2) cg1 Wg2(2x1) cg2(2)
    let stage_f = [0.5, 0.1, 2.0, 0.3, -0.7, 0.05, 1.2, -0.1];
    let stage_b = [-0.4, 0.2, 1.5, 0.8, 0.6, -0.2, 0.9, 0.3];
    let rest = [0.25, -0.5, 1.1, -0.6, 0.15, 0.7, -1.3, 0.05, -0.02];
    let all: Vec<f64> = stage_f.iter().chain(&stage_b).chain(&rest).copied().collect();
    net.values_mut().copy_from_slice(&all);
    let (x1, x2) = (0.8, -0.3);

    let m = (0.5 * x1 + 0.1f64).tanh() * 2.0;
    let h = (0.3 * 0.25 + m * -0.7 + 0.05f64).tanh();
    let a = (1.2 * h - 0.1f64).tanh();
    let m = (-0.4 * x2 + 0.2f64).tanh() * 1.5;
    let h = (0.8 * -0.5 + m * 0.6 - 0.2f64).tanh();
    let b = (0.9 * h + 0.3f64).tanh();
    let g = (1.1 * a - 0.6 * b + 0.15f64).tanh();
    let (l0, l1) = (0.7 * g + 0.05, -1.3 * g - 0.02);
    let p0 = 1.0 / (1.0 + (l1 - l0).exp());

    let p = net.forward_infer(&[x1, x2]).unwrap();
    assert!((p[0] - p0).abs() < 1e-15);
    assert!((p[1] - (1.0 - p0)).abs() < 1e-15);
}

#[test]
fn batched_forward_matches_reference() {
    for (t, d) in [(4, 2), (5, 5), (6, 1), (12, 4)] {
        let net = random_net(NeuralEqConfig::new(t, d, 4, 4).unwrap(), t as u64);
        let x = random_windows(37, t, 3);
        let batched = net.probabilities(x.view());
        for (row, p) in x.rows().into_iter().zip(batched.rows()) {
            let r = net.forward_infer(row.as_slice().unwrap()).unwrap();
            for (a, b) in r.iter().zip(p) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let cfg = NeuralEqConfig::new(4, 2, 3, 4).unwrap();
    for draw in 0..3 {
        let net = random_net(cfg, 100 + draw);
        let x = random_windows(5, 4, 200 + draw);
        let labels = [0, 3, 1, 2, 1];
        let err = worst_gradient_error(&net, x.view(), &labels);
        assert!(err <= 1e-4, "draw {draw}: {err}");
    }
    // an empty backward chain routes the head gradient straight into b0
    let net = random_net(NeuralEqConfig::new(3, 3, 2, 2).unwrap(), 7);
    let x = random_windows(4, 3, 8);
    assert!(worst_gradient_error(&net, x.view(), &[0, 1, 1, 0]) <= 1e-4);
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let mut mlp = Mlp::init(MlpConfig { window: 4, target: 2, hidden: [3, 5], mod_order: 4 }, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for v in mlp.values_mut() {
        *v += rng.random_range(-0.2..0.2);
    }
    let x = random_windows(6, 4, 6);
    assert!(worst_gradient_error(&mlp, x.view(), &[0, 1, 2, 3, 3, 0]) <= 1e-4);
}

#[test]
fn batch_gradient_is_chunk_sum() {
    let net = random_net(NeuralEqConfig::new(4, 2, 3, 2).unwrap(), 11);
    let rows = CHUNK_ROWS * 2 + 17;
    let x = random_windows(rows, 4, 12);
    let labels: Vec<usize> = (0..rows).map(|i| i % 2).collect();
    let (loss, grad) = net.loss_grad(x.view(), &labels);
    let mut direct = vec![0.0; grad.len()];
    let total = net.chunk_loss_grad(x.view(), &labels, &mut direct);
    assert!((loss - total / rows as f64).abs() < 1e-12);
    for (a, b) in grad.iter().zip(&direct) {
        assert!((a - b / rows as f64).abs() < 1e-12);
    }
}

#[test]
fn permuting_hidden_units_preserves_output() {
    let cfg = NeuralEqConfig::new(5, 2, 4, 4).unwrap();
    let net = random_net(cfg, 21);
    let perm = [2, 0, 3, 1];
    let mut permuted = net.clone();
    // permute the hidden layer of the second forward stage: rows of W1, v
    // and c1, columns of W2
    let stage = 2 * 16 + 3 * 4 + 3;
    let base = stage;
    let (w1, v, c1, w2) = (base + 3, base + 3 + 16, base + 3 + 20, base + 3 + 24);
    let src = net.values();
    let dst = permuted.values_mut();
    for (new, &old) in perm.iter().enumerate() {
        for j in 0..4 {
            dst[w1 + 4 * new + j] = src[w1 + 4 * old + j];
            dst[w2 + 4 * j + new] = src[w2 + 4 * j + old];
        }
        dst[v + new] = src[v + old];
        dst[c1 + new] = src[c1 + old];
    }
    assert_ne!(net.values(), permuted.values());
    let x = random_windows(10, 5, 22);
    for row in x.rows() {
        let w = row.as_slice().unwrap();
        let (a, b) = (net.forward_infer(w).unwrap(), permuted.forward_infer(w).unwrap());
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn stage_positions_cover_window_once() {
    let cfg = NeuralEqConfig::new(12, 4, 2, 4).unwrap();
    let mut seen: Vec<usize> = (0..12).map(|s| cfg.stage_position(s)).collect();
    assert_eq!(&seen[..4], &[0, 1, 2, 3]);
    assert_eq!(&seen[4..], &[11, 10, 9, 8, 7, 6, 5, 4]);
    seen.sort();
    assert_eq!(seen, (0..12).collect::<Vec<_>>());
    let net = NeuralEq::zeros(cfg).unwrap();
    let names: Vec<&str> = net.tensors().iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names[0], "fwd1.w_in");
    assert_eq!(names[4 * 8], "bwd12.w_in");
    assert_eq!(names[names.len() - 4], "head.Wg1");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut net = random_net(NeuralEqConfig::new(6, 2, 3, 4).unwrap(), 31);
    for i in [3, 10, 50] {
        net.mask_mut()[i] = false;
        net.values_mut()[i] = 0.0;
    }
    let bytes = net.to_bytes();
    assert_eq!(&bytes[..4], b"NEQ1");
    let back = NeuralEq::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert!(back.values().iter().zip(net.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(back.mask(), net.mask());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.neq");
    net.save(&path).unwrap();
    assert_eq!(NeuralEq::load(&path).unwrap(), net);

    assert!(NeuralEq::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(NeuralEq::from_bytes(&bad).is_err());
    let mut bad = bytes;
    // unmask nothing, but give a masked entry a value
    let off = 24 + 8 * 3;
    bad[off..off + 8].copy_from_slice(&1.0f64.to_le_bytes());
    assert!(NeuralEq::from_bytes(&bad).is_err());
}

/// Decides by slicing the target sample, so alignment is observable.
#[derive(Clone)]
struct TargetSlicer {
    t: usize,
    d: usize,
}

impl Network for TargetSlicer {
    fn kind(&self) -> &'static str {
        "stub"
    }
    fn window(&self) -> usize {
        self.t
    }
    fn target(&self) -> usize {
        self.d
    }
    fn classes(&self) -> usize {
        2
    }
    fn tensors(&self) -> &[Tensor] {
        &[]
    }
    fn values(&self) -> &[f64] {
        &[]
    }
    fn values_mut(&mut self) -> &mut [f64] {
        &mut []
    }
    fn mask(&self) -> &[bool] {
        &[]
    }
    fn mask_mut(&mut self) -> &mut [bool] {
        &mut []
    }
    fn chunk_probabilities(&self, w: ArrayView2<f64>) -> Array2<f64> {
        Array2::from_shape_fn((w.nrows(), 2), |(r, c)| {
            let v = w[[r, self.d - 1]];
            if v == 0.0 {
                0.5
            } else if (v > 0.0) == (c == 1) {
                1.0
            } else {
                0.0
            }
        })
    }
    fn chunk_loss_grad(&self, _: ArrayView2<f64>, _: &[usize], _: &mut [f64]) -> f64 {
        0.0
    }
}

#[test]
fn stream_prediction_alignment() {
    let m = crate::signal::Modulation::pam2();
    let z: Vec<usize> = (0..40).map(|i| (i * 7 / 3) % 2).collect();
    // pure two-sample delay: x[j] = level(z[j-2])
    let mut x = vec![0.0, 0.0];
    x.extend(z.iter().take(38).map(|&i| m.level(i)));
    let net = TargetSlicer { t: 12, d: 4 };
    let decided = net.predict_stream(&x, 2, &m).unwrap();
    assert_eq!(decided.len(), 40);
    // every symbol whose main-cursor sample exists is recovered
    assert_eq!(&decided[..38], &z[..38]);
    assert!(net.predict_stream(&x[..11], 2, &m).is_err());
    // a zero sample gives tied probabilities, which go to the lower class
    let tie = net.classify(ArrayView2::from_shape((1, 12), &[0.0; 12]).unwrap());
    assert_eq!(tie, vec![0]);
}

#[test]
fn sliding_windows_rows() {
    let x: Vec<f64> = (0..6).map(f64::from).collect();
    let w = sliding_windows(&x, 4);
    assert_eq!(w.nrows(), 3);
    assert_eq!(w.row(2).to_vec(), vec![2.0, 3.0, 4.0, 5.0]);
    assert_eq!(sliding_windows(&x, 7).nrows(), 0);
}

#[test]
fn fast_tanh_tracks_libm() {
    let mut worst: f64 = 0.0;
    for i in -400_000..=400_000 {
        let x = f64::from(i) * 1e-4;
        worst = worst.max((tanh(x) - x.tanh()).abs());
    }
    assert!(worst < 1e-15, "{worst}");
    assert_eq!(tanh(0.0), 0.0);
    assert_eq!(tanh(1e3), 1.0);
    assert_eq!(tanh(-1e3), -1.0);
    assert!(tanh(f64::NAN).is_nan());
    // odd symmetry
    for x in [1e-9, 0.3, 2.5, 11.0] {
        assert_eq!(tanh(-x), -tanh(x));
    }
}
