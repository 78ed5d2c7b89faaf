use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn neq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neq"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = neq(args);
    assert!(out.status.success(), "neq {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

const SMALL_TRAIN: &str = "[train]
batch_size = 128
train_symbols = 1280
valid_symbols = 2000
test_symbols = 2000
validate_every = 4
state_every = 3
snr_db = 16

[neuraleq]
window = 6
target = 3
width = 4
";

fn toy_config(dir: &Path, extra: &str) -> PathBuf {
    let body = format!(
        "[channel]\nfile = {}\nmodulation = pam4\n\n{SMALL_TRAIN}\n{extra}",
        root().join("channels/toy.txt").display()
    );
    write_config(dir, "run.ini", &body)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn minimal_sweep_writes_csv_svg_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    ok(&["sweep", "--config", s(&root().join("configs/minimal.ini")), "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("ber.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "snr_db,equalizer,bit_errors,total_bits,ber,ci_low,ci_high,seed");
    assert_eq!(lines.len(), 4);
    let svg = fs::read_to_string(out.join("ber.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("class=\"series\"").count(), 1);
    let m = manifest(&out);
    assert_eq!(m["command"], "sweep");
    assert_eq!(m["config"]["sweep"]["roster"], "slicer");
    for a in m["artifacts"].as_array().unwrap() {
        let bytes = fs::read(out.join(a["path"].as_str().unwrap())).unwrap();
        assert_eq!(a["sha256"], hex(&bytes));
    }
    assert!(!out.join(".neq.lock").exists());
}

#[test]
fn config_errors_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.ini", "[train]\nlearnin_rate = 0.1\n");
    let out = neq(&["sweep", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("train.learnin_rate"), "{}", stderr(&out));

    let out = neq(&["sweep", "--set", "ffe.tapz=3", "--out", s(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("ffe.tapz"));

    let cfg = toy_config(tmp.path(), "[sweep]\nroster = ffe, viterbi\n");
    let out = neq(&["sweep", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("viterbi"));

    let cfg = write_config(tmp.path(), "nochan.ini", "[channel]\nfile = missing.txt\n");
    let out = neq(&["sweep", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("missing.txt"));
}

#[test]
fn gen_channel_hits_requested_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("ch/loss12.txt");
    ok(&["gen-channel", "--loss-db", "12", "--taps", "10", "--pre", "2", "--out", s(&path)]);
    let text = fs::read_to_string(&path).unwrap();
    let mut values = text.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(values.next(), Some("2"));
    let taps: Vec<f64> = values.map(|l| l.parse().unwrap()).collect();
    assert_eq!(taps.len(), 10);
    let dc: f64 = taps.iter().sum();
    let ny: f64 = taps.iter().enumerate().map(|(k, h)| h * (std::f64::consts::PI * k as f64).cos()).sum();
    let loss = -20.0 * (ny.abs() / dc.abs()).log10();
    assert!((loss - 12.0).abs() < 0.1, "{loss}");

    let path = tmp.path().join("near.txt");
    ok(&["gen-channel", "--loss-db", "0.01", "--taps", "6", "--pre", "2", "--out", s(&path)]);
    let taps: Vec<f64> = fs::read_to_string(&path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.parse().unwrap())
        .collect();
    assert!(taps[2] > 0.99);

    let out = neq(&["gen-channel", "--loss-db", "30", "--taps", "2", "--pre", "1", "--out", s(&path)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("at most"));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path(), "");
    let full = tmp.path().join("full");
    ok(&["train", "--config", s(&cfg), "--out", s(&full), "--set", "train.state_every=0"]);
    let parts = tmp.path().join("parts");
    let first = ok(&["train", "--config", s(&cfg), "--out", s(&parts), "--stop-after", "4"]);
    assert!(stderr(&first).contains("--resume"));
    assert!(parts.join("train_state.neqs").exists());
    assert!(!parts.join("neuraleq.ckpt").exists());
    ok(&["train", "--config", s(&cfg), "--out", s(&parts), "--resume", "--stop-after", "3"]);
    ok(&["train", "--config", s(&cfg), "--out", s(&parts), "--resume"]);
    assert!(!parts.join("train_state.neqs").exists());
    for name in ["neuraleq.ckpt", "trace.csv", "test_ber.csv"] {
        assert_eq!(fs::read(full.join(name)).unwrap(), fs::read(parts.join(name)).unwrap(), "{name}");
    }
    let trace = fs::read_to_string(full.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("step,loss,valid_ber"));
    assert_eq!(trace.lines().count(), 11);

    let missing = neq(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("none")), "--resume"]);
    assert!(!missing.status.success());
}

#[test]
fn sweep_from_checkpoint_matches_in_process_training() {
    let tmp = tempfile::tempdir().unwrap();
    let sweep = "[sweep]\nsnr_db = 14, 16\nroster = dfe, neuraleq\nsymbols = 5000\ntrain_snr_db = 16\n";
    let cfg = toy_config(tmp.path(), sweep);
    let trained = tmp.path().join("trained");
    ok(&["train", "--config", s(&cfg), "--out", s(&trained)]);
    let inproc = tmp.path().join("inproc");
    ok(&["sweep", "--config", s(&cfg), "--out", s(&inproc)]);
    let loaded = tmp.path().join("loaded");
    let ckpt = format!("neuraleq.checkpoint={}", s(&trained.join("neuraleq.ckpt")));
    ok(&["sweep", "--config", s(&cfg), "--out", s(&loaded), "--set", &ckpt]);
    assert_eq!(fs::read(inproc.join("ber.csv")).unwrap(), fs::read(loaded.join("ber.csv")).unwrap());
    assert_eq!(fs::read(inproc.join("neuraleq.ckpt")).unwrap(), fs::read(trained.join("neuraleq.ckpt")).unwrap());
    let m = manifest(&loaded);
    assert!(m["inputs"].as_array().unwrap().iter().any(|i| i["path"].as_str().unwrap().ends_with("neuraleq.ckpt")));
}

#[test]
fn reruns_are_bit_identical_for_any_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path(), "[sweep]\nsnr_db = 12, 14\nroster = ffe, dfe, fb, neuraleq\nsymbols = 70000\n");
    let run = |name: &str, threads: &str| {
        let out = tmp.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_neq"))
            .args(["sweep", "--config", s(&cfg), "--out", s(&out)])
            .env("NEQ_THREADS", threads)
            .env("RUST_LOG", "warn")
            .status()
            .unwrap();
        assert!(status.success());
        out
    };
    let a = run("a", "1");
    let b = run("b", "3");
    for name in ["ber.csv", "ber.svg", "neuraleq.ckpt", "trace_neuraleq.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn fb_over_capacity_is_skipped_with_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path(), "[fb]\nstate_cap = 100\n[sweep]\nsnr_db = 14\nroster = slicer, fb\nsymbols = 2000\n");
    let out_dir = tmp.path().join("o");
    let out = ok(&["sweep", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert!(stderr(&out).contains("fb skipped"));
    let csv = fs::read_to_string(out_dir.join("ber.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(manifest(&out_dir)["notes"]["skipped"][0]["equalizer"], "fb");
}

#[test]
fn prune_writes_sparsity_and_ber_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(tmp.path(), "[prune]\ntarget_sparsity = 0.3\nfinetune_batches = 2\neval_symbols = 4000\n");
    let out = tmp.path().join("o");
    ok(&["prune", "--config", s(&cfg), "--out", s(&out)]);
    let layers = fs::read_to_string(out.join("prune_layers.csv")).unwrap();
    assert_eq!(layers.lines().next(), Some("iteration,global_sparsity,layer_index,layer_sparsity"));
    // T = 6 stage positions plus the head, for iterations 0..=4
    assert_eq!(layers.lines().count(), 1 + 5 * 7);
    let ber = fs::read_to_string(out.join("prune_ber.csv")).unwrap();
    assert_eq!(ber.lines().next(), Some("iteration,global_sparsity,normalized_ber"));
    assert!(out.join("pruned.ckpt").exists() && out.join("neuraleq.ckpt").exists());
    assert!(manifest(&out)["notes"]["final_sparsity"].as_f64().unwrap() >= 0.3);
}

#[test]
fn failed_runs_leave_no_partial_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    // training succeeds and writes a checkpoint, then pruning rejects the target
    let cfg = toy_config(tmp.path(), "[prune]\ntarget_sparsity = 1.5\n");
    let out_dir = tmp.path().join("o");
    let out = neq(&["prune", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("sparsity"));
    let left: Vec<_> = fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(left.is_empty(), "{left:?}");
}

#[test]
fn robustness_and_gridsearch_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = toy_config(
        tmp.path(),
        "[robustness]\np = 0, 0.02\ntrials = 2\nsymbols = 4000\nsnr_db = 16\nroster = ffe, dfe, neuraleq\n[gridsearch]\nwidths = 2, 4\n",
    );
    let out = tmp.path().join("rob");
    ok(&["robustness", "--config", s(&cfg), "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("robustness.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "p,equalizer,mean_ber,std_ber,trials");
    assert_eq!(lines.len(), 1 + 2 * 3);
    assert!(lines[1].starts_with("0.0,ffe8,"));
    let m = manifest(&out);
    assert!(m["notes"]["protocol"].as_str().unwrap().contains("2 skewed channels"));
    assert!(m["notes"]["degradation_at_max_p"]["neuraleq"].is_number());

    let out = tmp.path().join("grid");
    ok(&["gridsearch", "--config", s(&cfg), "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("grid.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("width,valid_ber,param_count,error"));
    assert_eq!(csv.lines().count(), 3);
    let best = manifest(&out)["notes"]["best_width"].as_u64().unwrap();
    assert!(best == 2 || best == 4);
}

#[test]
fn bundled_configs_load() {
    let tmp = tempfile::tempdir().unwrap();
    let tiny = [
        "train.batch_size=64",
        "train.train_symbols=128",
        "train.valid_symbols=1000",
        "train.test_symbols=1000",
        "sweep.symbols=1000",
        "neuraleq.width=2",
    ];
    for entry in fs::read_dir(root().join("configs")).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_stem().unwrap().to_str().unwrap().to_string();
        let mut args = vec!["sweep", "--config", s(&path)];
        let out = tmp.path().join(&name);
        args.extend(["--out", s(&out)]);
        for t in &tiny {
            args.extend(["--set", t]);
        }
        let fb_cap = "fb.state_cap=4096";
        args.extend(["--set", fb_cap]);
        ok(&args);
        if name == "toy_sweep" {
            let svg = fs::read_to_string(out.join("ber.svg")).unwrap();
            assert_eq!(svg.matches("class=\"series\"").count(), 4);
        }
    }
}
