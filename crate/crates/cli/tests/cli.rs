//! End-to-end tests of the command-line interface, driving the real
//! binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use amsincnet_core::network::ModelConfig;
use amsincnet_core::trainer::{read_metrics_csv, save_checkpoint, TrainConfig, TrainState};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_amsincnet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

/// Corpus spec whose 25 ms windows match the tiny model's 400 samples.
const TINY_CORPUS_SPEC: &str = "\
corpus.num_speakers=3
corpus.utterances_per_speaker=6
corpus.train_per_speaker=4
corpus.utterance_sec=0.5
corpus.sample_rate_hz=16000
corpus.seed=500
corpus.window_ms=25.0
corpus.overlap_ms=5.0
";

fn tiny_train_config() -> String {
    let mut cfg = TrainConfig::desk();
    cfg.model = ModelConfig::tiny();
    cfg.batch_size = 8;
    cfg.epochs = 2;
    cfg.batches_per_epoch = 5;
    cfg.eval_every = 1;
    cfg.to_text()
}

fn synth_tiny_corpus(dir: &Path) -> PathBuf {
    let spec = dir.join("corpus.conf");
    std::fs::write(&spec, TINY_CORPUS_SPEC).unwrap();
    let data = dir.join("data");
    let out = run(&[
        "synth",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    data
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_writes_wavs_manifest_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("corpus.conf");
    std::fs::write(&spec, TINY_CORPUS_SPEC).unwrap();

    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let r = run(&["synth", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(r.status.success(), "{}", stderr(&r));
    }

    let wavs: Vec<PathBuf> = {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&out_a)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "wav"))
            .collect();
        v.sort();
        v
    };
    assert_eq!(wavs.len(), 18); // 3 speakers x 6 utterances

    let manifest = std::fs::read_to_string(out_a.join("manifest.csv")).unwrap();
    let rows: Vec<&str> = manifest.lines().skip(1).collect();
    assert_eq!(rows.len(), 18);
    let train_rows = rows.iter().filter(|r| r.ends_with(",train")).count();
    let test_rows = rows.iter().filter(|r| r.ends_with(",test")).count();
    // split ratio matches the spec exactly: 4 train / 2 test per speaker
    assert_eq!(train_rows, 12);
    assert_eq!(test_rows, 6);

    // same spec + seed: identical bytes
    for wav in &wavs {
        let name = wav.file_name().unwrap();
        let a = std::fs::read(wav).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name:?}");
    }
    assert!(out_a.join("run_manifest.txt").exists());
    assert!(out_a.join("corpus_spec.conf").exists());
}

#[test]
fn train_eval_round_trip_matches_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_tiny_corpus(dir.path());
    let cfg_path = dir.path().join("train.conf");
    std::fs::write(&cfg_path, tiny_train_config()).unwrap();
    let out_dir = dir.path().join("run");

    let r = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));

    let metrics = read_metrics_csv(&out_dir.join("metrics_am_m0.50_s1.csv")).unwrap();
    let last_test = metrics
        .iter()
        .rev()
        .find(|m| m.split == amsincnet_core::signal::Split::Test)
        .unwrap();

    let ckpt = out_dir.join("ckpt_am_m0.50_s1_epoch2.amsn");
    let r = run(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert!(r.status.success(), "{}", stderr(&r));
    let text = stdout(&r);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "fer_percent,loss,margin_stat");
    let fields: Vec<f64> = lines
        .next()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    // cross-path consistency: cmd_eval equals the trainer's last test row
    assert_eq!(fields[0], last_test.fer_percent);
    assert_eq!(fields[1], last_test.loss);
    assert_eq!(fields[2], last_test.margin_stat);
}

#[test]
fn train_dispatches_loss_override_and_missing_data_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_tiny_corpus(dir.path());
    let cfg_path = dir.path().join("train.conf");
    std::fs::write(&cfg_path, tiny_train_config()).unwrap();
    let out_dir = dir.path().join("run_softmax");

    let r = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--loss",
        "softmax",
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    assert!(out_dir.join("metrics_softmax_s1.csv").exists());

    let r = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        dir.path().join("nope").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(3));
    assert!(stderr(&r).contains("manifest"), "{}", stderr(&r));
}

#[test]
fn resume_refuses_mismatched_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_tiny_corpus(dir.path());
    let cfg_path = dir.path().join("train.conf");
    std::fs::write(&cfg_path, tiny_train_config()).unwrap();
    let out_dir = dir.path().join("run");
    let r = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(r.status.success());

    // different margin -> different fingerprint -> refuse
    let r = run(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--margin",
        "0.7",
        "--resume",
        out_dir.join("ckpt_am_m0.50_s1_epoch2.amsn").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(3));
    assert!(stderr(&r).contains("fingerprint"), "{}", stderr(&r));
}

#[test]
fn eval_rejects_corrupted_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_tiny_corpus(dir.path());
    let mut cfg = TrainConfig::desk();
    cfg.model = ModelConfig::tiny();
    cfg.batch_size = 8;
    let state = TrainState::new(&cfg).unwrap();
    let ckpt = dir.path().join("x.amsn");
    save_checkpoint(&state, &ckpt).unwrap();
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[0] = b'Z';
    std::fs::write(&ckpt, bytes).unwrap();
    let r = run(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(3));
    assert!(stderr(&r).contains("magic"), "{}", stderr(&r));
}

#[test]
fn sweep_ranges_and_summary_columns() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_tiny_corpus(dir.path());
    let cfg_path = dir.path().join("train.conf");
    std::fs::write(&cfg_path, tiny_train_config()).unwrap();

    // single-point range
    let out_single = dir.path().join("single");
    let r = run(&[
        "sweep",
        "--config",
        cfg_path.to_str().unwrap(),
        "--margins",
        "0.5:0.5:0.05",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_single.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let summary = std::fs::read_to_string(out_single.join("sweep_summary.csv")).unwrap();
    assert!(summary.starts_with("epoch,baseline,m=0.50\n"), "{summary}");

    // empty range: baseline only
    let out_empty = dir.path().join("empty");
    let r = run(&[
        "sweep",
        "--config",
        cfg_path.to_str().unwrap(),
        "--margins",
        "",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_empty.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let summary = std::fs::read_to_string(out_empty.join("sweep_summary.csv")).unwrap();
    assert!(summary.starts_with("epoch,baseline\n"), "{summary}");

    // malformed range: usage error
    let r = run(&[
        "sweep",
        "--config",
        cfg_path.to_str().unwrap(),
        "--margins",
        "0.5:0.4",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_empty.to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn gradcheck_exit_codes_and_determinism() {
    let a = run(&["gradcheck", "--size", "tiny"]);
    assert!(a.status.success(), "{}", stderr(&a));
    let b = run(&["gradcheck", "--size", "tiny"]);
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).starts_with("module,worst_rel_err,threshold,status\n"));

    let r = run(&["gradcheck", "--size", "tiny", "--threshold", "0"]);
    assert_eq!(r.status.code(), Some(4));

    let r = run(&["gradcheck", "--size", "huge"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn export_filters_emits_consistent_csvs() {
    use rustfft::{num_complex::Complex, FftPlanner};

    let dir = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig::desk();
    cfg.model = ModelConfig::tiny();
    cfg.batch_size = 8;
    let state = TrainState::new(&cfg).unwrap();
    let ckpt = dir.path().join("fresh.amsn");
    save_checkpoint(&state, &ckpt).unwrap();

    let out = dir.path().join("export");
    let r = run(&[
        "export-filters",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));

    let (filters, len) = (cfg.model.sinc_filters, cfg.model.sinc_kernel_len);
    let taps_text = std::fs::read_to_string(out.join("filters_taps.csv")).unwrap();
    let tap_rows: Vec<&str> = taps_text.lines().skip(1).collect();
    assert_eq!(tap_rows.len(), filters * len);

    // freshly mel-initialized: cutoffs monotone in filter id
    let mut last_f1 = -1.0f64;
    for f in 0..filters {
        let fields: Vec<&str> = tap_rows[f * len].split(',').collect();
        let f1: f64 = fields[1].parse().unwrap();
        let f2: f64 = fields[2].parse().unwrap();
        assert!(f1 > last_f1, "filter {f}");
        assert!(f2 > f1);
        last_f1 = f1;
    }

    // response CSV matches an offline FFT of the tap CSV
    let mut taps = vec![vec![0.0f64; len]; filters];
    for row in &tap_rows {
        let fields: Vec<&str> = row.split(',').collect();
        let f: usize = fields[0].parse().unwrap();
        let i: usize = fields[3].parse().unwrap();
        taps[f][i] = fields[4].parse().unwrap();
    }
    let resp_text = std::fs::read_to_string(out.join("filters_response.csv")).unwrap();
    let resp_rows: Vec<&str> = resp_text.lines().skip(1).collect();
    assert_eq!(resp_rows.len(), filters * 2049);

    let fft_size = 4096;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_size);
    for f in 0..filters {
        let mut buf: Vec<Complex<f64>> = (0..fft_size)
            .map(|i| Complex::new(taps[f].get(i).copied().unwrap_or(0.0), 0.0))
            .collect();
        fft.process(&mut buf);
        for k in (0..=fft_size / 2).step_by(257) {
            let expect = 20.0 * (buf[k].norm() + 1e-12).log10();
            let fields: Vec<&str> = resp_rows[f * 2049 + k].split(',').collect();
            let got: f64 = fields[2].parse().unwrap();
            assert!((got - expect).abs() < 1e-9, "filter {f} bin {k}: {got} vs {expect}");
        }
    }
}
