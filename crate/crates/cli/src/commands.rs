//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use amsincnet_core::error::{Error, Result};
use amsincnet_core::gradcheck::{self, CheckSize};
use amsincnet_core::loss::LossKind;
use amsincnet_core::signal::{
    load_dataset, synth_utterance, write_manifest, write_wav, ChunkingConfig, FrameDataset,
    ManifestRow, Split,
};
use amsincnet_core::sincbank::{build_filters, frequency_response};
use amsincnet_core::trainer::{
    evaluate_fer, load_checkpoint, load_checkpoint_with_sidecar, margin_sweep, run_training,
    RunOutput, TrainConfig,
};

use crate::spec_file::{corpus_spec_text, parse_corpus_spec};

const EXPORT_FFT_SIZE: usize = 4096;

/// Writes the run manifest before any long-running work starts.
fn write_run_manifest(out: &Path, command: &str, config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let text = format!(
        "command={command}\nconfig={}\nseed={}\nout={}\nversion={}\ntimestamp={timestamp}\n",
        config.map(|p| p.display().to_string()).unwrap_or_else(|| "-".to_string()),
        seed.map(|s| s.to_string()).unwrap_or_else(|| "-".to_string()),
        out.display(),
        env!("CARGO_PKG_VERSION"),
    );
    std::fs::write(out.join("run_manifest.txt"), text)?;
    Ok(())
}

fn data_chunking(data: &Path) -> Result<ChunkingConfig> {
    let spec_path = data.join("corpus_spec.conf");
    if spec_path.exists() {
        let spec = parse_corpus_spec(&std::fs::read_to_string(&spec_path)?)?;
        Ok(spec.chunking)
    } else {
        Ok(ChunkingConfig::default())
    }
}

fn load_split(data: &Path, split: Split) -> Result<FrameDataset> {
    let manifest = data.join("manifest.csv");
    if !manifest.exists() {
        return Err(Error::Config(format!(
            "data directory {} has no manifest.csv",
            data.display()
        )));
    }
    load_dataset(data, &data_chunking(data)?, split)
}

pub fn synth(spec_path: &Path, out: &Path) -> Result<ExitCode> {
    let spec = parse_corpus_spec(&std::fs::read_to_string(spec_path)?)?;
    std::fs::create_dir_all(out)?;
    write_run_manifest(out, "synth", Some(spec_path), Some(spec.seed))?;
    std::fs::write(out.join("corpus_spec.conf"), corpus_spec_text(&spec))?;

    let mut rows = Vec::new();
    for speaker in 0..spec.num_speakers {
        for utt in 0..spec.utterances_per_speaker {
            let wave = synth_utterance(&spec, speaker, utt);
            let name = format!("spk{speaker:03}_utt{utt:02}.wav");
            write_wav(&out.join(&name), &wave)?;
            rows.push(ManifestRow {
                path: name,
                speaker_id: speaker,
                split: if utt < spec.train_per_speaker {
                    Split::Train
                } else {
                    Split::Test
                },
            });
        }
    }
    write_manifest(out, &rows)?;
    println!(
        "wrote {} utterances for {} speakers to {}",
        rows.len(),
        spec.num_speakers,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub loss: Option<String>,
    pub margin: Option<f64>,
    pub resume: Option<PathBuf>,
}

fn apply_loss_overrides(cfg: &mut TrainConfig, loss: &Option<String>, margin: Option<f64>) {
    if let Some(kind) = loss {
        cfg.loss.kind = match kind.as_str() {
            "softmax" => LossKind::Softmax,
            _ => LossKind::AmSoftmax,
        };
    }
    if let Some(m) = margin {
        cfg.loss.m = m;
    }
}

fn run_id(cfg: &TrainConfig) -> String {
    match cfg.loss.kind {
        LossKind::Softmax => format!("softmax_s{}", cfg.seed),
        LossKind::AmSoftmax => format!("am_m{:.2}_s{}", cfg.loss.m, cfg.seed),
    }
}

pub fn train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg = TrainConfig::from_text(&std::fs::read_to_string(&args.config)?, TrainConfig::default())?;
    apply_loss_overrides(&mut cfg, &args.loss, args.margin);
    cfg.validate()?;

    let train_ds = load_split(&args.data, Split::Train)?;
    let test_ds = load_split(&args.data, Split::Test)?;
    if train_ds.num_speakers != cfg.model.num_speakers {
        return Err(Error::Config(format!(
            "dataset has {} speakers but model.num_speakers={}",
            train_ds.num_speakers, cfg.model.num_speakers
        )));
    }

    std::fs::create_dir_all(&args.out)?;
    write_run_manifest(&args.out, "train", Some(&args.config), Some(cfg.seed))?;
    std::fs::write(args.out.join("train_config.conf"), cfg.to_text())?;

    let resume_state = match &args.resume {
        Some(path) => Some(load_checkpoint(path, &cfg)?),
        None => None,
    };
    let out = RunOutput {
        dir: args.out.clone(),
        run_id: run_id(&cfg),
    };
    let result = run_training(&cfg, &train_ds, &test_ds, resume_state, Some(&out))?;
    if let Some(last) = result
        .metrics
        .iter()
        .rev()
        .find(|r| r.split == Split::Test)
    {
        println!(
            "run {} finished: epoch {} test fer {:.4}% loss {:.6} margin {:.6}",
            out.run_id, last.epoch, last.fer_percent, last.loss, last.margin_stat
        );
    }
    println!("metrics: {}", args.out.join(format!("metrics_{}.csv", out.run_id)).display());
    Ok(ExitCode::SUCCESS)
}

pub fn eval(ckpt: &Path, data: &Path, split: Split) -> Result<ExitCode> {
    let (state, cfg) = load_checkpoint_with_sidecar(ckpt)?;
    let ds = load_split(data, split)?;
    let (fer, loss, margin) = evaluate_fer(&state.model, &cfg.loss, &ds)?;
    println!("fer_percent,loss,margin_stat");
    println!("{fer},{loss},{margin}");
    Ok(ExitCode::SUCCESS)
}

/// `start:end:step`, inclusive; empty means no margin runs.
pub fn parse_margin_range(s: &str) -> Option<Vec<f64>> {
    let t = s.trim();
    if t.is_empty() {
        return Some(Vec::new());
    }
    let parts: Vec<&str> = t.split(':').collect();
    if parts.len() != 3 {
        return None;
    }
    let start: f64 = parts[0].parse().ok()?;
    let end: f64 = parts[1].parse().ok()?;
    let step: f64 = parts[2].parse().ok()?;
    if !(step > 0.0) || end < start || !start.is_finite() || !end.is_finite() {
        return None;
    }
    let count = ((end - start) / step + 1e-6).floor() as usize + 1;
    Some((0..count).map(|k| start + k as f64 * step).collect())
}

pub fn sweep(config: &Path, margins: &[f64], data: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = TrainConfig::from_text(&std::fs::read_to_string(config)?, TrainConfig::default())?;
    cfg.validate()?;
    let train_ds = load_split(data, Split::Train)?;
    let test_ds = load_split(data, Split::Test)?;
    std::fs::create_dir_all(out)?;
    write_run_manifest(out, "sweep", Some(config), Some(cfg.seed))?;
    let summary = margin_sweep(&cfg, margins, &train_ds, &test_ds, Some(out))?;
    print!("{}", summary.to_csv());
    println!("summary: {}", out.join("sweep_summary.csv").display());
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck_cmd(size: CheckSize, threshold: f64) -> Result<ExitCode> {
    let reports = gradcheck::run_suite(size)?;
    let mut all_pass = true;
    println!("module,worst_rel_err,threshold,status");
    for r in &reports {
        let pass = r.passes(threshold);
        all_pass &= pass;
        println!(
            "{},{:e},{:e},{}",
            r.module,
            r.worst_rel_err,
            threshold,
            if pass { "pass" } else { "FAIL" }
        );
    }
    Ok(if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(4)
    })
}

pub fn export_filters(ckpt: &Path, out: &Path) -> Result<ExitCode> {
    let (state, cfg) = load_checkpoint_with_sidecar(ckpt)?;
    std::fs::create_dir_all(out)?;
    write_run_manifest(out, "export-filters", None, Some(cfg.seed))?;

    let bank = build_filters(&state.model.sinc);
    let fs = cfg.model.sample_rate_hz;
    let f1_hz = bank.cutoffs.f1_hz(fs);
    let f2_hz = bank.cutoffs.f2_hz(fs);
    let len = cfg.model.sinc_kernel_len;

    let mut taps_csv = String::from("filter_id,f1_hz,f2_hz,tap_index,tap_value\n");
    for f in 0..cfg.model.sinc_filters {
        let row = &bank.taps.data()[f * len..(f + 1) * len];
        for (i, v) in row.iter().enumerate() {
            taps_csv.push_str(&format!("{f},{},{},{i},{v}\n", f1_hz[f], f2_hz[f]));
        }
    }
    std::fs::write(out.join("filters_taps.csv"), taps_csv)?;

    let mut resp_csv = String::from("filter_id,freq_hz,magnitude_db\n");
    for f in 0..cfg.model.sinc_filters {
        let row = &bank.taps.data()[f * len..(f + 1) * len];
        for (freq, db) in frequency_response(row, EXPORT_FFT_SIZE, fs) {
            resp_csv.push_str(&format!("{f},{freq},{db}\n"));
        }
    }
    std::fs::write(out.join("filters_response.csv"), resp_csv)?;
    println!(
        "wrote {} and {}",
        out.join("filters_taps.csv").display(),
        out.join("filters_response.csv").display()
    );
    Ok(ExitCode::SUCCESS)
}
