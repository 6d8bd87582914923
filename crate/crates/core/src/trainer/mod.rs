//! Training/evaluation harness: batch sampling, the epoch loop, frame
//! error rate evaluation, metrics logging, checkpointing and the margin
//! sweep.
//!
//! An epoch is a fixed number of uniformly sampled (with replacement)
//! batches. Train rows report metrics accumulated over the epoch's own
//! batches; test rows come from full passes over the test set at epoch 0,
//! every `eval_every` epochs and at the end. The whole pipeline is
//! bit-reproducible given (config, seed): batch schedules derive from a
//! dedicated ChaCha stream that checkpoints snapshot exactly.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, load_checkpoint_with_sidecar, save_checkpoint};
pub use config::TrainConfig;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::{self, LossConfig, LossKind};
use crate::ndarr::Tensor;
use crate::network::Model;
use crate::optim::{rmsprop_step, OptimState};
use crate::signal::{FrameDataset, Split};

const EVAL_BATCH: usize = 64;

/// Everything needed to continue training: parameters, optimizer
/// accumulators, epoch counter and the exact RNG position.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub optim: OptimState,
    pub epoch: u32,
    pub rng: ChaCha8Rng,
    pub fingerprint: String,
    pub config_text: String,
}

impl TrainState {
    /// Initializes parameters from stream 0 of the seed and the batch
    /// schedule from stream 1, so the schedule does not depend on how many
    /// draws initialization used.
    pub fn new(cfg: &TrainConfig) -> Result<TrainState> {
        cfg.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        init_rng.set_stream(0);
        let model = Model::new(&cfg.model, &mut init_rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(TrainState {
            model,
            optim: OptimState::default(),
            epoch: 0,
            rng,
            fingerprint: cfg.fingerprint(),
            config_text: cfg.to_text(),
        })
    }
}

/// Uniform-with-replacement batch of frames and labels.
pub fn sample_batch(
    ds: &FrameDataset,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<usize>)> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let indices: Vec<usize> = (0..batch_size).map(|_| rng.gen_range(0..ds.len())).collect();
    Ok(ds.gather(&indices))
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub fer_percent: f64,
    pub margin_stat: f64,
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs `batches_per_epoch` optimization steps and returns metrics
/// accumulated over those batches. The epoch counter advances by one.
pub fn train_epoch(
    state: &mut TrainState,
    train_ds: &FrameDataset,
    cfg: &TrainConfig,
) -> Result<EpochStats> {
    let mut loss_sum = 0.0;
    let mut errors = 0usize;
    let mut margin_sum = 0.0;
    let mut samples = 0usize;
    for batch_idx in 0..cfg.batches_per_epoch {
        let (frames, labels) = sample_batch(train_ds, cfg.batch_size, &mut state.rng)?;
        let (emb, cache) = state.model.forward_train(&frames, &mut state.rng)?;
        let out = loss::compute(&emb, &state.model.classifier, &labels, &cfg.loss).map_err(
            |e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss {
                    batch: batch_idx as usize,
                },
                other => other,
            },
        )?;
        if !out.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                batch: batch_idx as usize,
            });
        }
        let mut grads = state.model.backward(&out.grad_embeddings, &cache)?;
        grads.insert("classifier.w".to_string(), out.grad_w.clone());

        let TrainState { model, optim, .. } = state;
        let mut params = model.params_mut();
        rmsprop_step(&mut params, &grads, optim, &cfg.optim)?;

        loss_sum += out.loss;
        for (i, &y) in labels.iter().enumerate() {
            if argmax_row(out.posteriors.row(i)) != y {
                errors += 1;
            }
        }
        margin_sum += loss::per_sample_margins(&emb, &state.model.classifier, &labels)?
            .iter()
            .sum::<f64>();
        samples += labels.len();
    }
    state.epoch += 1;
    Ok(EpochStats {
        mean_loss: loss_sum / cfg.batches_per_epoch as f64,
        fer_percent: 100.0 * errors as f64 / samples as f64,
        margin_stat: margin_sum / samples as f64,
    })
}

/// Classifies every frame via argmax of the margin-free posteriors.
/// Returns (FER %, mean loss, mean decision margin); no parameters change.
pub fn evaluate_fer(model: &Model, loss_cfg: &LossConfig, ds: &FrameDataset) -> Result<(f64, f64, f64)> {
    evaluate_fer_with_batch(model, loss_cfg, ds, EVAL_BATCH)
}

/// Same as [`evaluate_fer`] with an explicit partition size; results are
/// invariant to it (every quantity is per-sample).
pub fn evaluate_fer_with_batch(
    model: &Model,
    loss_cfg: &LossConfig,
    ds: &FrameDataset,
    batch: usize,
) -> Result<(f64, f64, f64)> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = ds.len();
    let mut errors = 0usize;
    let mut loss_sum = 0.0;
    let mut margin_sum = 0.0;
    let mut start = 0usize;
    while start < n {
        let end = (start + batch).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let (frames, labels) = ds.gather(&indices);
        let (emb, _) = model.forward(&frames)?;
        let out = loss::compute(&emb, &model.classifier, &labels, loss_cfg)?;
        for (i, &y) in labels.iter().enumerate() {
            if argmax_row(out.posteriors.row(i)) != y {
                errors += 1;
            }
        }
        loss_sum += out.loss * labels.len() as f64;
        margin_sum += loss::per_sample_margins(&emb, &model.classifier, &labels)?
            .iter()
            .sum::<f64>();
        start = end;
    }
    Ok((
        100.0 * errors as f64 / n as f64,
        loss_sum / n as f64,
        margin_sum / n as f64,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: u32,
    pub split: Split,
    pub loss: f64,
    pub fer_percent: f64,
    pub margin_stat: f64,
    pub wall_ms: u64,
}

/// `epoch,split,loss,fer_percent,margin_stat,wall_ms` with '.' decimals.
pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("epoch,split,loss,fer_percent,margin_stat,wall_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.split, r.loss, r.fer_percent, r.margin_stat, r.wall_ms
        ));
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, metrics_to_csv(rows))?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let p: Vec<&str> = line.split(',').collect();
        if p.len() != 6 {
            return Err(Error::Config(format!("metrics line {}: bad column count", idx + 1)));
        }
        let split = match p[1] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(Error::Config(format!("metrics line {}: bad split {other:?}", idx + 1))),
        };
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("metrics line {}: bad number {s:?}", idx + 1)))
        };
        rows.push(MetricsRow {
            epoch: p[0]
                .parse()
                .map_err(|_| Error::Config(format!("metrics line {}: bad epoch", idx + 1)))?,
            split,
            loss: parse_f(p[2])?,
            fer_percent: parse_f(p[3])?,
            margin_stat: parse_f(p[4])?,
            wall_ms: p[5]
                .parse()
                .map_err(|_| Error::Config(format!("metrics line {}: bad wall_ms", idx + 1)))?,
        });
    }
    Ok(rows)
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub run_id: String,
}

#[derive(Debug)]
pub struct RunResult {
    pub metrics: Vec<MetricsRow>,
    pub state: TrainState,
}

/// Full training loop. Evaluates the test split before any update (epoch
/// 0), after every `eval_every`-th epoch and at the last epoch;
/// checkpoints are written at each test evaluation when `out` is given.
/// Pass `resume` to continue from a loaded checkpoint.
pub fn run_training(
    cfg: &TrainConfig,
    train_ds: &FrameDataset,
    test_ds: &FrameDataset,
    resume: Option<TrainState>,
    out: Option<&RunOutput>,
) -> Result<RunResult> {
    cfg.validate()?;
    if cfg.batch_size > train_ds.len() {
        return Err(Error::Config(format!(
            "batch size {} exceeds train set size {}",
            cfg.batch_size,
            train_ds.len()
        )));
    }
    if train_ds.frame_len != cfg.model.frame_len {
        return Err(Error::Config(format!(
            "dataset frame length {} does not match model frame length {}",
            train_ds.frame_len, cfg.model.frame_len
        )));
    }
    let mut state = match resume {
        Some(s) => {
            let expected = cfg.fingerprint();
            if s.fingerprint != expected {
                return Err(crate::error::CheckpointError::FingerprintMismatch {
                    expected,
                    found: s.fingerprint,
                }
                .into());
            }
            s
        }
        None => TrainState::new(cfg)?,
    };
    let mut metrics = Vec::new();

    if state.epoch == 0 {
        let t0 = Instant::now();
        let (fer, loss, margin) = evaluate_fer(&state.model, &cfg.loss, test_ds)?;
        metrics.push(MetricsRow {
            epoch: 0,
            split: Split::Test,
            loss,
            fer_percent: fer,
            margin_stat: margin,
            wall_ms: t0.elapsed().as_millis() as u64,
        });
    }

    for epoch in state.epoch + 1..=cfg.epochs {
        let t0 = Instant::now();
        let stats = train_epoch(&mut state, train_ds, cfg)?;
        metrics.push(MetricsRow {
            epoch,
            split: Split::Train,
            loss: stats.mean_loss,
            fer_percent: stats.fer_percent,
            margin_stat: stats.margin_stat,
            wall_ms: t0.elapsed().as_millis() as u64,
        });
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let t1 = Instant::now();
            let (fer, loss, margin) = evaluate_fer(&state.model, &cfg.loss, test_ds)?;
            metrics.push(MetricsRow {
                epoch,
                split: Split::Test,
                loss,
                fer_percent: fer,
                margin_stat: margin,
                wall_ms: t1.elapsed().as_millis() as u64,
            });
            if let Some(out) = out {
                let path = out.dir.join(format!("ckpt_{}_epoch{epoch}.amsn", out.run_id));
                save_checkpoint(&state, &path)?;
            }
        }
    }

    if let Some(out) = out {
        write_metrics_csv(&out.dir.join(format!("metrics_{}.csv", out.run_id)), &metrics)?;
    }
    Ok(RunResult { metrics, state })
}

/// One margin-sweep summary: test FER per evaluation epoch, one column per
/// run (baseline first).
#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub eval_epochs: Vec<u32>,
    /// `baseline`, then `m=0.35`, ... in the order given.
    pub columns: Vec<String>,
    /// `fer[row][col]` aligned with `eval_epochs` x `columns`.
    pub fer: Vec<Vec<f64>>,
}

impl SweepSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (i, &e) in self.eval_epochs.iter().enumerate() {
            out.push_str(&e.to_string());
            for v in &self.fer[i] {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Trains the softmax baseline plus one margin run per entry in `margins`,
/// all from the same seed, and collects their test FER columns. Per-run
/// metrics CSVs and `sweep_summary.csv` land in `out_dir` when given.
pub fn margin_sweep(
    base: &TrainConfig,
    margins: &[f64],
    train_ds: &FrameDataset,
    test_ds: &FrameDataset,
    out_dir: Option<&Path>,
) -> Result<SweepSummary> {
    let mut columns = vec!["baseline".to_string()];
    let mut run_cfgs = Vec::new();
    {
        let mut cfg = base.clone();
        cfg.loss.kind = LossKind::Softmax;
        run_cfgs.push(("baseline".to_string(), cfg));
    }
    for &m in margins {
        if !(0.0..1.0).contains(&m) {
            return Err(Error::Config(format!("margin {m} outside [0,1)")));
        }
        let mut cfg = base.clone();
        cfg.loss.kind = LossKind::AmSoftmax;
        cfg.loss.m = m;
        columns.push(format!("m={m:.2}"));
        run_cfgs.push((format!("m{m:.2}"), cfg));
    }

    let mut eval_epochs: Vec<u32> = Vec::new();
    let mut per_run_fer: Vec<Vec<f64>> = Vec::new();
    for (run_id, cfg) in &run_cfgs {
        let out = out_dir.map(|d| RunOutput {
            dir: d.to_path_buf(),
            run_id: run_id.clone(),
        });
        let result = run_training(cfg, train_ds, test_ds, None, out.as_ref())?;
        let epochs: Vec<u32> = result
            .metrics
            .iter()
            .filter(|r| r.split == Split::Test)
            .map(|r| r.epoch)
            .collect();
        let fer: Vec<f64> = result
            .metrics
            .iter()
            .filter(|r| r.split == Split::Test)
            .map(|r| r.fer_percent)
            .collect();
        if eval_epochs.is_empty() {
            eval_epochs = epochs;
        } else if eval_epochs != epochs {
            return Err(Error::Config("sweep runs disagree on eval epochs".to_string()));
        }
        per_run_fer.push(fer);
    }

    let fer: Vec<Vec<f64>> = (0..eval_epochs.len())
        .map(|row| per_run_fer.iter().map(|col| col[row]).collect())
        .collect();
    let summary = SweepSummary {
        eval_epochs,
        columns,
        fer,
    };
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("sweep_summary.csv"), summary.to_csv())?;
    }
    Ok(summary)
}
