//! Training configuration and its flat `key=value` text codec.
//!
//! The text form is canonical: keys sorted, one per line, `#` comments and
//! blank lines ignored on parse. The config fingerprint stored in
//! checkpoints is the FNV-1a hash of this canonical text, so any change to
//! any field refuses to resume.

use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossKind};
use crate::network::ModelConfig;
use crate::optim::OptimConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u32,
    pub batches_per_epoch: u32,
    pub seed: u64,
    /// The engine is deterministic by construction (fixed-order reductions
    /// partitioned by output coordinate); the flag is recorded in configs
    /// and fingerprints for forward compatibility.
    pub deterministic: bool,
    pub eval_every: u32,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    /// Full-scale recipe: mini-batches of 128, 352 epochs of 800 batches.
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 352,
            batches_per_epoch: 800,
            seed: 1,
            deterministic: true,
            eval_every: 16,
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            model: ModelConfig::paper(8),
        }
    }
}

impl TrainConfig {
    /// Desk-scale recipe that finishes in minutes on a CPU: 8 kHz corpus,
    /// 40 epochs of 50 batches of 16 frames.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            epochs: 40,
            batches_per_epoch: 50,
            seed: 1,
            deterministic: true,
            eval_every: 10,
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            model: ModelConfig::desk(8, 1600, 8000),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.batches_per_epoch == 0 {
            return Err(Error::Config("counts must be positive".to_string()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".to_string()));
        }
        self.loss.validate()?;
        self.optim.validate()?;
        self.model.validate()
    }

    /// Canonical text form: sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        let l = &self.loss;
        let m = &self.model;
        let o = &self.optim;
        let kind = match l.kind {
            LossKind::Softmax => "softmax",
            LossKind::AmSoftmax => "am_softmax",
        };
        format!(
            "loss.eps_div={:?}\n\
             loss.eps_norm={:?}\n\
             loss.kind={kind}\n\
             loss.m={:?}\n\
             loss.normalize_baseline={}\n\
             loss.s={:?}\n\
             model.conv.filters={}\n\
             model.conv.kernel_len={}\n\
             model.dense.width={}\n\
             model.dropout={:?}\n\
             model.frame_len={}\n\
             model.leaky_slope={:?}\n\
             model.num_speakers={}\n\
             model.pool_width={}\n\
             model.rectify_sinc={}\n\
             model.sample_rate_hz={}\n\
             model.sinc.filters={}\n\
             model.sinc.kernel_len={}\n\
             optim.alpha={:?}\n\
             optim.eps={:?}\n\
             optim.lr={:?}\n\
             train.batch_size={}\n\
             train.batches_per_epoch={}\n\
             train.deterministic={}\n\
             train.epochs={}\n\
             train.eval_every={}\n\
             train.seed={}\n",
            l.eps_div,
            l.eps_norm,
            l.m,
            l.normalize_baseline,
            l.s,
            m.conv_filters,
            m.conv_kernel_len,
            m.dense_width,
            m.dropout,
            m.frame_len,
            m.leaky_slope,
            m.num_speakers,
            m.pool_width,
            m.rectify_sinc,
            m.sample_rate_hz,
            m.sinc_filters,
            m.sinc_kernel_len,
            o.alpha,
            o.eps,
            o.lr,
            self.batch_size,
            self.batches_per_epoch,
            self.deterministic,
            self.epochs,
            self.eval_every,
            self.seed,
        )
    }

    /// Parses `key=value` lines over a base config; errors name the line
    /// and field.
    pub fn from_text(text: &str, base: TrainConfig) -> Result<TrainConfig> {
        let mut cfg = base;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = idx + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {lineno}: expected key=value, got {line:?}"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                Error::Config(format!(
                    "line {lineno}: invalid {what} for {key:?}: {value:?}"
                ))
            };
            macro_rules! parse {
                ($t:ty, $what:expr) => {
                    value.parse::<$t>().map_err(|_| bad($what))?
                };
            }
            match key {
                "loss.eps_div" => cfg.loss.eps_div = parse!(f64, "number"),
                "loss.eps_norm" => cfg.loss.eps_norm = parse!(f64, "number"),
                "loss.kind" => {
                    cfg.loss.kind = match value {
                        "softmax" => LossKind::Softmax,
                        "am_softmax" | "am" => LossKind::AmSoftmax,
                        _ => return Err(bad("loss kind (softmax|am_softmax)")),
                    }
                }
                "loss.m" => cfg.loss.m = parse!(f64, "number"),
                "loss.normalize_baseline" => cfg.loss.normalize_baseline = parse!(bool, "bool"),
                "loss.s" => cfg.loss.s = parse!(f64, "number"),
                "model.conv.filters" => cfg.model.conv_filters = parse!(usize, "integer"),
                "model.conv.kernel_len" => cfg.model.conv_kernel_len = parse!(usize, "integer"),
                "model.dense.width" => cfg.model.dense_width = parse!(usize, "integer"),
                "model.dropout" => cfg.model.dropout = parse!(f64, "number"),
                "model.frame_len" => cfg.model.frame_len = parse!(usize, "integer"),
                "model.leaky_slope" => cfg.model.leaky_slope = parse!(f64, "number"),
                "model.num_speakers" => cfg.model.num_speakers = parse!(usize, "integer"),
                "model.pool_width" => cfg.model.pool_width = parse!(usize, "integer"),
                "model.rectify_sinc" => cfg.model.rectify_sinc = parse!(bool, "bool"),
                "model.sample_rate_hz" => cfg.model.sample_rate_hz = parse!(u32, "integer"),
                "model.sinc.filters" => cfg.model.sinc_filters = parse!(usize, "integer"),
                "model.sinc.kernel_len" => cfg.model.sinc_kernel_len = parse!(usize, "integer"),
                "optim.alpha" => cfg.optim.alpha = parse!(f64, "number"),
                "optim.eps" => cfg.optim.eps = parse!(f64, "number"),
                "optim.lr" => cfg.optim.lr = parse!(f64, "number"),
                "train.batch_size" => cfg.batch_size = parse!(usize, "integer"),
                "train.batches_per_epoch" => cfg.batches_per_epoch = parse!(u32, "integer"),
                "train.deterministic" => cfg.deterministic = parse!(bool, "bool"),
                "train.epochs" => cfg.epochs = parse!(u32, "integer"),
                "train.eval_every" => cfg.eval_every = parse!(u32, "integer"),
                "train.seed" => cfg.seed = parse!(u64, "integer"),
                _ => return Err(Error::Config(format!("line {lineno}: unknown key {key:?}"))),
            }
        }
        Ok(cfg)
    }

    /// FNV-1a hash of the canonical text, as 16 hex digits.
    pub fn fingerprint(&self) -> String {
        format!("{:016x}", fnv1a64(self.to_text().as_bytes()))
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_exact() {
        let mut cfg = TrainConfig::desk();
        cfg.loss.m = 0.55;
        cfg.optim.lr = 0.00123;
        cfg.seed = 987654321;
        let text = cfg.to_text();
        let back = TrainConfig::from_text(&text, TrainConfig::default()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn parse_errors_name_line_and_field() {
        let err = TrainConfig::from_text("train.seed=1\nbogus.key=2\n", TrainConfig::desk())
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2") && err.contains("bogus.key"), "{err}");

        let err = TrainConfig::from_text("train.epochs=abc\n", TrainConfig::desk())
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 1") && err.contains("train.epochs"), "{err}");

        let err = TrainConfig::from_text("no_equals_here\n", TrainConfig::desk())
            .unwrap_err()
            .to_string();
        assert!(err.contains("key=value"), "{err}");
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = TrainConfig::from_text(
            "# a comment\n\n  train.seed = 42 \n",
            TrainConfig::desk(),
        )
        .unwrap();
        assert_eq!(cfg.seed, 42);
    }

    #[test]
    fn fingerprint_tracks_any_field() {
        let a = TrainConfig::desk();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.loss.m += 0.01;
        assert_ne!(a.fingerprint(), b.fingerprint());
        let mut c = a.clone();
        c.seed += 1;
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
