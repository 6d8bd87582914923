//! Classifier heads: additive-margin softmax on L2-normalized embeddings
//! and classifier rows, plus the plain softmax cross-entropy baseline.
//!
//! The margin head computes, with f-hat and W-hat row-normalized and
//! `cos[i,j] = W-hat_j . f-hat_i`,
//!
//! ```text
//! z[i,j] = s * cos[i,j] - s * m * [j == y_i]
//! loss   = mean_i ( logsumexp_j z[i,j] - z[i,y_i] )
//! ```
//!
//! which is the log-space form of the exp-ratio definition. The literal
//! direct-exponential evaluation (with its 1e-11 denominator guard) is kept
//! in [`am_softmax_reference`] as a cross-check; the log-space path is the
//! one that stays stable at s = 30, where a single exponential already
//! reaches 1e13.
//!
//! Posteriors are always computed from the margin-free logits `s * cos`:
//! the margin shapes the training boundary and would need the unknown true
//! class to apply at inference.

use crate::error::{Error, Result};
use crate::ndarr::{logsumexp_rows, matmul, matmul_nt, matmul_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Softmax,
    AmSoftmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Cosine scale, fixed (not learned).
    pub s: f64,
    /// Additive margin on the target cosine.
    pub m: f64,
    /// Denominator guard of the reference exp-ratio path.
    pub eps_div: f64,
    /// Row-norm guard of the L2 normalization.
    pub eps_norm: f64,
    /// Run the softmax baseline on normalized cosine logits too
    /// (equivalent to the margin head with m = 0).
    pub normalize_baseline: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::AmSoftmax,
            s: 30.0,
            m: 0.5,
            eps_div: 1e-11,
            eps_norm: 1e-12,
            normalize_baseline: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) {
            return Err(Error::Config(format!(
                "loss scale s must be positive, got {}",
                self.s
            )));
        }
        if !(0.0..1.0).contains(&self.m) {
            return Err(Error::Config(format!("margin m must lie in [0,1), got {}", self.m)));
        }
        if !(self.eps_div > 0.0 && self.eps_norm > 0.0) {
            return Err(Error::Config("loss eps values must be positive".to_string()));
        }
        Ok(())
    }
}

/// Batch-mean loss with gradients for the embeddings and the classifier
/// matrix, plus margin-free posteriors for evaluation.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_embeddings: Tensor, // [n, D]
    pub grad_w: Tensor,          // [C, D]
    pub posteriors: Tensor,      // [n, C]
}

/// Divides each row by `max(||row||, eps)`; zero rows stay zero.
pub fn l2_normalize_rows(x: &Tensor, eps: f64) -> Tensor {
    let (n, d) = (x.dim(0), x.dim(1));
    let mut out = x.clone();
    for i in 0..n {
        let row = &mut out.data_mut()[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    out
}

/// Backward of [`l2_normalize_rows`]: for a row v with r = ||v|| >= eps,
/// `dv = (dv_hat - v_hat (v_hat . dv_hat)) / r`; degenerate rows get the
/// zero subgradient.
fn l2_normalize_rows_backward(grad_xhat: &Tensor, x: &Tensor, eps: f64) -> Tensor {
    let (n, d) = (x.dim(0), x.dim(1));
    let mut out = Tensor::zeros(x.shape());
    for i in 0..n {
        let row = &x.data()[i * d..(i + 1) * d];
        let g = &grad_xhat.data()[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < eps {
            continue;
        }
        let vhat: Vec<f64> = row.iter().map(|v| v / norm).collect();
        let proj: f64 = vhat.iter().zip(g).map(|(a, b)| a * b).sum();
        let o = &mut out.data_mut()[i * d..(i + 1) * d];
        for j in 0..d {
            o[j] = (g[j] - vhat[j] * proj) / norm;
        }
    }
    out
}

fn validate_inputs(emb: &Tensor, w: &Tensor, labels: &[usize], op: &'static str) -> Result<()> {
    if emb.rank() != 2 || w.rank() != 2 || emb.dim(1) != w.dim(1) {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("embeddings [n,D] and W [C,D], got emb {:?}", emb.shape()),
            got: format!("W {:?}", w.shape()),
        });
    }
    if labels.len() != emb.dim(0) {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("{} labels", emb.dim(0)),
            got: format!("{}", labels.len()),
        });
    }
    let classes = w.dim(0);
    for &y in labels {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
    }
    if !emb.all_finite() || !w.all_finite() {
        return Err(Error::NonFinite { op });
    }
    Ok(())
}

fn softmax_from_logits(logits: &Tensor) -> Result<Tensor> {
    let lse = logsumexp_rows(logits)?;
    let (n, c) = (logits.dim(0), logits.dim(1));
    let mut p = logits.clone();
    for i in 0..n {
        let l = lse.data()[i];
        for v in p.data_mut()[i * c..(i + 1) * c].iter_mut() {
            *v = (*v - l).exp();
        }
    }
    Ok(p)
}

/// Additive-margin softmax on L2-normalized embeddings and classifier rows.
pub fn am_softmax(emb: &Tensor, w: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<LossOutput> {
    validate_inputs(emb, w, labels, "am_softmax")?;
    cfg.validate()?;
    let (n, c) = (emb.dim(0), w.dim(0));

    let fhat = l2_normalize_rows(emb, cfg.eps_norm);
    let what = l2_normalize_rows(w, cfg.eps_norm);
    let cos = matmul_nt(&fhat, &what)?; // [n, C]

    let mut z = cos.scale(cfg.s);
    for (i, &y) in labels.iter().enumerate() {
        z.data_mut()[i * c + y] -= cfg.s * cfg.m;
    }
    let lse = logsumexp_rows(&z)?;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss += lse.data()[i] - z.data()[i * c + y];
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "am_softmax" });
    }

    // dL/dz = (softmax(z) - onehot)/n, then dcos = s * dz
    let mut dz = softmax_from_logits(&z)?;
    for (i, &y) in labels.iter().enumerate() {
        dz.data_mut()[i * c + y] -= 1.0;
    }
    let dcos = dz.scale(cfg.s / n as f64);
    let dfhat = matmul(&dcos, &what)?;
    let dwhat = matmul_tn(&dcos, &fhat)?;
    let grad_embeddings = l2_normalize_rows_backward(&dfhat, emb, cfg.eps_norm);
    let grad_w = l2_normalize_rows_backward(&dwhat, w, cfg.eps_norm);

    let posteriors = softmax_from_logits(&cos.scale(cfg.s))?;
    Ok(LossOutput {
        loss,
        grad_embeddings,
        grad_w,
        posteriors,
    })
}

/// Literal exp-ratio evaluation of the margin loss with the 1e-11
/// denominator guard. Loss value only; kept as a numerical cross-check for
/// the log-space path.
pub fn am_softmax_reference(emb: &Tensor, w: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<f64> {
    validate_inputs(emb, w, labels, "am_softmax_reference")?;
    let (n, c) = (emb.dim(0), w.dim(0));
    let fhat = l2_normalize_rows(emb, cfg.eps_norm);
    let what = l2_normalize_rows(w, cfg.eps_norm);
    let cos = matmul_nt(&fhat, &what)?;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let phi = (cfg.s * (cos.data()[i * c + y] - cfg.m)).exp();
        let mut others = 0.0;
        for j in 0..c {
            if j != y {
                others += (cfg.s * cos.data()[i * c + j]).exp();
            }
        }
        loss -= (phi / (phi + others + cfg.eps_div)).ln();
    }
    Ok(loss / n as f64)
}

/// Plain softmax cross-entropy on the unnormalized logits `emb . W^T`
/// (the baseline head). With `normalize_baseline` set it runs the
/// normalized cosine path at m = 0 instead.
pub fn softmax_ce(emb: &Tensor, w: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<LossOutput> {
    if cfg.normalize_baseline {
        let mut c = cfg.clone();
        c.m = 0.0;
        return am_softmax(emb, w, labels, &c);
    }
    validate_inputs(emb, w, labels, "softmax_ce")?;
    let (n, c) = (emb.dim(0), w.dim(0));
    let logits = matmul_nt(emb, w)?;
    let lse = logsumexp_rows(&logits)?;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss += lse.data()[i] - logits.data()[i * c + y];
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "softmax_ce" });
    }

    let posteriors = softmax_from_logits(&logits)?;
    let mut dlogits = posteriors.clone();
    for (i, &y) in labels.iter().enumerate() {
        dlogits.data_mut()[i * c + y] -= 1.0;
    }
    let dlogits = dlogits.scale(1.0 / n as f64);
    let grad_embeddings = matmul(&dlogits, w)?;
    let grad_w = matmul_tn(&dlogits, emb)?;
    Ok(LossOutput {
        loss,
        grad_embeddings,
        grad_w,
        posteriors,
    })
}

/// Dispatches on the configured head.
pub fn compute(emb: &Tensor, w: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<LossOutput> {
    match cfg.kind {
        LossKind::Softmax => softmax_ce(emb, w, labels, cfg),
        LossKind::AmSoftmax => am_softmax(emb, w, labels, cfg),
    }
}

/// Cosine margin of each sample: similarity to its own class row minus the
/// best similarity to any other row. Needs at least two classifier rows.
pub fn per_sample_margins(emb: &Tensor, w: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    validate_inputs(emb, w, labels, "decision_margin_stat")?;
    let c = w.dim(0);
    if c < 2 {
        return Err(Error::SingleClassBatch);
    }
    let eps = 1e-12;
    let fhat = l2_normalize_rows(emb, eps);
    let what = l2_normalize_rows(w, eps);
    let cos = matmul_nt(&fhat, &what)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = cos.row(i);
            let own = row[y];
            let other = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != y)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            own - other
        })
        .collect())
}

/// Mean of [`per_sample_margins`] over a batch that contains at least two
/// distinct classes.
pub fn decision_margin_stat(emb: &Tensor, w: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::SingleClassBatch);
    }
    let margins = per_sample_margins(emb, w, labels)?;
    Ok(margins.iter().sum::<f64>() / margins.len() as f64)
}
