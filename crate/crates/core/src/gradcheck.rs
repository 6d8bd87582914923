//! Finite-difference verification of every gradient path.
//!
//! Each check perturbs one coordinate at a time with a central difference
//! and compares against the analytic backward pass. The error reported per
//! module is `|analytic - fd| / max(|analytic|, |fd|, 0.01)`; the 0.01
//! floor keeps the ratio meaningful where the true gradient is near zero
//! and the finite difference resolves only rounding noise (~1e-9 at these
//! loss magnitudes), while still flagging any real defect, which shows up
//! orders of magnitude above the 1e-5 threshold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{self, LossConfig, LossKind};
use crate::ndarr::{conv1d_backward, conv1d_forward, dot, maxpool1d, maxpool1d_backward, Tensor};
use crate::network::{layernorm_backward, layernorm_forward, LnParams, Model, ModelConfig};
use crate::sincbank::{sinc_backward, sinc_forward, SincParams};

pub const DEFAULT_THRESHOLD: f64 = 1e-5;
const REL_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckSize {
    Tiny,
    Small,
}

impl CheckSize {
    pub fn parse(s: &str) -> Option<CheckSize> {
        match s {
            "tiny" => Some(CheckSize::Tiny),
            "small" => Some(CheckSize::Small),
            _ => None,
        }
    }

    fn model_config(self) -> ModelConfig {
        match self {
            CheckSize::Tiny => ModelConfig::tiny(),
            CheckSize::Small => ModelConfig {
                frame_len: 800,
                num_speakers: 4,
                sample_rate_hz: 16000,
                sinc_filters: 4,
                sinc_kernel_len: 33,
                conv_filters: 4,
                conv_kernel_len: 5,
                pool_width: 3,
                dense_width: 16,
                leaky_slope: 0.2,
                rectify_sinc: true,
                dropout: 0.0,
            },
        }
    }

    fn batch(self) -> usize {
        match self {
            CheckSize::Tiny => 2,
            CheckSize::Small => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModuleReport {
    pub module: &'static str,
    pub worst_rel_err: f64,
    pub coords_checked: usize,
}

impl ModuleReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.worst_rel_err < threshold
    }
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(REL_FLOOR)
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Runs every module's finite-difference check and returns one report per
/// module, deterministic across runs.
pub fn run_suite(size: CheckSize) -> Result<Vec<ModuleReport>> {
    Ok(vec![
        check_conv(size)?,
        check_maxpool(size)?,
        check_layernorm(size)?,
        check_sincbank(size)?,
        check_model(size, LossKind::Softmax)?,
        check_model(size, LossKind::AmSoftmax)?,
    ])
}

fn check_conv(size: CheckSize) -> Result<ModuleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (t, l) = match size {
        CheckSize::Tiny => (12usize, 4usize),
        CheckSize::Small => (20, 5),
    };
    let x = rand_tensor(&[2, 2, t], &mut rng);
    let k = rand_tensor(&[3, 2, l], &mut rng);
    let t_out = t - l + 1;
    let gy = rand_tensor(&[2, 3, t_out], &mut rng);
    let (gx, gk) = conv1d_backward(&gy, &x, &k, 1)?;
    let loss = |x: &Tensor, k: &Tensor| -> f64 {
        dot(conv1d_forward(x, k, 1).unwrap().data(), gy.data())
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut coords = 0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.data_mut()[i] += h;
        xm.data_mut()[i] -= h;
        let fd = (loss(&xp, &k) - loss(&xm, &k)) / (2.0 * h);
        worst = worst.max(rel_err(gx.data()[i], fd));
        coords += 1;
    }
    for i in 0..k.len() {
        let mut kp = k.clone();
        let mut km = k.clone();
        kp.data_mut()[i] += h;
        km.data_mut()[i] -= h;
        let fd = (loss(&x, &kp) - loss(&x, &km)) / (2.0 * h);
        worst = worst.max(rel_err(gk.data()[i], fd));
        coords += 1;
    }
    Ok(ModuleReport {
        module: "ndarr.conv1d",
        worst_rel_err: worst,
        coords_checked: coords,
    })
}

fn check_maxpool(size: CheckSize) -> Result<ModuleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let t = match size {
        CheckSize::Tiny => 9usize,
        CheckSize::Small => 18,
    };
    let x = rand_tensor(&[2, 2, t], &mut rng);
    let (y, argmax) = maxpool1d(&x, 3)?;
    let gy = rand_tensor(y.shape(), &mut rng);
    let gx = maxpool1d_backward(&gy, &argmax, x.shape())?;
    let loss = |x: &Tensor| -> f64 { dot(maxpool1d(x, 3).unwrap().0.data(), gy.data()) };
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.data_mut()[i] += h;
        xm.data_mut()[i] -= h;
        let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
        worst = worst.max(rel_err(gx.data()[i], fd));
    }
    Ok(ModuleReport {
        module: "ndarr.maxpool",
        worst_rel_err: worst,
        coords_checked: x.len(),
    })
}

fn check_layernorm(size: CheckSize) -> Result<ModuleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let feat = match size {
        CheckSize::Tiny => 7usize,
        CheckSize::Small => 19,
    };
    let x = rand_tensor(&[3, feat], &mut rng);
    let p = LnParams {
        gain: rand_tensor(&[feat], &mut rng),
        bias: rand_tensor(&[feat], &mut rng),
    };
    let gy = rand_tensor(&[3, feat], &mut rng);
    let (_, cache) = layernorm_forward(&x, &p)?;
    let (gx, ggain, gbias) = layernorm_backward(&gy, &cache, &p);
    let loss = |x: &Tensor, p: &LnParams| -> f64 {
        dot(layernorm_forward(x, p).unwrap().0.data(), gy.data())
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut coords = 0;
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.data_mut()[i] += h;
        xm.data_mut()[i] -= h;
        let fd = (loss(&xp, &p) - loss(&xm, &p)) / (2.0 * h);
        worst = worst.max(rel_err(gx.data()[i], fd));
        coords += 1;
    }
    for i in 0..feat {
        for which in 0..2 {
            let mut pp = p.clone();
            let mut pm = p.clone();
            let (tp, tm) = if which == 0 {
                (&mut pp.gain, &mut pm.gain)
            } else {
                (&mut pp.bias, &mut pm.bias)
            };
            tp.data_mut()[i] += h;
            tm.data_mut()[i] -= h;
            let fd = (loss(&x, &pp) - loss(&x, &pm)) / (2.0 * h);
            let a = if which == 0 { ggain.data()[i] } else { gbias.data()[i] };
            worst = worst.max(rel_err(a, fd));
            coords += 1;
        }
    }
    Ok(ModuleReport {
        module: "network.layernorm",
        worst_rel_err: worst,
        coords_checked: coords,
    })
}

fn check_sincbank(size: CheckSize) -> Result<ModuleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let (filters, t) = match size {
        CheckSize::Tiny => (3usize, 64usize),
        CheckSize::Small => (4, 96),
    };
    // raw values away from the |.| kink and both clamps
    let p = SincParams {
        f1_raw: Tensor::from_fn(&[filters], |_| {
            let v: f64 = rng.gen_range(0.01..0.12);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        }),
        band_raw: Tensor::from_fn(&[filters], |_| {
            let v: f64 = rng.gen_range(0.01..0.1);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        }),
        min_low_hz: 50.0,
        min_band_hz: 50.0,
        filter_len: 17,
        sample_rate_hz: 16000,
    };
    let x = rand_tensor(&[2, 1, t], &mut rng);
    let (y, cache) = sinc_forward(&x, &p)?;
    let gy = rand_tensor(y.shape(), &mut rng);
    let (_, gf1, gband) = sinc_backward(&gy, &cache, &p)?;
    let loss = |p: &SincParams| -> f64 { dot(sinc_forward(&x, p).unwrap().0.data(), gy.data()) };
    let h = 1e-7;
    let mut worst = 0.0f64;
    for f in 0..filters {
        for which in 0..2 {
            let mut pp = p.clone();
            let mut pm = p.clone();
            {
                let t = if which == 0 { &mut pp.f1_raw } else { &mut pp.band_raw };
                t.data_mut()[f] += h;
            }
            {
                let t = if which == 0 { &mut pm.f1_raw } else { &mut pm.band_raw };
                t.data_mut()[f] -= h;
            }
            let fd = (loss(&pp) - loss(&pm)) / (2.0 * h);
            let a = if which == 0 { gf1.data()[f] } else { gband.data()[f] };
            worst = worst.max(rel_err(a, fd));
        }
    }
    Ok(ModuleReport {
        module: "sincbank.chain",
        worst_rel_err: worst,
        coords_checked: 2 * filters,
    })
}

fn check_model(size: CheckSize, kind: LossKind) -> Result<ModuleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(113);
    let cfg = size.model_config();
    let batch = size.batch();
    let model = Model::new(&cfg, &mut rng)?;
    let frames = rand_tensor(&[batch, cfg.frame_len], &mut rng);
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..cfg.num_speakers)).collect();
    let loss_cfg = LossConfig {
        kind,
        m: 0.4,
        ..LossConfig::default()
    };

    let (emb, cache) = model.forward(&frames)?;
    let out = loss::compute(&emb, &model.classifier, &labels, &loss_cfg)?;
    let mut grads = model.backward(&out.grad_embeddings, &cache)?;
    grads.insert("classifier.w".to_string(), out.grad_w.clone());

    let eval = |m: &Model| -> f64 {
        let (emb, _) = m.forward(&frames).unwrap();
        loss::compute(&emb, &m.classifier, &labels, &loss_cfg).unwrap().loss
    };

    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut coords = 0;
    let names = model.param_names();
    let mut probe = model.clone();
    for name in &names {
        let len = model.param(name).unwrap().len();
        for i in 0..len {
            let orig = probe.param(name).unwrap().data()[i];
            probe.param_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = eval(&probe);
            probe.param_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = eval(&probe);
            probe.param_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grads[name.as_str()].data()[i];
            worst = worst.max(rel_err(a, fd));
            coords += 1;
        }
    }
    Ok(ModuleReport {
        module: match kind {
            LossKind::Softmax => "model.softmax_head",
            LossKind::AmSoftmax => "model.am_softmax_head",
        },
        worst_rel_err: worst,
        coords_checked: coords,
    })
}
