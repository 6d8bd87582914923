//! Network body: layer normalization, Leaky ReLU, Glorot initialization,
//! the conv/dense stacks and full model assembly with hand-written
//! backward passes.
//!
//! Pipeline (embeddings are the final hidden activations fed to the loss):
//!
//! ```text
//! input layernorm -> sinc conv -> |.| -> maxpool -> layernorm -> leaky
//!   -> [conv -> maxpool -> layernorm -> leaky] x 2
//!   -> flatten -> [dense -> layernorm -> leaky (-> dropout)] x 3
//! ```
//!
//! The classifier matrix `W` lives here as a registered parameter (so the
//! optimizer and checkpoints see it) but is consumed by the loss module;
//! [`Model::backward`] emits a zero gradient slot for it that the trainer
//! overwrites with the loss gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndarr::{
    conv1d_backward, conv1d_forward, matmul, matmul_nt, matmul_tn, maxpool1d, maxpool1d_backward,
    Tensor,
};
use crate::optim::TensorMap;
use crate::sincbank::{mel_init, sinc_backward, sinc_forward, SincCache, SincParams};

const LN_EPS: f64 = 1e-5;

/// Architecture hyperparameters. All widths are overridable for desk-scale
/// runs; `paper` gives the full-size stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub frame_len: usize,
    pub num_speakers: usize,
    pub sample_rate_hz: u32,
    /// Sinc layer: F filters of odd length L.
    pub sinc_filters: usize,
    pub sinc_kernel_len: usize,
    /// Two standard conv layers, this many filters each.
    pub conv_filters: usize,
    pub conv_kernel_len: usize,
    /// Non-overlapping max pooling after the sinc layer and each conv
    /// layer; width 1 disables pooling.
    pub pool_width: usize,
    /// Three dense layers of this width; the last one is the embedding.
    pub dense_width: usize,
    pub leaky_slope: f64,
    /// Rectify (|.|) the sinc layer output before pooling.
    pub rectify_sinc: bool,
    /// Dropout probability on the dense blocks, train mode only. 0 = off.
    pub dropout: f64,
}

impl ModelConfig {
    /// Full-scale stack: 80 sinc filters of length 251, two conv layers of
    /// 60 filters, three dense layers of 2048.
    pub fn paper(num_speakers: usize) -> ModelConfig {
        ModelConfig {
            frame_len: 3200,
            num_speakers,
            sample_rate_hz: 16000,
            sinc_filters: 80,
            sinc_kernel_len: 251,
            conv_filters: 60,
            conv_kernel_len: 5,
            pool_width: 3,
            dense_width: 2048,
            leaky_slope: 0.2,
            rectify_sinc: true,
            dropout: 0.0,
        }
    }

    /// Desk-scale stack that trains in minutes on a CPU.
    pub fn desk(num_speakers: usize, frame_len: usize, sample_rate_hz: u32) -> ModelConfig {
        ModelConfig {
            frame_len,
            num_speakers,
            sample_rate_hz,
            sinc_filters: 16,
            sinc_kernel_len: 101,
            conv_filters: 8,
            conv_kernel_len: 5,
            pool_width: 3,
            dense_width: 64,
            leaky_slope: 0.2,
            rectify_sinc: true,
            dropout: 0.0,
        }
    }

    /// Minimal stack for gradient checking.
    pub fn tiny() -> ModelConfig {
        ModelConfig {
            frame_len: 400,
            num_speakers: 3,
            sample_rate_hz: 16000,
            sinc_filters: 2,
            sinc_kernel_len: 17,
            conv_filters: 2,
            conv_kernel_len: 5,
            pool_width: 3,
            dense_width: 8,
            leaky_slope: 0.2,
            rectify_sinc: true,
            dropout: 0.0,
        }
    }

    /// Closed-form shape propagation through the stack.
    pub fn stage_lens(&self) -> Result<StageLens> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.sinc_kernel_len > self.frame_len {
            return fail(format!(
                "sinc kernel {} longer than frame {}",
                self.sinc_kernel_len, self.frame_len
            ));
        }
        if self.pool_width == 0 {
            return fail("pool width must be positive".to_string());
        }
        let t_sinc = self.frame_len - self.sinc_kernel_len + 1;
        let pool0 = t_sinc / self.pool_width;
        let mut t = pool0;
        let mut conv = [0usize; 2];
        let mut pooled = [0usize; 2];
        for i in 0..2 {
            if self.conv_kernel_len > t {
                return fail(format!("conv{i} kernel {} longer than input {t}", self.conv_kernel_len));
            }
            conv[i] = t - self.conv_kernel_len + 1;
            pooled[i] = conv[i] / self.pool_width;
            t = pooled[i];
        }
        let flatten = self.conv_filters * t;
        if flatten == 0 || pool0 == 0 {
            return fail("pipeline collapses to zero length; frame too short".to_string());
        }
        Ok(StageLens {
            t_sinc,
            pool0,
            conv,
            pooled,
            flatten,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 2 {
            return Err(Error::Config("need at least 2 speakers".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0,1), got {}", self.dropout)));
        }
        if self.dense_width == 0 || self.conv_filters == 0 {
            return Err(Error::Config("zero-width layer".to_string()));
        }
        self.stage_lens().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageLens {
    pub t_sinc: usize,
    pub pool0: usize,
    pub conv: [usize; 2],
    pub pooled: [usize; 2],
    pub flatten: usize,
}

/// Learnable affine of a layer normalization, stored flat over the
/// normalized axes.
#[derive(Debug, Clone, PartialEq)]
pub struct LnParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LnParams {
    fn new(feat: usize) -> LnParams {
        LnParams {
            gain: Tensor::full(&[feat], 1.0),
            bias: Tensor::zeros(&[feat]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

/// Normalizes each batch element over all its non-batch dimensions to zero
/// mean and unit variance, then applies the learnable affine:
/// `y = gain * (x - mu) / sqrt(var + 1e-5) + bias`.
pub fn layernorm_forward(x: &Tensor, p: &LnParams) -> Result<(Tensor, LnCache)> {
    let batch = x.dim(0);
    let feat = x.len() / batch;
    if p.gain.len() != feat || p.bias.len() != feat {
        return Err(Error::ShapeMismatch {
            op: "layernorm",
            expected: format!("affine of {feat} features"),
            got: format!("gain {}, bias {}", p.gain.len(), p.bias.len()),
        });
    }
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(&[batch, feat]);
    let mut inv_std = Vec::with_capacity(batch);
    for b in 0..batch {
        let row = &x.data()[b * feat..(b + 1) * feat];
        let mean = row.iter().sum::<f64>() / feat as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / feat as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(istd);
        let xh = &mut xhat.data_mut()[b * feat..(b + 1) * feat];
        let out = &mut y.data_mut()[b * feat..(b + 1) * feat];
        for i in 0..feat {
            xh[i] = (row[i] - mean) * istd;
            out[i] = p.gain.data()[i] * xh[i] + p.bias.data()[i];
        }
    }
    if !y.all_finite() {
        return Err(Error::NonFinite { op: "layernorm" });
    }
    Ok((y, LnCache { xhat, inv_std }))
}

/// Gradients of [`layernorm_forward`] w.r.t. input, gain and bias.
pub fn layernorm_backward(
    grad_y: &Tensor,
    cache: &LnCache,
    p: &LnParams,
) -> (Tensor, Tensor, Tensor) {
    let batch = grad_y.dim(0);
    let feat = grad_y.len() / batch;
    let mut grad_x = Tensor::zeros(grad_y.shape());
    let mut grad_gain = Tensor::zeros(&[feat]);
    let mut grad_bias = Tensor::zeros(&[feat]);
    for b in 0..batch {
        let g = &grad_y.data()[b * feat..(b + 1) * feat];
        let xh = &cache.xhat.data()[b * feat..(b + 1) * feat];
        let istd = cache.inv_std[b];
        let mut ghat_mean = 0.0;
        let mut ghat_dot_xhat = 0.0;
        for i in 0..feat {
            let ghat = g[i] * p.gain.data()[i];
            ghat_mean += ghat;
            ghat_dot_xhat += ghat * xh[i];
            grad_gain.data_mut()[i] += g[i] * xh[i];
            grad_bias.data_mut()[i] += g[i];
        }
        ghat_mean /= feat as f64;
        ghat_dot_xhat /= feat as f64;
        let gx = &mut grad_x.data_mut()[b * feat..(b + 1) * feat];
        for i in 0..feat {
            let ghat = g[i] * p.gain.data()[i];
            gx[i] = istd * (ghat - ghat_mean - xh[i] * ghat_dot_xhat);
        }
    }
    (grad_x, grad_gain, grad_bias)
}

/// `y = x` for `x >= 0`, `slope * x` otherwise.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v >= 0.0 { v } else { slope * v })
}

/// Routes 1 for positive pre-activations and `slope` for negative ones.
pub fn leaky_relu_backward(grad_y: &Tensor, pre_act: &Tensor, slope: f64) -> Tensor {
    let mut out = grad_y.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(pre_act.data()) {
        if x < 0.0 {
            *g *= slope;
        }
    }
    out
}

/// Uniform Glorot initialization: bound `sqrt(6 / (fan_in + fan_out))`.
/// Supports dense `[out, in]` and conv `[out, in, k]` shapes.
pub fn glorot_init(shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (fan_in, fan_out) = match shape.len() {
        2 => (shape[1], shape[0]),
        3 => (shape[1] * shape[2], shape[0] * shape[2]),
        r => {
            return Err(Error::InvalidArg {
                op: "glorot_init",
                msg: format!("unsupported rank {r}"),
            })
        }
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Ok(Tensor::from_fn(shape, |_| bound * (2.0 * rng.gen::<f64>() - 1.0)))
}

#[derive(Debug, Clone, PartialEq)]
struct ConvBlock {
    kernel: Tensor, // [out, in, k]
    bias: Tensor,   // [out]
    ln: LnParams,
}

#[derive(Debug, Clone, PartialEq)]
struct DenseBlock {
    weight: Tensor, // [out, in]
    bias: Tensor,   // [out]
    ln: LnParams,
}

/// The assembled parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    input_ln: LnParams,
    pub sinc: SincParams,
    sinc_ln: LnParams,
    convs: Vec<ConvBlock>,
    denses: Vec<DenseBlock>,
    /// Classifier weight matrix `[C, dense_width]`, no bias.
    pub classifier: Tensor,
}

impl Model {
    /// Builds the stack: mel-initialized sinc layer, Glorot conv/dense
    /// weights, unit/zero layer-norm affines, zero biases.
    pub fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Model> {
        config.validate()?;
        let lens = config.stage_lens()?;
        let sinc = mel_init(config.sinc_filters, config.sample_rate_hz, config.sinc_kernel_len)?;

        let mut convs = Vec::with_capacity(2);
        let mut in_ch = config.sinc_filters;
        for i in 0..2 {
            let kernel = glorot_init(&[config.conv_filters, in_ch, config.conv_kernel_len], rng)?;
            convs.push(ConvBlock {
                kernel,
                bias: Tensor::zeros(&[config.conv_filters]),
                ln: LnParams::new(config.conv_filters * lens.pooled[i]),
            });
            in_ch = config.conv_filters;
        }

        let mut denses = Vec::with_capacity(3);
        let mut in_w = lens.flatten;
        for _ in 0..3 {
            let weight = glorot_init(&[config.dense_width, in_w], rng)?;
            denses.push(DenseBlock {
                weight,
                bias: Tensor::zeros(&[config.dense_width]),
                ln: LnParams::new(config.dense_width),
            });
            in_w = config.dense_width;
        }

        let classifier = glorot_init(&[config.num_speakers, config.dense_width], rng)?;
        Ok(Model {
            config: config.clone(),
            input_ln: LnParams::new(config.frame_len),
            sinc,
            sinc_ln: LnParams::new(config.sinc_filters * lens.pool0),
            convs,
            denses,
            classifier,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.dense_width
    }

    /// Visits every registered parameter in a fixed order with its stable
    /// name.
    pub fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f("input_ln.gain", &self.input_ln.gain);
        f("input_ln.bias", &self.input_ln.bias);
        f("sinc.f1_raw", &self.sinc.f1_raw);
        f("sinc.band_raw", &self.sinc.band_raw);
        f("sinc_ln.gain", &self.sinc_ln.gain);
        f("sinc_ln.bias", &self.sinc_ln.bias);
        for (i, c) in self.convs.iter().enumerate() {
            f(&format!("conv{i}.kernel"), &c.kernel);
            f(&format!("conv{i}.bias"), &c.bias);
            f(&format!("conv{i}_ln.gain"), &c.ln.gain);
            f(&format!("conv{i}_ln.bias"), &c.ln.bias);
        }
        for (i, d) in self.denses.iter().enumerate() {
            f(&format!("dense{i}.weight"), &d.weight);
            f(&format!("dense{i}.bias"), &d.bias);
            f(&format!("dense{i}_ln.gain"), &d.ln.gain);
            f(&format!("dense{i}_ln.bias"), &d.ln.bias);
        }
        f("classifier.w", &self.classifier);
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |n, _| names.push(n.to_string()));
        names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        let mut found = None;
        self.visit_params(&mut |n, t| {
            if n == name {
                found = Some(t);
            }
        });
        found
    }

    /// Mutable registry view in the same fixed order as [`visit_params`].
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("input_ln.gain".into(), &mut self.input_ln.gain));
        out.push(("input_ln.bias".into(), &mut self.input_ln.bias));
        out.push(("sinc.f1_raw".into(), &mut self.sinc.f1_raw));
        out.push(("sinc.band_raw".into(), &mut self.sinc.band_raw));
        out.push(("sinc_ln.gain".into(), &mut self.sinc_ln.gain));
        out.push(("sinc_ln.bias".into(), &mut self.sinc_ln.bias));
        for (i, c) in self.convs.iter_mut().enumerate() {
            out.push((format!("conv{i}.kernel"), &mut c.kernel));
            out.push((format!("conv{i}.bias"), &mut c.bias));
            out.push((format!("conv{i}_ln.gain"), &mut c.ln.gain));
            out.push((format!("conv{i}_ln.bias"), &mut c.ln.bias));
        }
        for (i, d) in self.denses.iter_mut().enumerate() {
            out.push((format!("dense{i}.weight"), &mut d.weight));
            out.push((format!("dense{i}.bias"), &mut d.bias));
            out.push((format!("dense{i}_ln.gain"), &mut d.ln.gain));
            out.push((format!("dense{i}_ln.bias"), &mut d.ln.bias));
        }
        out.push(("classifier.w".into(), &mut self.classifier));
        out
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Inference forward pass (dropout off).
    pub fn forward(&self, frames: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.forward_inner(frames, None)
    }

    /// Training forward pass; draws dropout masks from `rng` when
    /// `config.dropout > 0` (no RNG is consumed otherwise).
    pub fn forward_train(
        &self,
        frames: &Tensor,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, ForwardCache)> {
        if self.config.dropout > 0.0 {
            self.forward_inner(frames, Some(rng))
        } else {
            self.forward_inner(frames, None)
        }
    }

    fn forward_inner(
        &self,
        frames: &Tensor,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, ForwardCache)> {
        let cfg = &self.config;
        if frames.rank() != 2 || frames.dim(1) != cfg.frame_len {
            return Err(Error::ShapeMismatch {
                op: "model_forward(input)",
                expected: format!("[B, {}]", cfg.frame_len),
                got: format!("{:?}", frames.shape()),
            });
        }
        let batch = frames.dim(0);

        let (x_ln, in_ln_cache) = stage("input_ln", layernorm_forward(frames, &self.input_ln))?;
        let x3 = x_ln.reshape(&[batch, 1, cfg.frame_len])?;

        let (sinc_out, sinc_cache) = stage("sinc", sinc_forward(&x3, &self.sinc))?;
        let rectified = if cfg.rectify_sinc {
            sinc_out.map(f64::abs)
        } else {
            sinc_out.clone()
        };
        let (pooled0, pool0_argmax) = stage("sinc_pool", maxpool1d(&rectified, cfg.pool_width))?;
        let pool0_in_shape = rectified.shape().to_vec();
        let (ln0_out, ln0_cache) = stage("sinc_ln", layernorm_forward(&pooled0, &self.sinc_ln))?;
        let mut act = leaky_relu(&ln0_out, cfg.leaky_slope);

        let mut conv_caches = Vec::with_capacity(2);
        for (i, block) in self.convs.iter().enumerate() {
            let names: [&'static str; 2] = ["conv0", "conv1"];
            let name = names[i];
            let x_in = act.clone();
            let mut conv = stage(name, conv1d_forward(&x_in, &block.kernel, 1))?;
            add_channel_bias(&mut conv, &block.bias);
            let pool_in_shape = conv.shape().to_vec();
            let (pooled, pool_argmax) = stage(name, maxpool1d(&conv, cfg.pool_width))?;
            let (ln_out, ln_cache) = stage(name, layernorm_forward(&pooled, &block.ln))?;
            act = leaky_relu(&ln_out, cfg.leaky_slope);
            conv_caches.push(ConvStageCache {
                x_in,
                pool_argmax,
                pool_in_shape,
                ln: ln_cache,
                ln_out,
            });
        }

        let flatten_shape = act.shape().to_vec();
        let flat = act.reshape(&[batch, flatten_shape[1] * flatten_shape[2]])?;

        let mut dense_caches = Vec::with_capacity(3);
        let mut x = flat;
        for (i, block) in self.denses.iter().enumerate() {
            let names: [&'static str; 3] = ["dense0", "dense1", "dense2"];
            let name = names[i];
            let x_in = x.clone();
            let mut lin = stage(name, matmul_nt(&x_in, &block.weight))?;
            add_row_bias(&mut lin, &block.bias);
            let (ln_out, ln_cache) = stage(name, layernorm_forward(&lin, &block.ln))?;
            x = leaky_relu(&ln_out, cfg.leaky_slope);
            let mask = match dropout_rng.as_deref_mut() {
                Some(rng) if cfg.dropout > 0.0 => {
                    let keep = 1.0 - cfg.dropout;
                    let mask = Tensor::from_fn(x.shape(), |_| {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    x = Tensor::from_vec(
                        x.shape(),
                        x.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect(),
                    )?;
                    Some(mask)
                }
                _ => None,
            };
            dense_caches.push(DenseStageCache {
                x_in,
                ln: ln_cache,
                ln_out,
                mask,
            });
        }

        let cache = ForwardCache {
            batch,
            in_ln: in_ln_cache,
            sinc: sinc_cache,
            sinc_out,
            pool0_argmax,
            pool0_in_shape,
            ln0: ln0_cache,
            ln0_out,
            convs: conv_caches,
            flatten_shape,
            denses: dense_caches,
        };
        Ok((x, cache))
    }

    /// Gradients for every registered parameter given the loss gradient at
    /// the embeddings. The `classifier.w` slot is zero-filled here; its
    /// gradient comes from the loss head.
    pub fn backward(&self, grad_embeddings: &Tensor, cache: &ForwardCache) -> Result<TensorMap> {
        let cfg = &self.config;
        if grad_embeddings.shape() != [cache.batch, cfg.dense_width] {
            return Err(Error::ShapeMismatch {
                op: "model_backward",
                expected: format!("[{}, {}]", cache.batch, cfg.dense_width),
                got: format!("{:?}", grad_embeddings.shape()),
            });
        }
        let mut grads = TensorMap::new();
        let mut g = grad_embeddings.clone();

        for i in (0..3).rev() {
            let block = &self.denses[i];
            let c = &cache.denses[i];
            if let Some(mask) = &c.mask {
                g = Tensor::from_vec(
                    g.shape(),
                    g.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect(),
                )?;
            }
            g = leaky_relu_backward(&g, &c.ln_out, cfg.leaky_slope);
            let (gx, ggain, gbias) = layernorm_backward(&g, &c.ln, &block.ln);
            grads.insert(format!("dense{i}_ln.gain"), ggain);
            grads.insert(format!("dense{i}_ln.bias"), gbias);
            // lin = x_in . W^T + b
            grads.insert(format!("dense{i}.weight"), matmul_tn(&gx, &c.x_in)?);
            grads.insert(format!("dense{i}.bias"), column_sums(&gx));
            g = matmul(&gx, &block.weight)?;
        }

        g = g.reshape(&cache.flatten_shape)?;

        for i in (0..2).rev() {
            let block = &self.convs[i];
            let c = &cache.convs[i];
            g = leaky_relu_backward(&g, &c.ln_out, cfg.leaky_slope);
            let (gx, ggain, gbias) = layernorm_backward(&g, &c.ln, &block.ln);
            grads.insert(format!("conv{i}_ln.gain"), ggain);
            grads.insert(format!("conv{i}_ln.bias"), gbias);
            let g_conv = maxpool1d_backward(&gx, &c.pool_argmax, &c.pool_in_shape)?;
            grads.insert(format!("conv{i}.bias"), channel_sums(&g_conv));
            let (g_in, g_kernel) = conv1d_backward(&g_conv, &c.x_in, &block.kernel, 1)?;
            grads.insert(format!("conv{i}.kernel"), g_kernel);
            g = g_in;
        }

        g = leaky_relu_backward(&g, &cache.ln0_out, cfg.leaky_slope);
        let (gx, ggain, gbias) = layernorm_backward(&g, &cache.ln0, &self.sinc_ln);
        grads.insert("sinc_ln.gain".into(), ggain);
        grads.insert("sinc_ln.bias".into(), gbias);
        let mut g_rect = maxpool1d_backward(&gx, &cache.pool0_argmax, &cache.pool0_in_shape)?;
        if cfg.rectify_sinc {
            for (gv, &pre) in g_rect.data_mut().iter_mut().zip(cache.sinc_out.data()) {
                if pre < 0.0 {
                    *gv = -*gv;
                }
            }
        }
        let (g_x3, g_f1, g_band) = sinc_backward(&g_rect, &cache.sinc, &self.sinc)?;
        grads.insert("sinc.f1_raw".into(), g_f1);
        grads.insert("sinc.band_raw".into(), g_band);

        let g_flat = g_x3.reshape(&[cache.batch, cfg.frame_len])?;
        let (_, ggain, gbias) = layernorm_backward(&g_flat, &cache.in_ln, &self.input_ln);
        grads.insert("input_ln.gain".into(), ggain);
        grads.insert("input_ln.bias".into(), gbias);

        grads.insert("classifier.w".into(), Tensor::zeros(self.classifier.shape()));
        Ok(grads)
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::ShapeMismatch { expected, got, .. } => Error::ShapeMismatch {
            op: name,
            expected,
            got,
        },
        other => other,
    })
}

fn add_channel_bias(y: &mut Tensor, bias: &Tensor) {
    let (b, c, t) = (y.dim(0), y.dim(1), y.dim(2));
    for bi in 0..b {
        for ci in 0..c {
            let v = bias.data()[ci];
            for o in y.data_mut()[(bi * c + ci) * t..(bi * c + ci + 1) * t].iter_mut() {
                *o += v;
            }
        }
    }
}

fn add_row_bias(y: &mut Tensor, bias: &Tensor) {
    let (b, c) = (y.dim(0), y.dim(1));
    for bi in 0..b {
        for (o, &v) in y.data_mut()[bi * c..(bi + 1) * c].iter_mut().zip(bias.data()) {
            *o += v;
        }
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let (b, c) = (g.dim(0), g.dim(1));
    let mut out = Tensor::zeros(&[c]);
    for bi in 0..b {
        for (o, &v) in out.data_mut().iter_mut().zip(&g.data()[bi * c..(bi + 1) * c]) {
            *o += v;
        }
    }
    out
}

fn channel_sums(g: &Tensor) -> Tensor {
    let (b, c, t) = (g.dim(0), g.dim(1), g.dim(2));
    let mut out = Tensor::zeros(&[c]);
    for bi in 0..b {
        for ci in 0..c {
            out.data_mut()[ci] += g.data()[(bi * c + ci) * t..(bi * c + ci + 1) * t]
                .iter()
                .sum::<f64>();
        }
    }
    out
}

#[derive(Debug, Clone)]
struct ConvStageCache {
    x_in: Tensor,
    pool_argmax: Vec<usize>,
    pool_in_shape: Vec<usize>,
    ln: LnCache,
    ln_out: Tensor,
}

#[derive(Debug, Clone)]
struct DenseStageCache {
    x_in: Tensor,
    ln: LnCache,
    ln_out: Tensor,
    mask: Option<Tensor>,
}

/// Intermediate activations retained by [`Model::forward`] for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    in_ln: LnCache,
    sinc: SincCache,
    sinc_out: Tensor,
    pool0_argmax: Vec<usize>,
    pool0_in_shape: Vec<usize>,
    ln0: LnCache,
    ln0_out: Tensor,
    convs: Vec<ConvStageCache>,
    flatten_shape: Vec<usize>,
    denses: Vec<DenseStageCache>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn layernorm_constant_input_gives_bias() {
        let p = LnParams::new(6);
        let x = Tensor::full(&[2, 6], 3.7);
        let (y, _) = layernorm_forward(&x, &p).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn layernorm_normalizes_pre_affine() {
        let p = LnParams::new(50);
        let mut r = rng(1);
        let x = rand_tensor(&[3, 50], &mut r);
        let (y, _) = layernorm_forward(&x, &p).unwrap();
        for b in 0..3 {
            let row = &y.data()[b * 50..(b + 1) * 50];
            let mean = row.iter().sum::<f64>() / 50.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-9);
            // variance shrinks slightly below 1 because of the 1e-5 guard
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layernorm_gradcheck() {
        let mut r = rng(2);
        let x = rand_tensor(&[2, 7], &mut r);
        let p = LnParams {
            gain: rand_tensor(&[7], &mut r),
            bias: rand_tensor(&[7], &mut r),
        };
        let gy = rand_tensor(&[2, 7], &mut r);
        let (_, cache) = layernorm_forward(&x, &p).unwrap();
        let (gx, ggain, gbias) = layernorm_backward(&gy, &cache, &p);
        let h = 1e-6;
        let loss = |x: &Tensor, p: &LnParams| -> f64 {
            let (y, _) = layernorm_forward(x, p).unwrap();
            y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum()
        };
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp, &p) - loss(&xm, &p)) / (2.0 * h);
            let a = gx.data()[i];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-6);
        }
        for i in 0..7 {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.gain.data_mut()[i] += h;
            pm.gain.data_mut()[i] -= h;
            let fd = (loss(&x, &pp) - loss(&x, &pm)) / (2.0 * h);
            assert!((ggain.data()[i] - fd).abs() < 1e-6);
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp.bias.data_mut()[i] += h;
            pm.bias.data_mut()[i] -= h;
            let fd = (loss(&x, &pp) - loss(&x, &pm)) / (2.0 * h);
            assert!((gbias.data()[i] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn leaky_relu_values_and_gradient() {
        let x = Tensor::from_vec(&[1, 2], vec![5.0, -2.0]).unwrap();
        let y = leaky_relu(&x, 0.2);
        assert_eq!(y.data(), &[5.0, -0.4]);
        let g = leaky_relu_backward(&Tensor::full(&[1, 2], 1.0), &x, 0.2);
        assert_eq!(g.data(), &[1.0, 0.2]);
        // finite differences away from the kink
        let h = 1e-6;
        for (i, &v) in [3.0f64, -1.5].iter().enumerate() {
            let f = |t: f64| if t >= 0.0 { t } else { 0.2 * t };
            let fd = (f(v + h) - f(v - h)) / (2.0 * h);
            let a = if v >= 0.0 { 1.0 } else { 0.2 };
            assert!((a - fd).abs() < 1e-6, "{i}");
        }
    }

    #[test]
    fn glorot_bound_and_determinism() {
        let mut r1 = rng(3);
        let t1 = glorot_init(&[3, 3], &mut r1).unwrap();
        // fan_in = fan_out = 3 -> bound 1
        assert!(t1.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        let mut r2 = rng(3);
        let t2 = glorot_init(&[3, 3], &mut r2).unwrap();
        assert_eq!(t1, t2);
        assert!(glorot_init(&[4], &mut r1).is_err());
    }

    #[test]
    fn glorot_empirical_variance() {
        let mut r = rng(4);
        let n = 100_000usize;
        let t = glorot_init(&[n / 10, 10], &mut r).unwrap();
        let mean = t.sum() / n as f64;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let expect = 2.0 / (10.0 + n as f64 / 10.0);
        assert!((var - expect).abs() / expect < 0.05, "{var} vs {expect}");
    }

    #[test]
    fn glorot_conv_kernel_fans() {
        let mut r = rng(5);
        let t = glorot_init(&[4, 2, 5], &mut r).unwrap();
        let bound = (6.0 / ((2 * 5 + 4 * 5) as f64)).sqrt();
        assert!(t.data().iter().all(|&v| v.abs() <= bound));
    }

    #[test]
    fn desk_config_shape_propagation() {
        let cfg = ModelConfig::desk(8, 3200, 16000);
        let lens = cfg.stage_lens().unwrap();
        // 3200 -> 3100 -> 1033 -> 1029 -> 343 -> 339 -> 113
        assert_eq!(lens.t_sinc, 3100);
        assert_eq!(lens.pool0, 1033);
        assert_eq!(lens.conv, [1029, 339]);
        assert_eq!(lens.pooled, [343, 113]);
        assert_eq!(lens.flatten, 8 * 113);

        let mut r = rng(6);
        let model = Model::new(&cfg, &mut r).unwrap();
        let x = rand_tensor(&[2, 3200], &mut r);
        let (emb, _) = model.forward(&x).unwrap();
        assert_eq!(emb.shape(), &[2, 64]);
    }

    #[test]
    fn closed_form_flatten_matches_sweep() {
        for t in (400..=4000).step_by(400) {
            let mut cfg = ModelConfig::tiny();
            cfg.frame_len = t;
            let lens = cfg.stage_lens().unwrap();
            let expect = cfg.conv_filters
                * ((((t - cfg.sinc_kernel_len + 1) / 3 - 4) / 3 - 4) / 3);
            assert_eq!(lens.flatten, expect, "T={t}");
        }
    }

    #[test]
    fn forward_is_deterministic_and_per_sample() {
        let cfg = ModelConfig::tiny();
        let mut r = rng(7);
        let model = Model::new(&cfg, &mut r).unwrap();
        let x = rand_tensor(&[2, 400], &mut r);
        let (e1, _) = model.forward(&x).unwrap();
        let (e2, _) = model.forward(&x).unwrap();
        assert_eq!(e1, e2);

        // duplicate a batch row -> identical embedding rows
        let mut x3 = Tensor::zeros(&[3, 400]);
        x3.data_mut()[..400].copy_from_slice(x.row(0));
        x3.data_mut()[400..800].copy_from_slice(x.row(1));
        x3.data_mut()[800..].copy_from_slice(x.row(0));
        let (e3, _) = model.forward(&x3).unwrap();
        assert_eq!(e3.row(0), e3.row(2));
        assert_eq!(e3.row(1), e1.row(1));
    }

    #[test]
    fn zero_input_depends_only_on_affine_state() {
        let cfg = ModelConfig::tiny();
        let mut r = rng(8);
        let model = Model::new(&cfg, &mut r).unwrap();
        let x = Tensor::zeros(&[2, 400]);
        let (emb, _) = model.forward(&x).unwrap();
        assert!(emb.all_finite());
        assert_eq!(emb.row(0), emb.row(1));
    }

    #[test]
    fn gradient_registry_matches_parameter_registry() {
        let cfg = ModelConfig::tiny();
        let mut r = rng(9);
        let model = Model::new(&cfg, &mut r).unwrap();
        let x = rand_tensor(&[2, 400], &mut r);
        let (emb, cache) = model.forward(&x).unwrap();
        let gy = rand_tensor(emb.shape(), &mut r);
        let grads = model.backward(&gy, &cache).unwrap();
        let mut names = model.param_names();
        names.sort();
        let keys: Vec<String> = grads.keys().cloned().collect();
        assert_eq!(names, keys);
        // zero upstream gradient -> all-zero registry
        let zeros = model.backward(&Tensor::zeros(emb.shape()), &cache).unwrap();
        for (name, g) in &zeros {
            assert!(g.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }

    #[test]
    fn parameter_names_unique_and_sinc_has_two_per_filter() {
        let cfg = ModelConfig::desk(8, 1600, 8000);
        let mut r = rng(10);
        let model = Model::new(&cfg, &mut r).unwrap();
        let names = model.param_names();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        let sinc_params: usize = names
            .iter()
            .filter(|n| n.starts_with("sinc."))
            .map(|n| model.param(n).unwrap().len())
            .sum();
        assert_eq!(sinc_params, 2 * cfg.sinc_filters);
    }

    #[test]
    fn every_parameter_gets_gradient_signal() {
        let cfg = ModelConfig::tiny();
        let mut r = rng(11);
        let model = Model::new(&cfg, &mut r).unwrap();
        let x = rand_tensor(&[4, 400], &mut r);
        let (emb, cache) = model.forward(&x).unwrap();
        let gy = rand_tensor(emb.shape(), &mut r);
        let grads = model.backward(&gy, &cache).unwrap();
        for (name, g) in &grads {
            if name == "classifier.w" {
                continue; // supplied by the loss head
            }
            assert!(
                g.data().iter().any(|&v| v != 0.0),
                "parameter {name} received no gradient"
            );
        }
    }

    #[test]
    fn dropout_masks_scale_and_disable_cleanly() {
        let mut cfg = ModelConfig::tiny();
        cfg.dropout = 0.5;
        let mut r = rng(12);
        let model = Model::new(&cfg, &mut r).unwrap();
        let x = rand_tensor(&[2, 400], &mut r);
        let mut d1 = rng(100);
        let mut d2 = rng(100);
        let (e1, _) = model.forward_train(&x, &mut d1).unwrap();
        let (e2, _) = model.forward_train(&x, &mut d2).unwrap();
        assert_eq!(e1, e2); // deterministic given rng
        let (ee, _) = model.forward(&x).unwrap();
        assert_ne!(e1, ee); // train mode differs from eval mode
        let zeros = e1.data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 0, "expected some dropped activations");
    }

    #[test]
    fn bad_input_length_names_the_stage() {
        let cfg = ModelConfig::tiny();
        let mut r = rng(13);
        let model = Model::new(&cfg, &mut r).unwrap();
        let x = Tensor::zeros(&[1, 32]);
        let err = model.forward(&x).unwrap_err().to_string();
        assert!(err.contains("model_forward"), "{err}");
    }
}
