//! Learnable sinc band-pass filter bank.
//!
//! Each filter is an ideal band-pass impulse response parametrized by just
//! two learnables (raw low cutoff and raw bandwidth), windowed with a
//! Hamming window and normalized so the passband gain is order 1. Taps are
//! built by computing one half and mirroring, which keeps the symmetry
//! exact and halves the construction work.
//!
//! Constraint scheme (all frequencies normalized by the sample rate):
//!
//! ```text
//! f1   = min( (min_low_hz + |f1_raw * fs|) / fs,  0.5 - min_band_hz / fs )
//! band = (min_band_hz + |band_raw * fs|) / fs
//! f2   = min(f1 + band, 0.5)
//! ```
//!
//! so `min_low_hz/fs <= f1 < f2 <= 0.5` holds for arbitrary raw values.
//! Both clamps pass zero gradient through when active.

use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::ndarr::{conv1d_backward, conv1d_forward, Tensor};
use crate::signal::{mel, mel_inv};

pub const DEFAULT_MIN_LOW_HZ: f64 = 50.0;
pub const DEFAULT_MIN_BAND_HZ: f64 = 50.0;
const MEL_INIT_LOW_HZ: f64 = 30.0;

/// The sinc layer's learnable parameters plus its fixed constants.
#[derive(Debug, Clone, PartialEq)]
pub struct SincParams {
    /// Raw low cutoff per filter, in units of normalized frequency.
    pub f1_raw: Tensor, // [F]
    /// Raw bandwidth per filter, same units.
    pub band_raw: Tensor, // [F]
    pub min_low_hz: f64,
    pub min_band_hz: f64,
    pub filter_len: usize,
    pub sample_rate_hz: u32,
}

/// Effective cutoffs after the constraint chain, with clamp flags for the
/// backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Cutoffs {
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    pub f1_clamped: Vec<bool>,
    pub f2_clamped: Vec<bool>,
}

impl Cutoffs {
    pub fn f1_hz(&self, fs: u32) -> Vec<f64> {
        self.f1.iter().map(|f| f * fs as f64).collect()
    }

    pub fn f2_hz(&self, fs: u32) -> Vec<f64> {
        self.f2.iter().map(|f| f * fs as f64).collect()
    }
}

/// Windowed, normalized taps ready for convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub taps: Tensor, // [F, 1, L]
    pub cutoffs: Cutoffs,
}

impl SincParams {
    pub fn num_filters(&self) -> usize {
        self.f1_raw.len()
    }
}

/// Spaces F+1 points uniformly on the mel axis between 30 Hz and
/// `fs/2 - (min_low + min_band)` and assigns filter i the band
/// (point_i, point_{i+1}). Raw parameters are solved so the effective
/// cutoffs equal those points; points below the 50 Hz floor clamp to it.
pub fn mel_init(num_filters: usize, sample_rate_hz: u32, filter_len: usize) -> Result<SincParams> {
    if num_filters < 1 {
        return Err(Error::Config("need at least one sinc filter".to_string()));
    }
    if filter_len < 3 || filter_len % 2 == 0 {
        return Err(Error::Config(format!(
            "filter length must be odd and >= 3, got {filter_len}"
        )));
    }
    let fs = sample_rate_hz as f64;
    let min_low = DEFAULT_MIN_LOW_HZ;
    let min_band = DEFAULT_MIN_BAND_HZ;
    let hi_hz = fs / 2.0 - (min_low + min_band);
    if hi_hz <= MEL_INIT_LOW_HZ {
        return Err(Error::Config(format!(
            "sample rate {sample_rate_hz} too low for mel initialization"
        )));
    }
    let mel_lo = mel(MEL_INIT_LOW_HZ)?;
    let mel_hi = mel(hi_hz)?;
    let points: Vec<f64> = (0..=num_filters)
        .map(|i| mel_inv(mel_lo + (mel_hi - mel_lo) * i as f64 / num_filters as f64).unwrap())
        .collect();

    // Low cutoffs below the floor clamp to it; more than one such point
    // would collapse adjacent filters onto the same band.
    let floored = points[..num_filters].iter().filter(|&&p| p <= min_low).count();
    if floored > 1 {
        return Err(Error::Config(format!(
            "{num_filters} filters pack mel points too densely: {floored} low cutoffs \
             fall at or below the {min_low} Hz floor"
        )));
    }

    let mut f1_raw = Vec::with_capacity(num_filters);
    let mut band_raw = Vec::with_capacity(num_filters);
    for i in 0..num_filters {
        let a = (points[i] - min_low).max(0.0) / fs;
        let f1_hz = min_low + a * fs;
        let b = (points[i + 1] - f1_hz - min_band).max(0.0) / fs;
        f1_raw.push(a);
        band_raw.push(b);
    }
    Ok(SincParams {
        f1_raw: Tensor::from_vec(&[num_filters], f1_raw)?,
        band_raw: Tensor::from_vec(&[num_filters], band_raw)?,
        min_low_hz: min_low,
        min_band_hz: min_band,
        filter_len,
        sample_rate_hz,
    })
}

/// Applies the constraint chain to the raw parameters.
pub fn effective_cutoffs(p: &SincParams) -> Cutoffs {
    let fs = p.sample_rate_hz as f64;
    let n = p.num_filters();
    let f1_max = 0.5 - p.min_band_hz / fs;
    let mut out = Cutoffs {
        f1: Vec::with_capacity(n),
        f2: Vec::with_capacity(n),
        f1_clamped: Vec::with_capacity(n),
        f2_clamped: Vec::with_capacity(n),
    };
    for i in 0..n {
        let f1_free = (p.min_low_hz + (p.f1_raw.data()[i] * fs).abs()) / fs;
        let f1_clamped = f1_free > f1_max;
        let f1 = if f1_clamped { f1_max } else { f1_free };
        let band = (p.min_band_hz + (p.band_raw.data()[i] * fs).abs()) / fs;
        let f2_free = f1 + band;
        let f2_clamped = f2_free > 0.5;
        let f2 = if f2_clamped { 0.5 } else { f2_free };
        out.f1.push(f1);
        out.f2.push(f2);
        out.f1_clamped.push(f1_clamped);
        out.f2_clamped.push(f2_clamped);
    }
    out
}

#[inline]
fn hamming(n: usize, len: usize) -> f64 {
    0.54 + 0.46 * (std::f64::consts::TAU * n as f64 / len as f64).cos()
}

/// Ideal band-pass tap `g[n]` and its cutoff derivatives, before windowing
/// and normalization. `n = 0` uses the analytic limit `2 (f2 - f1)` rather
/// than evaluating sin(x)/x at zero.
pub fn sinc_tap_derivatives(f1: f64, f2: f64, n: usize) -> (f64, f64, f64) {
    if n == 0 {
        return (2.0 * (f2 - f1), -2.0, 2.0);
    }
    let x = std::f64::consts::TAU * n as f64;
    let g = ((f2 * x).sin() - (f1 * x).sin()) / (std::f64::consts::PI * n as f64);
    (g, -2.0 * (f1 * x).cos(), 2.0 * (f2 * x).cos())
}

/// Builds the windowed, peak-normalized taps. Half of each filter is
/// computed and mirrored, so `taps[f,0,c+n] == taps[f,0,c-n]` bit-exactly.
pub fn build_filters(p: &SincParams) -> FilterBank {
    let cutoffs = effective_cutoffs(p);
    let num = p.num_filters();
    let len = p.filter_len;
    let center = (len - 1) / 2;
    let mut taps = Tensor::zeros(&[num, 1, len]);
    for f in 0..num {
        let (f1, f2) = (cutoffs.f1[f], cutoffs.f2[f]);
        let delta = f2 - f1;
        let row = &mut taps.data_mut()[f * len..(f + 1) * len];
        if delta <= 0.0 {
            continue; // degenerate band (test-only bypass of min_band): zero filter
        }
        let norm = 1.0 / (2.0 * delta);
        for n in 0..=center {
            let (g, _, _) = sinc_tap_derivatives(f1, f2, n);
            let v = g * hamming(n, len) * norm;
            row[center + n] = v;
            row[center - n] = v;
        }
    }
    FilterBank { taps, cutoffs }
}

/// Forward state kept for [`sinc_backward`].
#[derive(Debug, Clone)]
pub struct SincCache {
    pub x: Tensor, // [B, 1, T]
    pub bank: FilterBank,
}

/// Convolves `[B,1,T]` input with the current filter bank (stride 1, valid
/// padding), returning `[B,F,T-L+1]` and the cache for the backward pass.
pub fn sinc_forward(x: &Tensor, p: &SincParams) -> Result<(Tensor, SincCache)> {
    let bank = build_filters(p);
    let y = conv1d_forward(x, &bank.taps, 1)?;
    Ok((y, SincCache { x: x.clone(), bank }))
}

/// Gradients of the composed forward contract: through the convolution,
/// the window/normalization, both clamps (zero gradient when active) and
/// the |.| reparametrization (sign factor, subgradient 0 at raw == 0).
pub fn sinc_backward(
    grad_y: &Tensor,
    cache: &SincCache,
    p: &SincParams,
) -> Result<(Tensor, Tensor, Tensor)> {
    let num = p.num_filters();
    let len = p.filter_len;
    if cache.bank.taps.shape() != [num, 1, len] {
        return Err(Error::ShapeMismatch {
            op: "sinc_backward",
            expected: format!("cached taps [{num},1,{len}]"),
            got: format!("{:?}", cache.bank.taps.shape()),
        });
    }
    let (grad_x, grad_taps) = conv1d_backward(grad_y, &cache.x, &cache.bank.taps, 1)?;

    let center = (len - 1) / 2;
    let cut = &cache.bank.cutoffs;
    let mut grad_f1_raw = Tensor::zeros(&[num]);
    let mut grad_band_raw = Tensor::zeros(&[num]);
    for f in 0..num {
        let (f1, f2) = (cut.f1[f], cut.f2[f]);
        let delta = f2 - f1;
        if delta <= 0.0 {
            continue;
        }
        let inv2d = 1.0 / (2.0 * delta);
        let trow = &cache.bank.taps.data()[f * len..(f + 1) * len];
        let grow = &grad_taps.data()[f * len..(f + 1) * len];
        let mut df1 = 0.0;
        let mut df2 = 0.0;
        for n in 0..=center {
            let (_, dg_df1, dg_df2) = sinc_tap_derivatives(f1, f2, n);
            let w = hamming(n, len);
            let h = trow[center + n];
            // h = g*w/(2*delta): product rule with d(1/(2*delta))/df1 = +1/(2*delta^2)
            let dh_df1 = w * dg_df1 * inv2d + h / delta;
            let dh_df2 = w * dg_df2 * inv2d - h / delta;
            let g_sum = if n == 0 {
                grow[center]
            } else {
                grow[center + n] + grow[center - n]
            };
            df1 += g_sum * dh_df1;
            df2 += g_sum * dh_df2;
        }
        let f2_gate = if cut.f2_clamped[f] { 0.0 } else { 1.0 };
        let f1_gate = if cut.f1_clamped[f] { 0.0 } else { 1.0 };
        let total_df1 = df1 + df2 * f2_gate; // f2 = f1 + band when unclamped
        grad_f1_raw.data_mut()[f] = total_df1 * f1_gate * sign0(p.f1_raw.data()[f]);
        grad_band_raw.data_mut()[f] = df2 * f2_gate * sign0(p.band_raw.data()[f]);
    }
    Ok((grad_x, grad_f1_raw, grad_band_raw))
}

#[inline]
fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One-sided magnitude response of a tap row at `fft_size` resolution.
/// Returns (frequency in Hz, magnitude in dB) for bins 0..=fft_size/2.
pub fn frequency_response(taps: &[f64], fft_size: usize, sample_rate_hz: u32) -> Vec<(f64, f64)> {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut buf: Vec<Complex<f64>> = (0..fft_size)
        .map(|i| Complex::new(taps.get(i).copied().unwrap_or(0.0), 0.0))
        .collect();
    fft.process(&mut buf);
    let fs = sample_rate_hz as f64;
    (0..=fft_size / 2)
        .map(|k| {
            let freq = k as f64 * fs / fft_size as f64;
            let mag_db = 20.0 * (buf[k].norm() + 1e-12).log10();
            (freq, mag_db)
        })
        .collect()
}

/// Mean passband level minus mean stopband level in dB, with the passband
/// inset 0.01 and the stopband margin 0.02 in normalized frequency.
pub fn passband_stopband_gap_db(taps: &[f64], f1: f64, f2: f64, fft_size: usize) -> f64 {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_size);
    let mut buf: Vec<Complex<f64>> = (0..fft_size)
        .map(|i| Complex::new(taps.get(i).copied().unwrap_or(0.0), 0.0))
        .collect();
    fft.process(&mut buf);
    let mut pass = (0.0, 0usize);
    let mut stop = (0.0, 0usize);
    for (k, c) in buf.iter().take(fft_size / 2 + 1).enumerate() {
        let f = k as f64 / fft_size as f64; // normalized
        let mag = c.norm();
        if f >= f1 + 0.01 && f <= f2 - 0.01 {
            pass.0 += mag;
            pass.1 += 1;
        } else if f <= f1 - 0.02 || f >= f2 + 0.02 {
            stop.0 += mag;
            stop.1 += 1;
        }
    }
    let pass_mean = pass.0 / pass.1.max(1) as f64;
    let stop_mean = stop.0 / stop.1.max(1) as f64;
    20.0 * (pass_mean / stop_mean.max(1e-300)).log10()
}
