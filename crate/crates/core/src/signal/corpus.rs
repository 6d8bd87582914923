//! Deterministic synthetic speaker corpus.
//!
//! Each speaker is a harmonic source (randomized F0 trajectory inside the
//! speaker's range) shaped by a 3-formant resonance envelope, plus a low
//! noise floor. Everything derives from ChaCha streams keyed by
//! (seed, speaker, utterance), so corpora are bit-reproducible and each
//! utterance can be generated independently.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::wav::quantize_to_i16_grid;
use super::{ChunkingConfig, DatasetBuilder, FrameDataset, Waveform};
use crate::error::{Error, Result};

/// Per-speaker source/filter parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VoiceModel {
    /// Fundamental frequency range in Hz; trajectories stay inside it.
    pub f0_range_hz: (f64, f64),
    /// Resonance centers in Hz, ascending.
    pub formants_hz: [f64; 3],
    /// Resonance half-widths in Hz.
    pub bandwidths_hz: [f64; 3],
    /// Additive white noise amplitude relative to the harmonic peak.
    pub noise_floor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    /// First `train_per_speaker` utterances of each speaker go to the train
    /// split, the rest to test (default 5 of 8).
    pub train_per_speaker: usize,
    pub utterance_sec: f64,
    pub sample_rate_hz: u32,
    pub seed: u64,
    pub chunking: ChunkingConfig,
    /// One voice per speaker.
    pub voices: Vec<VoiceModel>,
}

const F0_SEGMENT_MS: f64 = 40.0;
/// Harmonics above this fraction of the sample rate are not rendered.
const HARMONIC_CUTOFF: f64 = 0.47;

fn stream_rng(seed: u64, tag: u64, speaker: u64, utterance: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((tag << 48) | (speaker << 24) | utterance);
    rng
}

impl CorpusSpec {
    /// Derives a spec with voices spaced across the formant plane, jittered
    /// deterministically from the seed.
    pub fn derive(
        num_speakers: usize,
        utterances_per_speaker: usize,
        train_per_speaker: usize,
        utterance_sec: f64,
        sample_rate_hz: u32,
        seed: u64,
    ) -> CorpusSpec {
        let nyquist = sample_rate_hz as f64 / 2.0;
        let voices = (0..num_speakers)
            .map(|s| {
                let mut rng = stream_rng(seed, 1, s as u64, 0);
                let spread = if num_speakers > 1 {
                    (s as f64 + 0.3 * (rng.gen::<f64>() - 0.5)) / (num_speakers as f64 - 1.0)
                } else {
                    0.5
                };
                let f1 = 300.0 + 700.0 * spread;
                let f2 = (f1 * (1.9 + 0.5 * rng.gen::<f64>())).min(0.46 * sample_rate_hz as f64);
                let f3 = (f1 * (2.9 + 0.7 * rng.gen::<f64>())).min(0.47 * sample_rate_hz as f64);
                let f0_lo = 85.0 + 80.0 * rng.gen::<f64>();
                let f0_width = 40.0 + 40.0 * rng.gen::<f64>();
                VoiceModel {
                    f0_range_hz: (f0_lo, (f0_lo + f0_width).min(nyquist / 8.0)),
                    formants_hz: [f1, f2, f3],
                    bandwidths_hz: [
                        70.0 + 60.0 * rng.gen::<f64>(),
                        110.0 + 80.0 * rng.gen::<f64>(),
                        150.0 + 100.0 * rng.gen::<f64>(),
                    ],
                    noise_floor: 0.04 * (0.75 + 0.5 * rng.gen::<f64>()),
                }
            })
            .collect();
        CorpusSpec {
            num_speakers,
            utterances_per_speaker,
            train_per_speaker,
            utterance_sec,
            sample_rate_hz,
            seed,
            chunking: ChunkingConfig::default(),
            voices,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 2 {
            return Err(Error::Config("corpus needs at least 2 speakers".to_string()));
        }
        if self.voices.len() != self.num_speakers {
            return Err(Error::Config(format!(
                "{} voices for {} speakers",
                self.voices.len(),
                self.num_speakers
            )));
        }
        if self.train_per_speaker == 0 || self.train_per_speaker >= self.utterances_per_speaker {
            return Err(Error::Config(format!(
                "train_per_speaker ({}) must leave both splits non-empty out of {} utterances",
                self.train_per_speaker, self.utterances_per_speaker
            )));
        }
        self.chunking.validate()?;
        let samples = (self.utterance_sec * self.sample_rate_hz as f64) as usize;
        if samples < self.chunking.frame_len(self.sample_rate_hz) {
            return Err(Error::Config(
                "utterances are shorter than the frame window".to_string(),
            ));
        }
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        for (s, v) in self.voices.iter().enumerate() {
            if v.formants_hz.iter().any(|&f| f >= nyquist) {
                return Err(Error::Config(format!(
                    "speaker {s}: formant at or above Nyquist ({nyquist} Hz)"
                )));
            }
            if !(v.f0_range_hz.0 > 0.0 && v.f0_range_hz.0 < v.f0_range_hz.1) {
                return Err(Error::Config(format!("speaker {s}: bad F0 range")));
            }
            if v.noise_floor < 0.0 {
                return Err(Error::Config(format!("speaker {s}: negative noise floor")));
            }
        }
        Ok(())
    }
}

/// Formant resonance gain at frequency `f` (sum of Lorentzian peaks plus a
/// small leak so harmonics between formants do not vanish).
fn envelope(f: f64, formants: &[f64; 3], bws: &[f64; 3]) -> f64 {
    const WEIGHTS: [f64; 3] = [1.0, 0.7, 0.45];
    let mut g = 0.02;
    for k in 0..3 {
        let d = (f - formants[k]) / bws[k];
        g += WEIGHTS[k] / (1.0 + d * d);
    }
    g
}

/// Renders one utterance, deterministic in (spec.seed, speaker, utterance).
/// Samples are peak-normalized to 0.9 and quantized onto the i16 grid so
/// the in-memory corpus equals a WAV round-trip bit for bit.
pub fn synth_utterance(spec: &CorpusSpec, speaker: usize, utterance: usize) -> Waveform {
    let fs = spec.sample_rate_hz as f64;
    let n = (spec.utterance_sec * fs).round() as usize;
    let voice = &spec.voices[speaker];
    let mut rng = stream_rng(spec.seed, 2, speaker as u64, utterance as u64);

    // per-utterance formant jitter of +-2.5%
    let mut formants = voice.formants_hz;
    for f in &mut formants {
        *f *= 1.0 + 0.05 * (rng.gen::<f64>() - 0.5);
    }
    let bws = voice.bandwidths_hz;

    // piecewise-linear F0 trajectory over fixed segments
    let seg_len = ((F0_SEGMENT_MS / 1000.0) * fs).round() as usize;
    let num_targets = n / seg_len + 2;
    let (f0_lo, f0_hi) = voice.f0_range_hz;
    let targets: Vec<f64> = (0..num_targets)
        .map(|_| rng.gen_range(f0_lo..f0_hi))
        .collect();

    let max_harmonics = (HARMONIC_CUTOFF * fs / f0_lo).ceil() as usize;
    let rolloff: Vec<f64> = (1..=max_harmonics).map(|h| 1.0 / (h as f64).sqrt()).collect();
    let mut phase = vec![0.0f64; max_harmonics];
    for p in phase.iter_mut() {
        *p = rng.gen_range(0.0..std::f64::consts::TAU);
    }

    let mut samples = Vec::with_capacity(n);
    let two_pi = std::f64::consts::TAU;
    for t in 0..n {
        let seg = t / seg_len;
        let frac = (t % seg_len) as f64 / seg_len as f64;
        let f0 = targets[seg] * (1.0 - frac) + targets[seg + 1] * frac;
        let mut acc = 0.0;
        for (h, (ph, ro)) in phase.iter_mut().zip(&rolloff).enumerate() {
            let f_h = (h + 1) as f64 * f0;
            if f_h >= HARMONIC_CUTOFF * fs {
                break;
            }
            *ph += two_pi * f_h / fs;
            acc += envelope(f_h, &formants, &bws) * ro * ph.sin();
        }
        acc += voice.noise_floor * (2.0 * rng.gen::<f64>() - 1.0);
        samples.push(acc);
    }

    let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-12);
    let scale = 0.9 / peak;
    for s in &mut samples {
        *s = quantize_to_i16_grid(*s * scale);
    }
    Waveform {
        samples,
        sample_rate_hz: spec.sample_rate_hz,
    }
}

/// Generates the whole corpus and splits it by utterance into train/test
/// datasets (standardized frames, silence dropped).
pub fn synth_corpus(spec: &CorpusSpec) -> Result<(FrameDataset, FrameDataset)> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..spec.num_speakers)
        .flat_map(|s| (0..spec.utterances_per_speaker).map(move |u| (s, u)))
        .collect();
    let waves: Vec<Waveform> = jobs
        .par_iter()
        .map(|&(s, u)| synth_utterance(spec, s, u))
        .collect();

    let frame_len = spec.chunking.frame_len(spec.sample_rate_hz);
    let mut train = DatasetBuilder::new(spec.num_speakers, frame_len, spec.chunking.clone());
    let mut test = DatasetBuilder::new(spec.num_speakers, frame_len, spec.chunking.clone());
    for ((speaker, utt), wave) in jobs.into_iter().zip(&waves) {
        let utt_id = (speaker * spec.utterances_per_speaker + utt) as u32;
        let builder = if utt < spec.train_per_speaker { &mut train } else { &mut test };
        builder.add_utterance(wave, speaker, utt_id)?;
    }
    Ok((train.finish()?, test.finish()?))
}
