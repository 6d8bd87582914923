//! Waveform ingestion, framing, per-chunk standardization, mel conversions
//! and the synthetic speaker corpus.

mod corpus;
mod wav;

pub use corpus::{synth_corpus, synth_utterance, CorpusSpec, VoiceModel};
pub use wav::{decode_wav, encode_wav, read_wav, write_wav};

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ndarr::Tensor;

/// Std-dev floor: frames quieter than this before the guard are silence and
/// get dropped at dataset build.
pub const SILENCE_STD: f64 = 1e-8;

/// Mono waveform with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / self.sample_rate_hz as f64
    }
}

/// How utterances are cut into fixed-length frames.
///
/// `hop_ms` defaults to `window_ms - overlap_ms` (consecutive frames share
/// `overlap_ms` of signal). Some descendants of this model family read the
/// overlap figure as the hop itself; set `hop_ms` explicitly to get that
/// behavior.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkingConfig {
    pub window_ms: f64,
    pub overlap_ms: f64,
    pub hop_ms: Option<f64>,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        ChunkingConfig {
            window_ms: 200.0,
            overlap_ms: 10.0,
            hop_ms: None,
        }
    }
}

impl ChunkingConfig {
    pub fn effective_hop_ms(&self) -> f64 {
        self.hop_ms.unwrap_or(self.window_ms - self.overlap_ms)
    }

    pub fn frame_len(&self, sample_rate_hz: u32) -> usize {
        (self.window_ms * sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.window_ms > self.overlap_ms && self.overlap_ms >= 0.0) {
            return Err(Error::Config(format!(
                "window_ms ({}) must exceed overlap_ms ({}) and overlap must be non-negative",
                self.window_ms, self.overlap_ms
            )));
        }
        if self.effective_hop_ms() <= 0.0 {
            return Err(Error::Config("hop must be positive".to_string()));
        }
        Ok(())
    }
}

/// Start sample of frame `i`: `round(i * hop_ms * fs / 1000)`. Frames are
/// emitted while they lie fully inside the signal.
pub fn chunk_starts(num_samples: usize, sample_rate_hz: u32, window_ms: f64, hop_ms: f64) -> (usize, Vec<usize>) {
    let frame_len = (window_ms * sample_rate_hz as f64 / 1000.0).round() as usize;
    let mut starts = Vec::new();
    let mut i = 0usize;
    loop {
        let start = (i as f64 * hop_ms * sample_rate_hz as f64 / 1000.0).round() as usize;
        if start + frame_len > num_samples {
            break;
        }
        starts.push(start);
        i += 1;
    }
    (frame_len, starts)
}

/// Cuts a waveform into fixed-length frames with the given window/overlap.
pub fn chunk(w: &Waveform, window_ms: f64, overlap_ms: f64) -> Result<Vec<Vec<f64>>> {
    let cfg = ChunkingConfig {
        window_ms,
        overlap_ms,
        hop_ms: None,
    };
    chunk_with_config(w, &cfg)
}

pub fn chunk_with_config(w: &Waveform, cfg: &ChunkingConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let (frame_len, starts) = chunk_starts(
        w.samples.len(),
        w.sample_rate_hz,
        cfg.window_ms,
        cfg.effective_hop_ms(),
    );
    Ok(starts
        .into_iter()
        .map(|s| w.samples[s..s + frame_len].to_vec())
        .collect())
}

/// Population mean and standard deviation of a frame.
pub fn frame_stats(frame: &[f64]) -> (f64, f64) {
    let n = frame.len() as f64;
    let mean = frame.iter().sum::<f64>() / n;
    let var = frame.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Zero mean, unit population std, with the guard `std <- max(std, 1e-8)`
/// so constant frames map to zeros (the sub-guard residue is rounding noise,
/// not signal, so it is zeroed outright).
pub fn standardize_chunk(frame: &[f64]) -> Vec<f64> {
    let (mean, std) = frame_stats(frame);
    if std < SILENCE_STD {
        return vec![0.0; frame.len()];
    }
    frame.iter().map(|v| (v - mean) / std).collect()
}

/// HTK mel scale: `2595 * log10(1 + f/700)`.
pub fn mel(f_hz: f64) -> Result<f64> {
    if f_hz < 0.0 {
        return Err(Error::InvalidArg {
            op: "mel",
            msg: format!("negative frequency {f_hz}"),
        });
    }
    Ok(2595.0 * (1.0 + f_hz / 700.0).log10())
}

/// Exact inverse of [`mel`].
pub fn mel_inv(m: f64) -> Result<f64> {
    if m < 0.0 {
        return Err(Error::InvalidArg {
            op: "mel_inv",
            msg: format!("negative mel value {m}"),
        });
    }
    Ok(700.0 * (10f64.powf(m / 2595.0) - 1.0))
}

/// Standardized fixed-length frames with speaker labels and utterance
/// provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameDataset {
    pub frames: Tensor, // [N, frame_len]
    pub labels: Vec<usize>,
    pub utterance_ids: Vec<u32>,
    pub num_speakers: usize,
    pub frame_len: usize,
}

impl FrameDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        self.frames.row(i)
    }

    /// Gathers the given rows into a `[B, frame_len]` batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.frame_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.frame(i));
            labels.push(self.labels[i]);
        }
        let t = Tensor::from_vec(&[indices.len(), self.frame_len], data).expect("gather shape");
        (t, labels)
    }

    /// Checks the dataset invariants: label range and per-frame statistics.
    pub fn validate(&self) -> Result<()> {
        if self.frames.shape() != [self.len(), self.frame_len] {
            return Err(Error::Config("frame tensor shape mismatch".to_string()));
        }
        if self.utterance_ids.len() != self.len() {
            return Err(Error::Config("utterance id count mismatch".to_string()));
        }
        for (&l, i) in self.labels.iter().zip(0..) {
            if l >= self.num_speakers {
                return Err(Error::Config(format!(
                    "frame {i}: label {l} out of range for {} speakers",
                    self.num_speakers
                )));
            }
        }
        for i in 0..self.len() {
            let (mean, std) = frame_stats(self.frame(i));
            if mean.abs() >= 1e-9 || (std - 1.0).abs() >= 1e-9 {
                return Err(Error::Config(format!(
                    "frame {i} not standardized: mean {mean:e}, std {std}"
                )));
            }
        }
        Ok(())
    }
}

/// Accumulates standardized frames utterance by utterance. Silence frames
/// (pre-guard std below [`SILENCE_STD`]) are dropped here.
pub struct DatasetBuilder {
    data: Vec<f64>,
    labels: Vec<usize>,
    utterance_ids: Vec<u32>,
    num_speakers: usize,
    frame_len: usize,
    chunking: ChunkingConfig,
}

impl DatasetBuilder {
    pub fn new(num_speakers: usize, frame_len: usize, chunking: ChunkingConfig) -> DatasetBuilder {
        DatasetBuilder {
            data: Vec::new(),
            labels: Vec::new(),
            utterance_ids: Vec::new(),
            num_speakers,
            frame_len,
            chunking,
        }
    }

    /// Chunks, drops silence, standardizes, appends. Returns frames kept.
    pub fn add_utterance(&mut self, w: &Waveform, speaker: usize, utterance_id: u32) -> Result<usize> {
        if speaker >= self.num_speakers {
            return Err(Error::LabelOutOfRange {
                label: speaker,
                classes: self.num_speakers,
            });
        }
        let frames = chunk_with_config(w, &self.chunking)?;
        let mut kept = 0;
        for frame in &frames {
            if frame.len() != self.frame_len {
                return Err(Error::Config(format!(
                    "chunk length {} does not match dataset frame length {}",
                    frame.len(),
                    self.frame_len
                )));
            }
            let (_, std) = frame_stats(frame);
            if std < SILENCE_STD {
                continue; // silence
            }
            self.data.extend(standardize_chunk(frame));
            self.labels.push(speaker);
            self.utterance_ids.push(utterance_id);
            kept += 1;
        }
        Ok(kept)
    }

    pub fn finish(self) -> Result<FrameDataset> {
        if self.labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = self.labels.len();
        let ds = FrameDataset {
            frames: Tensor::from_vec(&[n, self.frame_len], self.data)?,
            labels: self.labels,
            utterance_ids: self.utterance_ids,
            num_speakers: self.num_speakers,
            frame_len: self.frame_len,
        };
        Ok(ds)
    }
}

/// Train/test membership of an utterance in the corpus manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub path: String,
    pub speaker_id: usize,
    pub split: Split,
}

/// Writes `manifest.csv` with columns `path,speaker_id,split`.
pub fn write_manifest(dir: &Path, rows: &[ManifestRow]) -> Result<PathBuf> {
    let path = dir.join("manifest.csv");
    let mut out = String::from("path,speaker_id,split\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.path, r.speaker_id, r.split));
    }
    std::fs::write(&path, out)?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "manifest line {}: expected 3 columns, got {}",
                idx + 1,
                parts.len()
            )));
        }
        let speaker_id = parts[1].parse::<usize>().map_err(|_| {
            Error::Config(format!("manifest line {}: bad speaker_id {:?}", idx + 1, parts[1]))
        })?;
        let split = match parts[2] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(Error::Config(format!(
                    "manifest line {}: unknown split {other:?}",
                    idx + 1
                )))
            }
        };
        rows.push(ManifestRow {
            path: parts[0].to_string(),
            speaker_id,
            split,
        });
    }
    Ok(rows)
}

/// Builds a [`FrameDataset`] for one split from a corpus directory holding
/// `manifest.csv` and the WAV files it names.
pub fn load_dataset(dir: &Path, chunking: &ChunkingConfig, split: Split) -> Result<FrameDataset> {
    let rows = read_manifest(&dir.join("manifest.csv"))?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let num_speakers = rows.iter().map(|r| r.speaker_id).max().unwrap() + 1;
    let mut builder: Option<DatasetBuilder> = None;
    for (utt_id, row) in rows.iter().enumerate() {
        if row.split != split {
            continue;
        }
        let w = read_wav(&dir.join(&row.path))?;
        let b = builder.get_or_insert_with(|| {
            DatasetBuilder::new(num_speakers, chunking.frame_len(w.sample_rate_hz), chunking.clone())
        });
        b.add_utterance(&w, row.speaker_id, utt_id as u32)?;
    }
    builder.ok_or(Error::EmptyDataset)?.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_positions_for_one_second() {
        let w = Waveform {
            samples: vec![0.1; 16000],
            sample_rate_hz: 16000,
        };
        let frames = chunk(&w, 200.0, 10.0).unwrap();
        assert_eq!(frames.len(), 5);
        let (len, starts) = chunk_starts(16000, 16000, 200.0, 190.0);
        assert_eq!(len, 3200);
        // 0/190/380/570/760 ms at 16 kHz
        assert_eq!(starts, vec![0, 3040, 6080, 9120, 12160]);
    }

    #[test]
    fn chunk_exactly_one_window() {
        let w = Waveform {
            samples: vec![0.5; 3200],
            sample_rate_hz: 16000,
        };
        assert_eq!(chunk(&w, 200.0, 10.0).unwrap().len(), 1);
    }

    #[test]
    fn chunk_shorter_than_window() {
        let w = Waveform {
            samples: vec![0.5; 3199],
            sample_rate_hz: 16000,
        };
        assert_eq!(chunk(&w, 200.0, 10.0).unwrap().len(), 0);
    }

    #[test]
    fn chunk_rejects_window_not_exceeding_overlap() {
        let w = Waveform {
            samples: vec![0.0; 100],
            sample_rate_hz: 16000,
        };
        assert!(chunk(&w, 10.0, 10.0).is_err());
    }

    #[test]
    fn chunk_count_formula_matches_enumerator_0_to_2000_ms() {
        // count = floor((len_ms - window)/hop) + 1 for len_ms >= window, else 0
        let fs = 16000u32;
        let (window, hop) = (200.0f64, 190.0f64);
        for len_ms in 0..=2000usize {
            let n = len_ms * fs as usize / 1000;
            let (_, starts) = chunk_starts(n, fs, window, hop);
            let expect = if (len_ms as f64) >= window {
                ((len_ms as f64 - window) / hop).floor() as usize + 1
            } else {
                0
            };
            assert_eq!(starts.len(), expect, "len_ms={len_ms}");
        }
    }

    #[test]
    fn standardize_constant_frame_is_zero() {
        let out = standardize_chunk(&[0.7; 64]);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardize_symmetric_pair_fixed_point() {
        assert_eq!(standardize_chunk(&[-1.0, 1.0]), vec![-1.0, 1.0]);
    }

    #[test]
    fn standardize_statistics() {
        let frame: Vec<f64> = (0..500).map(|i| ((i * i) % 97) as f64 * 0.03 - 1.2).collect();
        let out = standardize_chunk(&frame);
        let (mean, std) = frame_stats(&out);
        assert!(mean.abs() < 1e-12);
        assert!((std - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mel_endpoints() {
        assert_eq!(mel(0.0).unwrap(), 0.0);
        let m700 = mel(700.0).unwrap();
        assert!((m700 - 2595.0 * 2f64.log10()).abs() < 1e-9);
        assert!((m700 - 781.17).abs() < 0.01);
        assert!(mel(-1.0).is_err());
        assert!(mel_inv(-1.0).is_err());
    }

    #[test]
    fn mel_inverse_round_trip() {
        for f in [50.0, 1000.0, 8000.0] {
            let back = mel_inv(mel(f).unwrap()).unwrap();
            assert!((back - f).abs() / f < 1e-9);
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            ManifestRow {
                path: "spk0_utt0.wav".to_string(),
                speaker_id: 0,
                split: Split::Train,
            },
            ManifestRow {
                path: "spk1_utt7.wav".to_string(),
                speaker_id: 1,
                split: Split::Test,
            },
        ];
        let path = write_manifest(dir.path(), &rows).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), rows);
    }

    #[test]
    fn builder_drops_silence_frames() {
        let mut w = Waveform {
            samples: vec![0.0; 6400],
            sample_rate_hz: 16000,
        };
        // second frame is non-silent
        for (i, v) in w.samples[3200..].iter_mut().enumerate() {
            *v = ((i as f64) * 0.01).sin() * 0.5;
        }
        let cfg = ChunkingConfig {
            window_ms: 200.0,
            overlap_ms: 0.0,
            hop_ms: None,
        };
        let mut b = DatasetBuilder::new(2, 3200, cfg);
        let kept = b.add_utterance(&w, 1, 0).unwrap();
        assert_eq!(kept, 1);
        let ds = b.finish().unwrap();
        assert_eq!(ds.len(), 1);
        ds.validate().unwrap();
    }
}
