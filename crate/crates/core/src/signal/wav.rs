//! RIFF/WAVE reader and writer for 16-bit PCM mono files.

use std::path::Path;

use super::Waveform;
use crate::error::{Result, WavError};

fn read_u16(bytes: &[u8], at: usize, what: &'static str) -> std::result::Result<u16, WavError> {
    bytes
        .get(at..at + 2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or(WavError::Truncated(what))
}

fn read_u32(bytes: &[u8], at: usize, what: &'static str) -> std::result::Result<u32, WavError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(WavError::Truncated(what))
}

/// Decodes a PCM 16-bit mono RIFF/WAVE buffer. Samples are scaled by
/// 1/32768 into [-1, 1].
pub fn decode_wav(bytes: &[u8]) -> std::result::Result<Waveform, WavError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" {
        return Err(WavError::NotRiff);
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(WavError::NotWave);
    }

    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4, "chunk header")? as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(WavError::Truncated(if id == b"data" { "data" } else { "chunk" }));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(WavError::Truncated("fmt "));
                }
                let format = read_u16(bytes, body_start, "fmt ")?;
                let channels = read_u16(bytes, body_start + 2, "fmt ")?;
                let rate = read_u32(bytes, body_start + 4, "fmt ")?;
                let bits = read_u16(bytes, body_start + 14, "fmt ")?;
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(&bytes[body_start..body_start + size]),
            _ => {}
        }
        pos = body_start + size + (size & 1); // chunks are word-aligned
    }

    let (format, channels, rate, bits) = fmt.ok_or(WavError::MissingChunk("fmt "))?;
    if format != 1 {
        return Err(WavError::UnsupportedFormat(format));
    }
    if channels != 1 {
        return Err(WavError::UnsupportedChannels(channels));
    }
    if bits != 16 {
        return Err(WavError::UnsupportedBitDepth(bits));
    }
    let data = data.ok_or(WavError::MissingChunk("data"))?;
    if data.len() % 2 != 0 {
        return Err(WavError::Truncated("data"));
    }
    let samples = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate_hz: rate,
    })
}

/// Encodes as PCM 16-bit mono; samples quantized with `round(s * 32768)`
/// clamped to the i16 range, the exact inverse of the decode scaling on
/// grid points.
pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_len = w.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate_hz * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in &w.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = std::fs::read(path)?;
    Ok(decode_wav(&bytes)?)
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    std::fs::write(path, encode_wav(w))?;
    Ok(())
}

/// Quantizes a sample onto the decoded i16 grid: what a WAV round-trip
/// would return. The in-memory corpus applies this so that datasets built
/// directly and datasets reloaded from disk are bit-identical.
pub fn quantize_to_i16_grid(s: f64) -> f64 {
    let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
    q as f64 / 32768.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav_bytes(samples: &[i16], channels: u16, bits: u16, format: u16) -> Vec<u8> {
        let data_len = samples.len() * 2;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&format.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&16000u32.to_le_bytes());
        out.extend_from_slice(&(16000u32 * 2).to_le_bytes());
        out.extend_from_slice(&2u16.to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data_len as u32).to_le_bytes());
        for s in samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    #[test]
    fn scaling_definition() {
        let bytes = wav_bytes(&[0, 16384, -32768], 1, 16, 1);
        let w = decode_wav(&bytes).unwrap();
        assert_eq!(w.samples, vec![0.0, 0.5, -1.0]);
        assert_eq!(w.sample_rate_hz, 16000);
    }

    #[test]
    fn stereo_is_rejected() {
        let bytes = wav_bytes(&[0, 0], 2, 16, 1);
        assert_eq!(decode_wav(&bytes), Err(WavError::UnsupportedChannels(2)));
    }

    #[test]
    fn non_pcm_is_rejected() {
        let bytes = wav_bytes(&[0], 1, 16, 3);
        assert_eq!(decode_wav(&bytes), Err(WavError::UnsupportedFormat(3)));
    }

    #[test]
    fn wrong_bit_depth_is_rejected() {
        let bytes = wav_bytes(&[0], 1, 8, 1);
        assert_eq!(decode_wav(&bytes), Err(WavError::UnsupportedBitDepth(8)));
    }

    #[test]
    fn truncated_data_chunk_is_rejected() {
        let mut bytes = wav_bytes(&[1, 2, 3, 4], 1, 16, 1);
        bytes.truncate(bytes.len() - 3);
        assert_eq!(decode_wav(&bytes), Err(WavError::Truncated("data")));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = wav_bytes(&[1], 1, 16, 1);
        bytes[0] = b'X';
        assert_eq!(decode_wav(&bytes), Err(WavError::NotRiff));
        let mut bytes = wav_bytes(&[1], 1, 16, 1);
        bytes[8] = b'X';
        assert_eq!(decode_wav(&bytes), Err(WavError::NotWave));
    }

    #[test]
    fn round_trip_reproduces_int_samples_exactly() {
        let ints: Vec<i16> = vec![0, 1, -1, 12345, -12345, 32767, -32768, 100, -99];
        let bytes = wav_bytes(&ints, 1, 16, 1);
        let w = decode_wav(&bytes).unwrap();
        let re = encode_wav(&w);
        let w2 = decode_wav(&re).unwrap();
        assert_eq!(w.samples, w2.samples);
        // int payloads identical
        assert_eq!(&bytes[44..], &re[44..]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let w = Waveform {
            samples: (0..200).map(|i| ((i as f64) * 0.13).sin() * 0.8).collect(),
            sample_rate_hz: 8000,
        };
        write_wav(&path, &w).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.sample_rate_hz, 8000);
        // values land on the quantization grid
        for (a, b) in w.samples.iter().zip(&r.samples) {
            assert!((a - b).abs() <= 0.5 / 32768.0);
            assert_eq!(quantize_to_i16_grid(*a), *b);
        }
    }
}
