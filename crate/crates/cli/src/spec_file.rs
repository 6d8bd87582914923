//! Corpus spec files: flat `key=value`, same idiom as training configs.
//! Voice models are derived deterministically from the seed, so the file
//! stays small and the corpus stays reproducible.

use amsincnet_core::error::{Error, Result};
use amsincnet_core::signal::{ChunkingConfig, CorpusSpec};

struct RawSpec {
    num_speakers: usize,
    utterances_per_speaker: usize,
    train_per_speaker: usize,
    utterance_sec: f64,
    sample_rate_hz: u32,
    seed: u64,
    window_ms: f64,
    overlap_ms: f64,
    hop_ms: Option<f64>,
}

impl Default for RawSpec {
    fn default() -> Self {
        RawSpec {
            num_speakers: 8,
            utterances_per_speaker: 8,
            train_per_speaker: 5,
            utterance_sec: 1.0,
            sample_rate_hz: 8000,
            seed: 1000,
            window_ms: 200.0,
            overlap_ms: 10.0,
            hop_ms: None,
        }
    }
}

pub fn parse_corpus_spec(text: &str) -> Result<CorpusSpec> {
    let mut raw = RawSpec::default();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = idx + 1;
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {lineno}: expected key=value")))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = || Error::Config(format!("line {lineno}: invalid value for {key:?}: {value:?}"));
        match key {
            "corpus.num_speakers" => raw.num_speakers = value.parse().map_err(|_| bad())?,
            "corpus.utterances_per_speaker" => {
                raw.utterances_per_speaker = value.parse().map_err(|_| bad())?
            }
            "corpus.train_per_speaker" => raw.train_per_speaker = value.parse().map_err(|_| bad())?,
            "corpus.utterance_sec" => raw.utterance_sec = value.parse().map_err(|_| bad())?,
            "corpus.sample_rate_hz" => raw.sample_rate_hz = value.parse().map_err(|_| bad())?,
            "corpus.seed" => raw.seed = value.parse().map_err(|_| bad())?,
            "corpus.window_ms" => raw.window_ms = value.parse().map_err(|_| bad())?,
            "corpus.overlap_ms" => raw.overlap_ms = value.parse().map_err(|_| bad())?,
            "corpus.hop_ms" => {
                raw.hop_ms = if value.is_empty() || value == "none" {
                    None
                } else {
                    Some(value.parse().map_err(|_| bad())?)
                }
            }
            _ => return Err(Error::Config(format!("line {lineno}: unknown key {key:?}"))),
        }
    }
    let mut spec = CorpusSpec::derive(
        raw.num_speakers,
        raw.utterances_per_speaker,
        raw.train_per_speaker,
        raw.utterance_sec,
        raw.sample_rate_hz,
        raw.seed,
    );
    spec.chunking = ChunkingConfig {
        window_ms: raw.window_ms,
        overlap_ms: raw.overlap_ms,
        hop_ms: raw.hop_ms,
    };
    spec.validate()?;
    Ok(spec)
}

/// Canonical resolved text, written next to generated corpora so training
/// and evaluation reuse exactly the same chunking.
pub fn corpus_spec_text(spec: &CorpusSpec) -> String {
    format!(
        "corpus.hop_ms={}\n\
         corpus.num_speakers={}\n\
         corpus.overlap_ms={:?}\n\
         corpus.sample_rate_hz={}\n\
         corpus.seed={}\n\
         corpus.train_per_speaker={}\n\
         corpus.utterance_sec={:?}\n\
         corpus.utterances_per_speaker={}\n\
         corpus.window_ms={:?}\n",
        spec.chunking
            .hop_ms
            .map(|v| format!("{v:?}"))
            .unwrap_or_else(|| "none".to_string()),
        spec.num_speakers,
        spec.chunking.overlap_ms,
        spec.sample_rate_hz,
        spec.seed,
        spec.train_per_speaker,
        spec.utterance_sec,
        spec.utterances_per_speaker,
        spec.chunking.window_ms,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip() {
        let spec = parse_corpus_spec("corpus.num_speakers=4\ncorpus.seed=7\n").unwrap();
        assert_eq!(spec.num_speakers, 4);
        assert_eq!(spec.seed, 7);
        assert_eq!(spec.voices.len(), 4);
        let text = corpus_spec_text(&spec);
        let back = parse_corpus_spec(&text).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn bad_lines_are_reported_with_position() {
        let err = parse_corpus_spec("corpus.num_speakers=4\nwhat=1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = parse_corpus_spec("corpus.seed=x\n").unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("corpus.seed"), "{err}");
    }

    #[test]
    fn invalid_specs_are_rejected_at_parse() {
        assert!(parse_corpus_spec("corpus.num_speakers=1\n").is_err());
        assert!(parse_corpus_spec("corpus.train_per_speaker=8\n").is_err());
    }
}
