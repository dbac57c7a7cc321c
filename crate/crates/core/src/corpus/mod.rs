//! Corpus ingestion (manifest TSV) and statistics.

pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::text::normalize;

pub use synth::{spectral_peak_transcript, synth_corpus, write_synth_corpus, SynthSpec, SynthUtterance};

pub const MANIFEST_HEADER: &str = "id\taudio_path\tsrc_lang\ttgt_lang\tsrc_text\ttgt_text";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad manifest header (expected {MANIFEST_HEADER:?})")]
    Header { path: String },
    #[error("{path} row {row}: expected 6 tab-separated fields, found {found}")]
    FieldCount {
        path: String,
        row: usize,
        found: usize,
    },
    #[error("{path} row {row}: duplicate utterance id {id:?}")]
    DuplicateId {
        path: String,
        row: usize,
        id: String,
    },
    #[error("{path} row {row}: audio file {audio:?} does not exist")]
    MissingAudio {
        path: String,
        row: usize,
        audio: String,
    },
}

/// One corpus row: audio reference, transcript, optional translation.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub audio_path: PathBuf,
    pub src_lang: String,
    pub tgt_lang: String,
    /// Raw fields as read from the manifest.
    pub src_text_raw: String,
    pub tgt_text_raw: String,
    /// Normalized transcript (punctuation removed).
    pub src_text: String,
    /// Normalized translation (punctuation kept); empty for ASR-only rows.
    pub tgt_text: String,
}

impl Utterance {
    pub fn has_translation(&self) -> bool {
        !self.tgt_text.is_empty()
    }
}

/// Parses a manifest TSV. Relative audio paths resolve against the manifest's
/// directory; audio existence is checked, decoding is deferred.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Utterance>, CorpusError> {
    let path = path.as_ref();
    let p = || path.display().to_string();
    let body = fs::read_to_string(path).map_err(|e| CorpusError::Io {
        path: p(),
        source: e,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = body.lines();
    match lines.next() {
        Some(h) if h == MANIFEST_HEADER => {}
        _ => return Err(CorpusError::Header { path: p() }),
    }
    let mut seen: HashSet<String> = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2; // 1-based, after the header
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(CorpusError::FieldCount {
                path: p(),
                row,
                found: fields.len(),
            });
        }
        let id = fields[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId { path: p(), row, id });
        }
        let audio_rel = Path::new(fields[1]);
        let audio_path = if audio_rel.is_absolute() {
            audio_rel.to_path_buf()
        } else {
            base.join(audio_rel)
        };
        if !audio_path.exists() {
            return Err(CorpusError::MissingAudio {
                path: p(),
                row,
                audio: fields[1].to_string(),
            });
        }
        out.push(Utterance {
            id,
            audio_path,
            src_lang: fields[2].to_string(),
            tgt_lang: fields[3].to_string(),
            src_text_raw: fields[4].to_string(),
            tgt_text_raw: fields[5].to_string(),
            src_text: normalize(fields[4], true),
            tgt_text: normalize(fields[5], false),
        });
    }
    Ok(out)
}

/// Writes a manifest preserving the raw text fields. Audio paths are written
/// relative to the manifest directory when possible.
pub fn write_manifest(path: impl AsRef<Path>, utts: &[Utterance]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut body = String::from(MANIFEST_HEADER);
    for u in utts {
        let audio = u
            .audio_path
            .strip_prefix(base)
            .unwrap_or(&u.audio_path)
            .display()
            .to_string();
        body.push('\n');
        body.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            u.id, audio, u.src_lang, u.tgt_lang, u.src_text_raw, u.tgt_text_raw
        ));
    }
    body.push('\n');
    fs::write(path, body).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub utterances: usize,
    pub hours: f64,
    pub char_histogram: BTreeMap<char, u64>,
}

/// Utterance count, total audio hours, and a character histogram over the
/// normalized transcripts and translations.
pub fn corpus_stats(utts: &[Utterance], sample_counts: &[usize]) -> CorpusStats {
    let total_samples: usize = sample_counts.iter().sum();
    let mut hist = BTreeMap::new();
    for u in utts {
        for ch in u.src_text.chars().chain(u.tgt_text.chars()) {
            *hist.entry(ch).or_insert(0) += 1;
        }
    }
    CorpusStats {
        utterances: utts.len(),
        hours: total_samples as f64 / 16_000.0 / 3600.0,
        char_histogram: hist,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch_wav(dir: &Path, name: &str) {
        let w = crate::audio::Waveform::new(vec![0.0; 400]).unwrap();
        crate::audio::write_wav(dir.join(name), &w).unwrap();
    }

    fn utt(dir: &Path, id: &str, src: &str, tgt: &str) -> Utterance {
        Utterance {
            id: id.to_string(),
            audio_path: dir.join(format!("{id}.wav")),
            src_lang: "en".into(),
            tgt_lang: "en".into(),
            src_text_raw: src.to_string(),
            tgt_text_raw: tgt.to_string(),
            src_text: normalize(src, true),
            tgt_text: normalize(tgt, false),
        }
    }

    #[test]
    fn empty_body_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(&path, format!("{MANIFEST_HEADER}\n")).unwrap();
        assert!(load_manifest(&path).unwrap().is_empty());
    }

    #[test]
    fn duplicate_id_names_the_id_and_row() {
        let dir = tempfile::tempdir().unwrap();
        touch_wav(dir.path(), "u1.wav");
        let path = dir.path().join("m.tsv");
        fs::write(
            &path,
            format!("{MANIFEST_HEADER}\nu1\tu1.wav\ten\tfr\ta\tb\nu1\tu1.wav\ten\tfr\tc\td\n"),
        )
        .unwrap();
        match load_manifest(&path) {
            Err(CorpusError::DuplicateId { id, row, .. }) => {
                assert_eq!(id, "u1");
                assert_eq!(row, 3);
            }
            other => panic!("expected duplicate id error, got {other:?}"),
        }
    }

    #[test]
    fn missing_audio_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(
            &path,
            format!("{MANIFEST_HEADER}\nu1\tnope.wav\ten\tfr\ta\tb\n"),
        )
        .unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(CorpusError::MissingAudio { row: 2, .. })
        ));
    }

    #[test]
    fn write_then_load_preserves_fields() {
        let dir = tempfile::tempdir().unwrap();
        touch_wav(dir.path(), "a.wav");
        touch_wav(dir.path(), "b.wav");
        let utts = vec![
            utt(dir.path(), "a", "Hello, World!", "Bonjour!"),
            utt(dir.path(), "b", "second one", ""),
        ];
        let path = dir.path().join("m.tsv");
        write_manifest(&path, &utts).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back, utts);
        assert!(back[0].has_translation());
        assert!(!back[1].has_translation());
    }

    #[test]
    fn stats_on_single_second() {
        let dir = tempfile::tempdir().unwrap();
        let utts = vec![utt(dir.path(), "a", "ab", "ba")];
        let s = corpus_stats(&utts, &[16_000]);
        assert_eq!(s.utterances, 1);
        assert!((s.hours - 1.0 / 3600.0).abs() < 1e-12);
        assert_eq!(s.char_histogram[&'a'], 2);
        let empty = corpus_stats(&[], &[]);
        assert_eq!(empty.utterances, 0);
        assert_eq!(empty.hours, 0.0);
    }
}
