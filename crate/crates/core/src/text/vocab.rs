//! Symbol vocabularies with fixed reserved ids.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::TextError;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const MASK: usize = 4;
pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<mask>"];

/// Marker appended to every word before subword segmentation.
pub const WORD_END: &str = "</w>";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabularyKind {
    Character,
    Subword,
}

/// Bijective symbol <-> id mapping. Ids 0..4 are pad, bos, eos, unk, mask
/// and are never produced by corpus symbols.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    kind: VocabularyKind,
}

impl Vocabulary {
    pub(crate) fn from_symbols(
        corpus_symbols: Vec<String>,
        kind: VocabularyKind,
    ) -> Vocabulary {
        let mut symbols: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        symbols.extend(corpus_symbols);
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Vocabulary {
            symbols,
            index,
            kind,
        }
    }

    pub fn kind(&self) -> VocabularyKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbol(&self, id: usize) -> &str {
        &self.symbols[id]
    }

    pub fn id_of(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.index.contains_key(symbol)
    }

    /// Hex SHA-256 over the ordered symbol list; used to check target-side
    /// compatibility before decoder transfer.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for s in &self.symbols {
            hasher.update(s.as_bytes());
            hasher.update([0u8]);
        }
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Encodes normalized text to ids (without bos/eos). Unknown symbols
    /// map to unk.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        match self.kind {
            VocabularyKind::Character => text
                .chars()
                .map(|ch| self.id_of(&ch.to_string()).unwrap_or(UNK))
                .collect(),
            VocabularyKind::Subword => {
                let mut ids = Vec::new();
                for word in text.split_whitespace() {
                    let marked = format!("{word}{WORD_END}");
                    self.encode_marked_word(&marked, &mut ids);
                }
                ids
            }
        }
    }

    /// Greedy longest-match segmentation of one word-marked string.
    fn encode_marked_word(&self, marked: &str, out: &mut Vec<usize>) {
        let mut rest = marked;
        while !rest.is_empty() {
            let mut matched = None;
            // Longest prefix present in the vocabulary, excluding reserved.
            let mut end = rest.len();
            while end > 0 {
                if rest.is_char_boundary(end) {
                    let cand = &rest[..end];
                    if let Some(&id) = self.index.get(cand) {
                        if id >= RESERVED.len() {
                            matched = Some((id, end));
                            break;
                        }
                    }
                }
                end -= 1;
            }
            match matched {
                Some((id, end)) => {
                    out.push(id);
                    rest = &rest[end..];
                }
                None => {
                    out.push(UNK);
                    let ch_len = rest.chars().next().unwrap().len_utf8();
                    rest = &rest[ch_len..];
                }
            }
        }
    }

    /// Decodes ids back to text, skipping structural symbols. Unknown
    /// renders as the replacement character.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == PAD || id == BOS || id == EOS || id == MASK {
                continue;
            }
            if id == UNK {
                out.push('\u{FFFD}');
                continue;
            }
            out.push_str(&self.symbols[id]);
        }
        match self.kind {
            VocabularyKind::Character => out,
            VocabularyKind::Subword => out.replace(WORD_END, " ").trim_end().to_string(),
        }
    }

    /// Plain-text format: one symbol per line, line number = id, reserved
    /// symbols first.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TextError> {
        let path = path.as_ref();
        let body = self.symbols.join("\n");
        fs::write(path, body).map_err(|e| TextError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: impl AsRef<Path>, kind: VocabularyKind) -> Result<Vocabulary, TextError> {
        let path = path.as_ref();
        let body = fs::read_to_string(path).map_err(|e| TextError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let symbols: Vec<String> = body.split('\n').map(|s| s.to_string()).collect();
        if symbols.len() < RESERVED.len()
            || symbols[..RESERVED.len()] != RESERVED.map(|s| s.to_string())
        {
            return Err(TextError::MalformedVocab {
                path: path.display().to_string(),
                msg: "reserved symbols missing or reordered".into(),
            });
        }
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(TextError::MalformedVocab {
                    path: path.display().to_string(),
                    msg: format!("duplicate symbol {s:?}"),
                });
            }
        }
        Ok(Vocabulary {
            symbols,
            index,
            kind,
        })
    }
}

/// Builds a character vocabulary: reserved symbols plus all distinct corpus
/// characters (space included), sorted by frequency then codepoint.
pub fn build_char_vocab<S: AsRef<str>>(corpus: &[S]) -> Result<Vocabulary, TextError> {
    if corpus.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let mut freq: HashMap<char, u64> = HashMap::new();
    for line in corpus {
        for ch in line.as_ref().chars() {
            *freq.entry(ch).or_insert(0) += 1;
        }
    }
    let mut chars: Vec<(char, u64)> = freq.into_iter().collect();
    chars.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let symbols = chars.into_iter().map(|(c, _)| c.to_string()).collect();
    Ok(Vocabulary::from_symbols(symbols, VocabularyKind::Character))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_vocab_of_two_letter_corpus() {
        let v = build_char_vocab(&["ab", "ba"]).unwrap();
        assert_eq!(v.size(), 7);
        assert_eq!(v.symbol(5), "a");
        assert_eq!(v.symbol(6), "b");
        for (i, s) in RESERVED.iter().enumerate() {
            assert_eq!(v.symbol(i), *s);
        }
    }

    #[test]
    fn char_vocab_is_deterministic() {
        let corpus = ["the cat", "sat on", "the mat"];
        let a = build_char_vocab(&corpus).unwrap();
        let b = build_char_vocab(&corpus).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn empty_corpus_rejected() {
        let none: [&str; 0] = [];
        assert!(matches!(
            build_char_vocab(&none),
            Err(TextError::EmptyCorpus)
        ));
    }

    #[test]
    fn encode_decode_identity_for_in_vocab_text() {
        let v = build_char_vocab(&["hello world"]).unwrap();
        let ids = v.encode("hello world");
        assert_eq!(v.decode(&ids), "hello world");
        let again = v.encode(&v.decode(&ids));
        assert_eq!(ids, again);
    }

    #[test]
    fn out_of_vocab_maps_to_unk() {
        let v = build_char_vocab(&["abc"]).unwrap();
        let ids = v.encode("axc");
        assert_eq!(ids[1], UNK);
    }

    #[test]
    fn save_load_round_trip_with_space_symbol() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = build_char_vocab(&["a b", "b a"]).unwrap();
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path, VocabularyKind::Character).unwrap();
        assert_eq!(back.size(), v.size());
        assert_eq!(back.fingerprint(), v.fingerprint());
        assert!(back.contains(" "));
    }
}
