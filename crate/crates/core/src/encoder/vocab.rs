use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIAL: u32 = 4;

const SPECIAL_NAMES: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

/// Whitespace word vocabulary. Ids `0..4` are reserved for PAD, CLS, SEP, UNK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    words: Vec<String>,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::from_words(r.words)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr { words: v.words }
    }
}

impl Vocab {
    /// Content words receive ids starting at 4, in the given order. Duplicates keep their first id.
    pub fn from_words<S: Into<String>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut v = Vocab { words: Vec::new(), index: HashMap::new() };
        for w in words {
            let w = w.into();
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), NUM_SPECIAL + v.words.len() as u32);
                v.words.push(w);
            }
        }
        v
    }

    /// `w0 .. w{n-1}`, the word form used by the synthetic task files.
    pub fn synthetic(content_words: usize) -> Self {
        Self::from_words((0..content_words).map(|i| format!("w{i}")))
    }

    /// Total id space including the special tokens.
    pub fn size(&self) -> usize {
        NUM_SPECIAL as usize + self.words.len()
    }

    pub fn content_ids(&self) -> std::ops::Range<u32> {
        NUM_SPECIAL..self.size() as u32
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        if id < NUM_SPECIAL {
            SPECIAL_NAMES[id as usize]
        } else {
            self.words.get((id - NUM_SPECIAL) as usize).map_or("[UNK]", String::as_str)
        }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// `[CLS] w.. [SEP]`. Unknown words map to `[UNK]`; empty text yields `[CLS, SEP]`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![CLS];
        ids.extend(text.split_whitespace().map(|w| self.id(w)));
        ids.push(SEP);
        ids
    }

    /// `[CLS] a.. [SEP] b.. [SEP]` for sentence-pair tasks.
    pub fn tokenize_pair(&self, first: &str, second: &str) -> Vec<u32> {
        let mut ids = self.tokenize(first);
        ids.extend(second.split_whitespace().map(|w| self.id(w)));
        ids.push(SEP);
        ids
    }

    /// Inverse of [`Vocab::tokenize`] / [`Vocab::tokenize_pair`]: returns the
    /// text segments between separators.
    pub fn detokenize(&self, ids: &[u32]) -> Vec<String> {
        let body = ids.strip_prefix(&[CLS]).unwrap_or(ids);
        let mut segments = Vec::new();
        let mut current: Vec<&str> = Vec::new();
        for &id in body {
            if id == SEP {
                segments.push(current.join(" "));
                current.clear();
            } else if id != PAD {
                current.push(self.word(id));
            }
        }
        if !current.is_empty() {
            segments.push(current.join(" "));
        }
        segments
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        let v = Vocab::from_words(["a", "b"]);
        assert_eq!(v.tokenize(""), vec![CLS, SEP]);
        assert_eq!(v.tokenize("a b"), vec![CLS, 4, 5, SEP]);
        assert_eq!(v.tokenize_pair("a", "b"), vec![CLS, 4, SEP, 5, SEP]);
        assert_eq!(v.tokenize("a zzz"), vec![CLS, 4, UNK, SEP]);
    }

    #[test]
    fn pair_format_round_trips_through_detokenize() {
        let v = Vocab::from_words(["a", "b", "c"]);
        let ids = v.tokenize_pair("a c", "b");
        assert_eq!(v.detokenize(&ids), vec!["a c".to_string(), "b".to_string()]);
        assert_eq!(v.detokenize(&v.tokenize("")), vec![String::new()]);
    }

    #[test]
    fn serde_preserves_ids() {
        let v = Vocab::synthetic(5);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("w3"), 7);
        assert_eq!(back.size(), 9);
    }
}
