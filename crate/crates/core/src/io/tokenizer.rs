//! Whitespace-and-punctuation tokenizer with a flat vocabulary.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
const RESERVED: [&str; 4] = [PAD, UNK, CLS, SEP];

/// Splits on whitespace; every punctuation character becomes its own token.
pub fn split_words(text: &str, lowercase: bool) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_ascii()) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else if lowercase {
            cur.extend(ch.to_lowercase());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Token ids plus a mask, padded or truncated to a fixed length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Encoding {
    /// The ids at real (unpadded) positions.
    pub fn real_ids(&self) -> Vec<usize> {
        self.ids.iter().zip(&self.mask).filter(|(_, &m)| m).map(|(&i, _)| i).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub lowercase: bool,
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// `tokens` must start with the four reserved entries and hold no
    /// duplicates.
    pub fn from_tokens(tokens: Vec<String>, lowercase: bool) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(t, r)| t != r) {
            return Err(Error::input("vocabulary must start with [PAD], [UNK], [CLS], [SEP]"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::input(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self {
            lowercase,
            tokens,
            index,
        })
    }

    /// Builds a vocabulary from a corpus: tokens ordered by descending
    /// frequency, ties alphabetically, keeping those seen `min_count` times.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, lowercase: bool, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in split_words(t, lowercase) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count && !RESERVED.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens, lowercase).expect("reserved prefix and unique keys")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]`, trimming the longer text
    /// first when it does not fit, then padded to `max_len`.
    pub fn encode(&self, text: &str, text_b: Option<&str>, max_len: usize) -> Encoding {
        let mut a: Vec<usize> = split_words(text, self.lowercase).iter().map(|w| self.id(w)).collect();
        let mut b: Option<Vec<usize>> = text_b.map(|t| split_words(t, self.lowercase).iter().map(|w| self.id(w)).collect());
        let special = if b.is_some() { 3 } else { 2 };
        let budget = max_len.saturating_sub(special);
        loop {
            let lb = b.as_ref().map_or(0, Vec::len);
            if a.len() + lb <= budget {
                break;
            }
            match &mut b {
                Some(b) if b.len() > a.len() => {
                    b.pop();
                }
                _ if !a.is_empty() => {
                    a.pop();
                }
                Some(b) => {
                    b.pop();
                }
                None => break,
            }
        }
        let mut ids = vec![CLS_ID];
        ids.extend(a);
        ids.push(SEP_ID);
        if let Some(b) = b {
            ids.extend(b);
            ids.push(SEP_ID);
        }
        ids.truncate(max_len);
        let real = ids.len();
        ids.resize(max_len, PAD_ID);
        let mask = (0..max_len).map(|i| i < real).collect();
        Encoding { ids, mask }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw: Vocab = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::from_tokens(raw.tokens, raw.lowercase)
    }
}
