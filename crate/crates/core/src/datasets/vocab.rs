use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const START: u32 = 1;
pub const END: u32 = 2;
pub const UNKNOWN: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Word-level vocabulary with four reserved ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    #[serde(skip)]
    token_to_id: HashMap<String, u32>,
}

pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|w| w.to_lowercase())
}

impl Vocabulary {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            if !id_to_token.contains(&t) {
                id_to_token.push(t);
            }
        }
        let mut v = Vocabulary {
            id_to_token,
            token_to_id: HashMap::new(),
        };
        v.reindex();
        v
    }

    /// Most frequent words first (ties alphabetical), capped at
    /// `max_size` entries including the reserved ids.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I, max_size: usize) -> Self {
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in words(t) {
                if !SPECIALS.contains(&w.as_str()) {
                    *freq.entry(w).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let keep = max_size.saturating_sub(SPECIALS.len());
        Vocabulary::from_tokens(ranked.into_iter().take(keep).map(|(w, _)| w))
    }

    /// Rebuilds the reverse map; needed after deserialization.
    pub fn reindex(&mut self) {
        self.token_to_id = self
            .id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.len() <= SPECIALS.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNKNOWN)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Word tokens of `ids` with padding dropped.
    pub fn detokenize(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != PAD)
            .map(|&i| self.token(i).unwrap_or("<unk>").to_string())
            .collect()
    }
}

/// Lower-cased whitespace tokens mapped to ids, truncated or padded to
/// `max_len`.
pub fn tokenize_text(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<u32>> {
    if vocab.is_empty() {
        return Err(Error::Config("empty vocabulary".into()));
    }
    let mut ids: Vec<u32> = words(text).take(max_len).map(|w| vocab.id(&w)).collect();
    ids.resize(max_len, PAD);
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["the cat sat on the mat", "a dog"], 100)
    }

    #[test]
    fn empty_text_is_all_pad() {
        assert_eq!(tokenize_text("", &vocab(), 5).unwrap(), vec![PAD; 5]);
    }

    #[test]
    fn known_words_round_trip() {
        let v = vocab();
        let ids = tokenize_text("the cat sat on the", &v, 5).unwrap();
        assert!(!ids.contains(&PAD));
        assert_eq!(v.detokenize(&ids).join(" "), "the cat sat on the");
    }

    #[test]
    fn oov_maps_to_unknown() {
        let ids = tokenize_text("the zebra sat", &vocab(), 4).unwrap();
        assert_eq!(ids[1], UNKNOWN);
        assert_eq!(ids[3], PAD);
    }

    #[test]
    fn frequency_order_and_cap() {
        let v = vocab();
        assert_eq!(v.token(4), Some("the"));
        let small = Vocabulary::build(["the cat sat on the mat"], 6);
        assert_eq!(small.len(), 6);
        assert_eq!(small.id("the"), 4);
    }

    #[test]
    fn specials_distinct_and_bijective() {
        let v = vocab();
        let ids: Vec<u32> = SPECIALS.iter().map(|s| v.id(s)).collect();
        assert_eq!(ids, vec![PAD, START, END, UNKNOWN]);
        for i in 4..v.len() as u32 {
            assert_eq!(v.id(v.token(i).unwrap()), i);
        }
    }

    #[test]
    fn empty_vocab_is_rejected() {
        let v = Vocabulary::from_tokens(Vec::new());
        assert!(tokenize_text("a", &v, 3).is_err());
    }
}
