//! Whitespace tokenizer over a closed vocabulary.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::shapes::{Color, Position, Shape, Size};
use crate::text::{NULL_ID, PAD_ID, UNK_ID};

pub const NULL_TOKEN: &str = "<null>";
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Dense ids; 0, 1 and 2 are the null, padding and unknown tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

fn normalise(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric() && c != '-').to_lowercase()
}

impl Vocabulary {
    /// Reserved tokens followed by `words` (deduplicated, order kept).
    pub fn new<I: IntoIterator<Item = S>, S: AsRef<str>>(words: I) -> Self {
        let mut all: Vec<String> = vec![NULL_TOKEN.into(), PAD_TOKEN.into(), UNK_TOKEN.into()];
        for w in words {
            let w = normalise(w.as_ref());
            if !w.is_empty() && !all.contains(&w) {
                all.push(w);
            }
        }
        Self::from(all)
    }

    /// Every word the shape-caption grammar can produce.
    pub fn synthetic() -> Self {
        let mut words = vec!["a", "at"];
        words.extend(Size::ALL.iter().map(|s| s.word()));
        words.extend(Color::ALL.iter().map(|s| s.word()));
        words.extend(Shape::ALL.iter().map(|s| s.word()));
        words.extend(Position::ALL.iter().map(|s| s.word()));
        Self::new(words)
    }

    /// Sorted word set of a caption corpus.
    pub fn from_captions<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> =
            captions.into_iter().flat_map(|c| c.split_whitespace().map(normalise)).filter(|w| !w.is_empty()).collect();
        Self::new(set)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(normalise)
            .filter(|w| !w.is_empty())
            .map(|w| self.id(&w).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn token(&self, id: u32) -> &str {
        self.words.get(id as usize).map(String::as_str).unwrap_or(UNK_TOKEN)
    }

    /// Joins the words of `ids`, dropping null and padding tokens.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != NULL_ID && i != PAD_ID)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::shapes::ShapeSpec;

    #[test]
    fn reserved_ids_and_round_trip() {
        let v = Vocabulary::synthetic();
        assert_eq!(v.id(NULL_TOKEN), Some(NULL_ID));
        assert_eq!(v.id(PAD_TOKEN), Some(PAD_ID));
        assert_eq!(v.id(UNK_TOKEN), Some(UNK_ID));
        assert_eq!(v.len(), 3 + 2 + 2 + 8 + 3 + 9);
        for spec in ShapeSpec::all() {
            let c = spec.caption();
            assert_eq!(v.detokenize(&v.tokenize(&c)), c);
        }
        assert_eq!(v.tokenize("a purple circle"), vec![v.id("a").unwrap(), UNK_ID, v.id("circle").unwrap()]);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), v);
    }
}
