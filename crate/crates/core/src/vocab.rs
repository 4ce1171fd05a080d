//! Word-level tokenizer over a closed vocabulary.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;

/// Prompt markers used by the QA templates.
pub const CONTEXT_MARK: &str = "C:";
pub const QUESTION_MARK: &str = "Q:";
pub const ANSWER_MARK: &str = "A:";

/// Maps whitespace-separated words to ids and back.
///
/// Ids are assigned in insertion order; the three special tokens always
/// occupy ids 0, 1 and 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Tokenizer {
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tok = Tokenizer {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in [PAD, BOS, EOS] {
            tok.push(w.to_string())?;
        }
        for w in words {
            tok.push(w.into())?;
        }
        Ok(tok)
    }

    fn push(&mut self, word: String) -> Result<()> {
        if word.is_empty() || word.chars().any(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("bad vocabulary entry {word:?}")));
        }
        if self.index.contains_key(&word) {
            return Err(Error::InvalidArgument(format!(
                "duplicate vocabulary entry {word:?}"
            )));
        }
        self.index.insert(word.clone(), self.words.len() as TokenId);
        self.words.push(word);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn pad(&self) -> TokenId {
        PAD_ID
    }

    pub fn bos(&self) -> TokenId {
        BOS_ID
    }

    pub fn eos(&self) -> TokenId {
        EOS_ID
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Joins words with single spaces; special tokens are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| id > EOS_ID)
            .filter_map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
