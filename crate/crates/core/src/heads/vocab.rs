use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::caption::{CENTRAL_CLOSE, CENTRAL_OPEN, SUPPORT_CLOSE, SUPPORT_OPEN};
use crate::data::{COLORS, SHAPES, TEMPLATE_WORDS};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

pub const PAD_TOKEN: &str = "⟨PAD⟩";
pub const BOS_TOKEN: &str = "⟨BOS⟩";
pub const EOS_TOKEN: &str = "⟨EOS⟩";

/// Token table. Ids 0..=2 are PAD, BOS, EOS; the four span tags follow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn new(words: &[&str]) -> Result<Self> {
        let mut tokens: Vec<String> = [
            PAD_TOKEN,
            BOS_TOKEN,
            EOS_TOKEN,
            CENTRAL_OPEN,
            CENTRAL_CLOSE,
            SUPPORT_OPEN,
            SUPPORT_CLOSE,
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for w in words {
            if tokens.iter().any(|t| t == w) {
                return Err(Error::Config(alloc::format!("duplicate vocabulary token {w}")));
            }
            tokens.push(w.to_string());
        }
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    /// Every word the synthetic caption templates can produce.
    pub fn standard() -> Self {
        let mut words: Vec<&str> = Vec::new();
        words.extend(TEMPLATE_WORDS);
        words.extend(COLORS.iter().map(|c| c.name));
        words.extend(SHAPES);
        Self::new(&words).expect("template words are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        if self.index.is_empty() {
            return self
                .tokens
                .iter()
                .position(|t| t == token)
                .ok_or_else(|| Error::UnknownToken(token.to_string()));
        }
        self.index.get(token).copied().ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// PAD, BOS, EOS and the span tags.
    pub fn is_special(&self, id: usize) -> bool {
        id < 7
    }

    pub fn encode(&self, tokens: &[&str]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Joins tokens back into text, gluing span tags to the adjacent word
    /// and dropping PAD/BOS/EOS.
    pub fn decode_text(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut glue_next = false;
        for &id in ids {
            if id <= EOS {
                continue;
            }
            let Some(tok) = self.token(id) else { continue };
            let is_open = tok == CENTRAL_OPEN || tok == SUPPORT_OPEN;
            let is_close = tok == CENTRAL_CLOSE || tok == SUPPORT_CLOSE;
            if !out.is_empty() && !glue_next && !is_close {
                out.push(' ');
            }
            out.push_str(tok);
            glue_next = is_open;
        }
        out
    }
}
