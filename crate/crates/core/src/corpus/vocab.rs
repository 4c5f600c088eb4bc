use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::av_instruction::templates::PromptTemplates;
use crate::error::{format, Error, Result};

use super::grammar::grammar_phrases;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases and splits on whitespace; `;`, `.` and `,` become their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if matches!(ch, ';' | '.' | ',') {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return format("vocabulary must start with <pad> <bos> <eos> <unk>");
        }
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return format("duplicate vocabulary entry");
        }
        Ok(Vocab { tokens, index })
    }

    /// Every word the instruction grammar and prompt templates can produce.
    pub fn build() -> Self {
        let mut words = BTreeSet::new();
        for p in grammar_phrases() {
            words.extend(tokenize(p));
        }
        for t in PromptTemplates::builtin().iter() {
            words.extend(tokenize(t));
        }
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        Vocab::from_tokens(tokens).expect("grammar vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Encodes text whose every token must be known.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        tokenize(text)
            .into_iter()
            .map(|t| self.id(&t).ok_or_else(|| Error::Tokenize(format!("unknown token {t:?}"))))
            .collect()
    }

    /// Encodes text, mapping unknown tokens to UNK. Returns the ids and the unknown words.
    pub fn encode_lenient(&self, text: &str) -> (Vec<usize>, Vec<String>) {
        let mut unknown = Vec::new();
        let ids = tokenize(text)
            .into_iter()
            .map(|t| {
                self.id(&t).unwrap_or_else(|| {
                    unknown.push(t);
                    UNK
                })
            })
            .collect();
        (ids, unknown)
    }

    /// Word tokens for ids, stopping at EOS and skipping other specials.
    pub fn decode_tokens(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i >= SPECIALS.len())
            .filter_map(|&i| self.token(i).map(str::to_string))
            .collect()
    }

    /// Hex SHA-256 over the newline-joined token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> String {
        let map: IndexMap<&str, usize> = self.tokens.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        serde_json::to_string_pretty(&map).expect("string map serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: IndexMap<String, usize> = serde_json::from_str(text)?;
        let mut tokens = vec![String::new(); map.len()];
        for (t, i) in map {
            match tokens.get_mut(i) {
                Some(slot) if slot.is_empty() => *slot = t,
                _ => return format(format!("vocabulary id {i} out of range or repeated")),
            }
        }
        Vocab::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Vocab::from_json(&std::fs::read_to_string(path)?)
    }
}
