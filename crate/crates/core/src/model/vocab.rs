// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const UNK: &str = "<unk>";

/// Whitespace tokenizer over a fixed token list. Ids are line numbers of the
/// vocab file; the three specials always occupy ids 0..3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials followed by `tokens` in order, skipping duplicates.
    pub fn new<S: AsRef<str>>(tokens: &[S]) -> Self {
        let mut out = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in [PAD, BOS, UNK].into_iter().chain(tokens.iter().map(AsRef::as_ref)) {
            if !out.index.contains_key(t) {
                out.index.insert(t.to_string(), out.tokens.len());
                out.tokens.push(t.to_string());
            }
        }
        out
    }

    /// `size` tokens: the specials then `t3`, `t4`, ...
    pub fn synthetic(size: usize) -> Self {
        let names: Vec<String> = (3..size.max(3)).map(|i| format!("t{i}")).collect();
        let mut v = Self::new(&names);
        v.tokens.truncate(size);
        v.index.retain(|_, id| *id < size);
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn bos(&self) -> usize {
        1
    }

    pub fn unk(&self) -> usize {
        2
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Strict encoding: unknown words are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Lenient encoding: unknown words map to `<unk>`.
    pub fn encode_lossy(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.index.get(w).copied().unwrap_or(self.unk()))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line.
    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < 3 || tokens[..3] != [PAD, BOS, UNK] {
            return Err(Error::InvalidArgument("vocab file must start with <pad>, <bos>, <unk>".into()));
        }
        let v = Self::new(&tokens[3..]);
        if v.len() != tokens.len() {
            return Err(Error::InvalidArgument("vocab file contains duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text)
    }
}
