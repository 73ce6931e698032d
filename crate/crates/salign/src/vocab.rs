//! Shared vocabulary with reserved control tokens.
//!
//! File format: one token per line, line number = id. Line 0 is the CTC
//! blank, ids 1..=3 are `<pad>`, `<bos>`, `<eos>`.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

pub const BLANK: u32 = 0;
pub const PAD: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const N_RESERVED: u32 = 4;

pub const RESERVED_TOKENS: [&str; 4] = ["<blank>", "<pad>", "<bos>", "<eos>"];

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a synthetic vocabulary of `size` entries: the four reserved
    /// tokens followed by content words `w0004`, `w0005`, ...
    pub fn synthetic(size: u32) -> Result<Self> {
        if size <= N_RESERVED {
            return Err(Error::config(format!(
                "vocab size {size} leaves no room for content tokens (need > {N_RESERVED})"
            )));
        }
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        for id in N_RESERVED..size {
            tokens.push(format!("w{id:04}"));
        }
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < N_RESERVED as usize {
            return Err(Error::Ingest {
                location: path.display().to_string(),
                message: format!("vocabulary has {} lines, needs at least 4", tokens.len()),
            });
        }
        for (i, expect) in RESERVED_TOKENS.iter().enumerate() {
            if tokens[i] != *expect {
                return Err(Error::Ingest {
                    location: format!("{}:{}", path.display(), i + 1),
                    message: format!("reserved slot {i} is '{}', expected '{expect}'", tokens[i]),
                });
            }
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn size(&self) -> u32 {
        self.tokens.len() as u32
    }

    pub fn n_content(&self) -> u32 {
        self.size() - N_RESERVED
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Whitespace tokenization against the vocabulary; `location` is used in
    /// ingestion error messages.
    pub fn encode(&self, text: &str, location: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|tok| {
                self.id(tok).ok_or_else(|| Error::Ingest {
                    location: location.to_string(),
                    message: format!("unknown token '{tok}'"),
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_layout_and_roundtrip() {
        let v = Vocab::synthetic(10).unwrap();
        assert_eq!(v.size(), 10);
        assert_eq!(v.token(BLANK), "<blank>");
        assert_eq!(v.token(4), "w0004");
        assert_eq!(v.id("w0009"), Some(9));
        let ids = v.encode("w0004 w0009 w0004", "test").unwrap();
        assert_eq!(ids, vec![4, 9, 4]);
        assert_eq!(v.decode(&ids), "w0004 w0009 w0004");
    }

    #[test]
    fn unknown_token_names_location() {
        let v = Vocab::synthetic(8).unwrap();
        let err = v.encode("w0004 bogus", "row 17").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 17") && msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn too_small_vocab_rejected() {
        assert!(Vocab::synthetic(4).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::synthetic(12).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(loaded.size(), 12);
        assert_eq!(loaded.token(11), "w0011");
    }
}
