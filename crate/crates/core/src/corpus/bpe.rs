//! Rank-ordered BPE over whitespace-delimited pieces.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// On-disk vocabulary document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabFile {
    pub base: Vec<String>,
    #[serde(default)]
    pub merges: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unk: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BpeVocab {
    source: VocabFile,
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    ranks: HashMap<(String, String), usize>,
    unk_id: Option<usize>,
}

impl PartialEq for BpeVocab {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

impl Serialize for BpeVocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.source.serialize(s)
    }
}

impl<'de> Deserialize<'de> for BpeVocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = VocabFile::deserialize(d)?;
        BpeVocab::from_file(file).map_err(serde::de::Error::custom)
    }
}

/// A token produced by [`BpeVocab::tokenize`], with its half-open char span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSpan {
    pub text: String,
    pub token_id: usize,
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn is_whitespace(&self) -> bool {
        !self.text.is_empty() && self.text.chars().all(char::is_whitespace)
    }
}

impl BpeVocab {
    pub fn new(base: Vec<String>, merges: Vec<(String, String)>, unk: Option<String>) -> Result<Self> {
        Self::from_file(VocabFile { base, merges, unk })
    }

    pub fn from_file(source: VocabFile) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut ids = HashMap::new();
        fn push(tok: &str, tokens: &mut Vec<String>, ids: &mut HashMap<String, usize>) {
            if !ids.contains_key(tok) {
                ids.insert(tok.to_string(), tokens.len());
                tokens.push(tok.to_string());
            }
        }
        for sym in &source.base {
            if sym.is_empty() {
                return Err(Error::Config("empty base symbol".into()));
            }
            push(sym, &mut tokens, &mut ids);
        }
        if let Some(unk) = &source.unk {
            push(unk, &mut tokens, &mut ids);
        }
        let mut ranks = HashMap::new();
        for (rank, (left, right)) in source.merges.iter().enumerate() {
            for part in [left, right] {
                if !ids.contains_key(part.as_str()) {
                    return Err(Error::Config(format!(
                        "merge {rank} uses `{part}` before it exists"
                    )));
                }
            }
            if ranks.insert((left.clone(), right.clone()), rank).is_some() {
                return Err(Error::Config(format!("duplicate merge ({left}, {right})")));
            }
            let merged = format!("{left}{right}");
            push(&merged, &mut tokens, &mut ids);
        }
        let unk_id = source.unk.as_ref().map(|u| ids[u.as_str()]);
        Ok(Self {
            source,
            tokens,
            ids,
            ranks,
            unk_id,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Self::from_file(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.source).expect("vocab serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn unk_id(&self) -> Option<usize> {
        self.unk_id
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.source.merges
    }

    pub fn file(&self) -> &VocabFile {
        &self.source
    }

    /// Splits `text` into BPE tokens.
    ///
    /// Every whitespace character is its own token. Non-whitespace runs are
    /// merged greedily, always applying the lowest-rank adjacent pair next.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenSpan>> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            if chars[i].is_whitespace() {
                out.push(self.single(chars[i], i)?);
                i += 1;
                continue;
            }
            let start = i;
            while i < chars.len() && !chars[i].is_whitespace() {
                i += 1;
            }
            self.merge_piece(&chars[start..i], start, &mut out)?;
        }
        Ok(out)
    }

    fn symbol_id(&self, ch: char, position: usize) -> Result<(String, usize)> {
        let s = ch.to_string();
        match self.ids.get(&s) {
            Some(&id) => Ok((s, id)),
            None => match (&self.source.unk, self.unk_id) {
                (Some(unk), Some(id)) => Ok((unk.clone(), id)),
                _ => Err(Error::UnrepresentableInput { ch, position }),
            },
        }
    }

    fn single(&self, ch: char, position: usize) -> Result<TokenSpan> {
        let (_, id) = self.symbol_id(ch, position)?;
        Ok(TokenSpan {
            text: ch.to_string(),
            token_id: id,
            start: position,
            end: position + 1,
        })
    }

    fn merge_piece(&self, chars: &[char], offset: usize, out: &mut Vec<TokenSpan>) -> Result<()> {
        // (merge key, start, end)
        let mut parts: Vec<(String, usize, usize)> = Vec::with_capacity(chars.len());
        for (k, &ch) in chars.iter().enumerate() {
            let (key, _) = self.symbol_id(ch, offset + k)?;
            parts.push((key, offset + k, offset + k + 1));
        }
        loop {
            let best = parts
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].0.clone(), w[1].0.clone())).copied())
                .min();
            let Some(rank) = best else { break };
            let (left, right) = &self.source.merges[rank];
            let mut merged = Vec::with_capacity(parts.len());
            let mut k = 0;
            while k < parts.len() {
                if k + 1 < parts.len() && &parts[k].0 == left && &parts[k + 1].0 == right {
                    merged.push((format!("{left}{right}"), parts[k].1, parts[k + 1].2));
                    k += 2;
                } else {
                    merged.push(parts[k].clone());
                    k += 1;
                }
            }
            parts = merged;
        }
        for (key, start, end) in parts {
            let text: String = chars[start - offset..end - offset].iter().collect();
            let token_id = self.ids[key.as_str()];
            out.push(TokenSpan {
                text,
                token_id,
                start,
                end,
            });
        }
        Ok(())
    }
}
