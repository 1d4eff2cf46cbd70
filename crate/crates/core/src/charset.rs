//! Ordered character inventory; the CTC blank follows the last character.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharSet {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl CharSet {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        if chars.is_empty() {
            return Err(Error::Data("charset is empty".into()));
        }
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::Data(format!(
                    "charset lists {c:?} (U+{:04X}) twice",
                    c as u32
                )));
            }
        }
        Ok(CharSet { chars, index })
    }

    /// One character per line. Lines are not trimmed, so a line holding a
    /// single space declares the space character.
    pub fn parse(text: &str) -> Result<Self> {
        let mut chars = Vec::new();
        for (n, line) in text.split('\n').enumerate() {
            let line = line.strip_suffix('\r').unwrap_or(line);
            if line.is_empty() {
                continue;
            }
            let mut it = line.chars();
            let c = it.next().expect("nonempty line");
            if it.next().is_some() {
                return Err(Error::Data(format!(
                    "charset line {}: expected one character, got {line:?}",
                    n + 1
                )));
            }
            chars.push(c);
        }
        Self::new(chars)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.chars.iter().map(|c| format!("{c}\n")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn blank(&self) -> usize {
        self.chars.len()
    }

    /// Output classes including the blank.
    pub fn classes(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.index_of(c).ok_or_else(|| {
                    Error::Data(format!(
                        "character {c:?} (U+{:04X}) not in charset",
                        c as u32
                    ))
                })
            })
            .collect()
    }

    /// Labels at or past the blank are skipped.
    pub fn decode(&self, labels: &[usize]) -> String {
        labels.iter().filter_map(|&l| self.chars.get(l)).collect()
    }
}
