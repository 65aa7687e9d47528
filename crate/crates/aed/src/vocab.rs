//! Bidirectional symbol/index map with reserved control tokens.

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::util::fnv1a64;

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Symbol table: indices 0..=3 are `<pad>`, `<start>`, `<end>`, `<unk>`;
/// the rest are single Unicode scalar values in file/first-seen order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    symbols: Vec<char>,
}

/// NFC-normalize a label so precomposed and combining forms compare equal.
pub fn nfc(s: &str) -> String {
    s.nfc().collect()
}

impl Vocabulary {
    pub fn new(symbols: Vec<char>) -> Result<Self> {
        for (i, &c) in symbols.iter().enumerate() {
            if symbols[..i].contains(&c) {
                return Err(Error::Format(format!(
                    "duplicate symbol {c:?} at position {}",
                    i + 1
                )));
            }
        }
        Ok(Vocabulary { symbols })
    }

    /// Parse a vocab file: UTF-8, one symbol per line, reserved tokens
    /// implicit.
    pub fn from_file_text(text: &str) -> Result<Self> {
        let mut symbols = Vec::new();
        for (ix, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut chars = line.chars();
            let c = chars.next().expect("non-empty line");
            if chars.next().is_some() {
                return Err(Error::Format(format!(
                    "line {}: expected a single symbol, got {line:?}",
                    ix + 1
                )));
            }
            if symbols.contains(&c) {
                return Err(Error::Format(format!(
                    "line {}: duplicate symbol {c:?}",
                    ix + 1
                )));
            }
            symbols.push(c);
        }
        Vocabulary::new(symbols)
    }

    pub fn to_file_text(&self) -> String {
        let mut out = String::new();
        for &c in &self.symbols {
            out.push(c);
            out.push('\n');
        }
        out
    }

    /// Build from labels, NFC-normalized, symbols in first-seen order.
    pub fn build<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let mut symbols = Vec::new();
        for label in labels {
            for c in nfc(label).chars() {
                if !symbols.contains(&c) {
                    symbols.push(c);
                }
            }
        }
        Vocabulary { symbols }
    }

    /// Total size, reserved tokens included.
    pub fn len(&self) -> usize {
        RESERVED.len() + self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    /// Index of a symbol; unknown symbols map to `<unk>`.
    pub fn index(&self, c: char) -> usize {
        self.symbols
            .iter()
            .position(|&s| s == c)
            .map(|p| p + RESERVED.len())
            .unwrap_or(UNK)
    }

    /// The character at a non-reserved index.
    pub fn symbol(&self, index: usize) -> Option<char> {
        if index < RESERVED.len() {
            None
        } else {
            self.symbols.get(index - RESERVED.len()).copied()
        }
    }

    pub fn is_reserved(&self, index: usize) -> bool {
        index < RESERVED.len()
    }

    pub fn non_reserved(&self) -> &[char] {
        &self.symbols
    }

    /// NFC-normalized label to index sequence, `<end>`-terminated.
    pub fn encode_label(&self, label: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = nfc(label).chars().map(|c| self.index(c)).collect();
        ids.push(END);
        ids
    }

    /// Content hash used to pair checkpoints with vocab files.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_file_text().as_bytes())
    }
}
