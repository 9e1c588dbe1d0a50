//! Character inventory shared by training labels and decoders.
//!
//! Index 0 is the CTC blank, index 1 the word separator (space), and the
//! letters follow. Phoneme ids reuse the same order minus the blank: silence
//! is 0 and letter `i` (label index `i + 2`) is phoneme `i + 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLANK: usize = 0;
pub const SPACE: usize = 1;
pub const SILENCE: u32 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    letters: Vec<char>,
}

impl Default for Alphabet {
    fn default() -> Self {
        Self::english()
    }
}

impl Alphabet {
    pub fn new(letters: &str) -> Result<Self> {
        let letters: Vec<char> = letters.chars().collect();
        if letters.is_empty() {
            return Err(Error::config("alphabet needs at least one letter"));
        }
        for (i, c) in letters.iter().enumerate() {
            if c.is_whitespace() || letters[..i].contains(c) {
                return Err(Error::config(format!("bad or repeated letter {c:?}")));
            }
        }
        Ok(Self { letters })
    }

    /// Lowercase `a` to `z`.
    pub fn english() -> Self {
        Self::new("abcdefghijklmnopqrstuvwxyz").expect("valid")
    }

    /// The first `n` English letters.
    pub fn first(n: usize) -> Result<Self> {
        if n == 0 || n > 26 {
            return Err(Error::config(format!("alphabet size {n} outside 1..=26")));
        }
        Self::new(&"abcdefghijklmnopqrstuvwxyz"[..n])
    }

    pub fn letters(&self) -> &[char] {
        &self.letters
    }

    /// Number of output classes including blank and space.
    pub fn num_classes(&self) -> usize {
        self.letters.len() + 2
    }

    /// Number of phoneme classes including silence.
    pub fn num_phonemes(&self) -> usize {
        self.letters.len() + 1
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        if c == ' ' {
            return Some(SPACE);
        }
        self.letters.iter().position(|&l| l == c).map(|i| i + 2)
    }

    /// Label indices of `text`; whitespace runs become one space and the ends are trimmed.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let norm = normalize(text);
        norm.chars()
            .map(|c| {
                self.index_of(c)
                    .ok_or_else(|| Error::pre(format!("character {c:?} not in alphabet")))
            })
            .collect()
    }

    /// Text for label indices; blanks are skipped.
    pub fn decode(&self, labels: &[usize]) -> String {
        labels
            .iter()
            .filter_map(|&l| match l {
                BLANK => None,
                SPACE => Some(' '),
                i => self.letters.get(i - 2).copied(),
            })
            .collect()
    }

    /// Phoneme id for a label index (space maps to silence).
    pub fn phoneme_of(&self, label: usize) -> u32 {
        if label <= SPACE {
            SILENCE
        } else {
            (label - 1) as u32
        }
    }

    /// Phoneme spelling of a text: silence, the letters with silence between
    /// words, silence.
    pub fn phoneme_spelling(&self, text: &str) -> Result<Vec<u32>> {
        let labels = self.encode(text)?;
        let mut out = vec![SILENCE];
        out.extend(labels.iter().map(|&l| self.phoneme_of(l)));
        out.push(SILENCE);
        Ok(out)
    }
}

/// Lowercases and collapses whitespace.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}
