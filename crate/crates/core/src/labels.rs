//! Alphabets and label sequences over `L ∪ {blank}`.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class index of the blank label.
pub const BLANK: usize = 0;

/// Character shown for the blank label in paths.
pub const BLANK_CHAR: char = '-';

/// Ordered symbol set; symbol `i` has class index `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Alphabet {
    symbols: Vec<char>,
}

impl Alphabet {
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        if symbols.is_empty() {
            return Err(Error::Config("alphabet must not be empty".into()));
        }
        let mut seen = HashSet::new();
        for &c in &symbols {
            if c == BLANK_CHAR {
                return Err(Error::Config(format!("{BLANK_CHAR:?} is reserved for the blank label")));
            }
            if !seen.insert(c) {
                return Err(Error::Config(format!("duplicate alphabet symbol {c:?}")));
            }
        }
        Ok(Self { symbols })
    }

    pub fn digits() -> Self {
        Self::new("0123456789").expect("digit alphabet")
    }

    /// `|L|`, excluding the blank.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// `|L| + 1`, the size of the label space including the blank.
    pub fn classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn index_of(&self, c: char) -> Result<usize> {
        self.symbols
            .iter()
            .position(|&s| s == c)
            .map(|i| i + 1)
            .ok_or(Error::UnknownCharacter(c))
    }

    /// Text to a collapsed label sequence.
    pub fn encode(&self, text: &str) -> Result<LabelSequence> {
        let labels = text.chars().map(|c| self.index_of(c)).collect::<Result<_>>()?;
        Ok(LabelSequence::new(labels))
    }

    /// Raw path text, with [`BLANK_CHAR`] standing for the blank.
    pub fn parse_path(&self, path: &str) -> Result<Vec<usize>> {
        path.chars()
            .map(|c| if c == BLANK_CHAR { Ok(BLANK) } else { self.index_of(c) })
            .collect()
    }

    /// Class indices to text; blanks are skipped.
    pub fn decode(&self, labels: &[usize]) -> String {
        labels
            .iter()
            .filter(|&&l| l != BLANK)
            .map(|&l| self.symbols.get(l - 1).copied().unwrap_or('?'))
            .collect()
    }

    /// Class indices to path text, blanks shown as [`BLANK_CHAR`].
    pub fn render_path(&self, path: &[usize]) -> String {
        path.iter()
            .map(|&l| if l == BLANK { BLANK_CHAR } else { self.symbols.get(l - 1).copied().unwrap_or('?') })
            .collect()
    }
}

impl TryFrom<String> for Alphabet {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        Alphabet::new(&value)
    }
}

impl From<Alphabet> for String {
    fn from(a: Alphabet) -> String {
        a.symbols.into_iter().collect()
    }
}

impl fmt::Display for Alphabet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.symbols {
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Label sequence in collapsed form, optionally with the raw per-timestep
/// path it was decoded from.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct LabelSequence {
    /// Class indices, never containing [`BLANK`].
    pub labels: Vec<usize>,
    /// Per-timestep path over `L ∪ {blank}`.
    pub path: Option<Vec<usize>>,
}

impl LabelSequence {
    pub fn new(labels: Vec<usize>) -> Self {
        debug_assert!(!labels.contains(&BLANK));
        Self { labels, path: None }
    }

    pub fn with_path(labels: Vec<usize>, path: Vec<usize>) -> Self {
        Self { labels, path: Some(path) }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Labels padded with blanks to `t` positions.
    pub fn padded(&self, t: usize) -> Result<Vec<usize>> {
        if self.labels.len() > t {
            return Err(Error::contract(format!(
                "label of length {} does not fit {t} positions",
                self.labels.len()
            )));
        }
        let mut out = self.labels.clone();
        out.resize(t, BLANK);
        Ok(out)
    }

    /// Number of adjacent equal labels.
    pub fn repeats(&self) -> usize {
        self.labels.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alphabet_rejects_duplicates_and_blank_marker() {
        assert!(Alphabet::new("abca").is_err());
        assert!(Alphabet::new("ab-").is_err());
        assert!(Alphabet::new("").is_err());
        let a = Alphabet::new("abc").unwrap();
        assert_eq!(a.classes(), 4);
    }

    #[test]
    fn encode_decode_round_trip() {
        let a = Alphabet::digits();
        let l = a.encode("042").unwrap();
        assert_eq!(l.labels, vec![1, 5, 3]);
        assert_eq!(a.decode(&l.labels), "042");
        assert!(matches!(a.encode("4x"), Err(Error::UnknownCharacter('x'))));
    }

    #[test]
    fn padding_uses_blank() {
        let a = Alphabet::digits();
        let l = a.encode("42").unwrap();
        assert_eq!(l.padded(3).unwrap(), vec![5, 3, BLANK]);
        assert!(l.padded(1).is_err());
    }

    #[test]
    fn alphabet_serializes_as_string() {
        let a = Alphabet::new("ICV").unwrap();
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(json, "\"ICV\"");
        let back: Alphabet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
        assert!(serde_json::from_str::<Alphabet>("\"aa\"").is_err());
    }
}
