use std::fs;
use std::path::Path;

use super::{io_err, DataError};

/// The built-in 64-symbol character inventory.
pub const CHAR_VOCAB: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 '";

/// Token list; token `i` in the list has id `i + 1` (id 0 is blank).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    max_chars: usize,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self, DataError> {
        if tokens.is_empty() {
            return Err(DataError::Vocabulary("no tokens".into()));
        }
        let mut sorted = tokens.clone();
        sorted.sort();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(DataError::Vocabulary(format!("duplicate token {:?}", w[0])));
        }
        if tokens.iter().any(|t| t.is_empty()) {
            return Err(DataError::Vocabulary("empty token".into()));
        }
        let max_chars = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(1);
        Ok(Self { tokens, max_chars })
    }

    pub fn chars() -> Self {
        Self::new(CHAR_VOCAB.chars().map(String::from).collect()).expect("built-in vocabulary is valid")
    }

    /// One token per line.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::new(text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l).to_string()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        if let Some(t) = self.tokens.iter().find(|t| t.contains(['\n', '\r'])) {
            return Err(DataError::Vocabulary(format!("token {t:?} contains a newline")));
        }
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Decoder output width: tokens plus blank.
    pub fn classes(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        id.checked_sub(1).and_then(|i| self.tokens.get(i)).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Greedy longest-match segmentation.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, DataError> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut out = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            let start = chars[i].0;
            let found = (1..=self.max_chars.min(chars.len() - i)).rev().find_map(|n| {
                let end = chars.get(i + n).map_or(text.len(), |c| c.0);
                let piece = &text[start..end];
                self.tokens.iter().position(|t| t == piece).map(|id| (n, id + 1))
            });
            let Some((n, id)) = found else {
                return Err(DataError::Unencodable { pos: i, ch: chars[i].1 });
            };
            out.push(id);
            i += n;
        }
        Ok(out)
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String, DataError> {
        ids.iter()
            .map(|&id| self.token(id).ok_or(DataError::UnknownId(id)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_vocab() {
        let v = Vocabulary::chars();
        assert_eq!(v.len(), 64);
        assert_eq!(v.classes(), 65);
        assert_eq!(v.tokenize("ab").unwrap(), vec![1, 2]);
        assert_eq!(v.detokenize(&v.tokenize("Hello 42").unwrap()).unwrap(), "Hello 42");
        assert!(matches!(v.tokenize("ab!"), Err(DataError::Unencodable { pos: 2, ch: '!' })));
        assert!(v.detokenize(&[0]).is_err());
    }

    #[test]
    fn longest_match() {
        let v = Vocabulary::new(vec!["a".into(), "b".into(), "ab".into(), "abc".into()]).unwrap();
        assert_eq!(v.tokenize("abcab").unwrap(), vec![4, 3]);
        assert_eq!(v.tokenize("aab").unwrap(), vec![1, 3]);
        assert!(Vocabulary::new(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn two_fifty_six_tokens_give_257_classes() {
        let tokens: Vec<String> = (0..256).map(|i| format!("t{i:03}")).collect();
        let v = Vocabulary::new(tokens).unwrap();
        assert_eq!(v.classes(), 257);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }
}
