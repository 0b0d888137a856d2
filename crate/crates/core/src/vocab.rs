//! Token <-> id maps with a reserved padding slot at id 0.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const PAD: &str = "<pad>";
pub const PAD_ID: u32 = 0;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("duplicate token {0:?}")]
    Duplicate(String),
    #[error("unknown token {0:?}")]
    Unknown(String),
    #[error("vocab file {0}: line 0 must be {PAD:?}")]
    MissingPad(String),
}

/// Bidirectional token map. Ids are dense and equal to the token's line
/// number in the sidecar file, so they are stable across save/load.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Build from distinct non-pad tokens; the pad token is inserted at id 0.
    pub fn new<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self, VocabError> {
        let mut v = Vocab { tokens: vec![PAD.to_string()], index: HashMap::new() };
        v.index.insert(PAD.to_string(), PAD_ID);
        for t in tokens {
            if v.index.contains_key(&t) {
                return Err(VocabError::Duplicate(t));
            }
            v.index.insert(t.clone(), v.tokens.len() as u32);
            v.tokens.push(t);
        }
        Ok(v)
    }

    /// Alphabet of `size` single symbols: a, b, ..., then numbered tokens.
    pub fn alphabet(size: usize) -> Self {
        let names = (0..size).map(|i| {
            if i < 26 {
                ((b'a' + i as u8) as char).to_string()
            } else {
                format!("t{}", i)
            }
        });
        Vocab::new(names).expect("alphabet tokens are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<u32, VocabError> {
        self.index.get(token).copied().ok_or_else(|| VocabError::Unknown(token.to_string()))
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some(first) if first == PAD => {}
            _ => return Err(VocabError::MissingPad(path.display().to_string())),
        }
        Vocab::new(lines.map(String::from))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_dense_and_stable_across_save_load() {
        let v = Vocab::alphabet(11);
        assert_eq!(v.len(), 12);
        assert_eq!(v.id(PAD).unwrap(), 0);
        assert_eq!(v.id("a").unwrap(), 1);
        assert_eq!(v.id("k").unwrap(), 11);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(v, loaded);
    }

    #[test]
    fn unknown_token_is_an_error() {
        let v = Vocab::alphabet(3);
        assert!(v.id("zebra").is_err());
    }
}
