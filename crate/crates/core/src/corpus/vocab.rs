use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_string, write_atomic};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const SEP: usize = 2;
pub const EOS: usize = 3;

pub const SPECIAL_SYMBOLS: [&str; 4] = ["<pad>", "<bos>", "<sep>", "<eos>"];
pub const INSTRUCTION_SYMBOLS: [&str; 3] = ["translate", "domain", ":"];

/// Symbol table. Line number in the vocabulary file is the token id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary symbol {s:?}")));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary symbol {s:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Result<usize> {
        self.index
            .get(symbol)
            .copied()
            .ok_or_else(|| Error::OutOfVocabulary(symbol.to_string()))
    }

    pub fn symbol(&self, id: usize) -> Result<&str> {
        self.symbols
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::OutOfVocabulary(format!("#{id}")))
    }

    /// Whitespace-delimited symbols to ids.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|s| self.id(s)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let parts = ids
            .iter()
            .map(|&i| self.symbol(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.join(" "))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.symbols.join("\n");
        s.push('\n');
        write_atomic(path, s.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_string(path)?;
        Self::from_symbols(text.lines().map(str::to_string).collect()).map_err(|e| {
            Error::Corrupt {
                path: path.to_path_buf(),
                detail: e.to_string(),
            }
        })
    }
}
