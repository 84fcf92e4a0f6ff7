use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::caption::TokenSequence;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const MASK: usize = 3;
pub const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]"];

/// Token strings and their ids; the four special tokens always occupy ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials first, then every corpus token by descending count, ties
    /// lexicographic.
    pub fn build(seqs: &[TokenSequence]) -> Self {
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for s in seqs {
            for t in &s.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().filter(|(t, _)| !SPECIALS.contains(t)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(SPECIALS.iter().copied().chain(ranked.into_iter().map(|r| r.0)).map(String::from).collect())
            .expect("specials are distinct")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Config(format!("vocabulary id {i} must be {s}")));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, ids })
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

    /// Unknown tokens map to `[UNK]`.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_or_unk(t)).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(s, "{t}\t{i}").unwrap();
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|(line, msg)| Error::Ingest { path: path.into(), line, msg })
    }

    pub fn parse(text: &str) -> std::result::Result<Self, (usize, String)> {
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (tok, id) = line.split_once('\t').ok_or((i + 1, "expected token<TAB>id".to_string()))?;
            let id: usize = id.parse().map_err(|_| (i + 1, format!("bad id `{id}`")))?;
            if id != tokens.len() {
                return Err((i + 1, format!("ids must be consecutive, expected {}", tokens.len())));
            }
            tokens.push(tok.to_string());
        }
        Self::from_tokens(tokens).map_err(|e| (0, e.to_string()))
    }
}
