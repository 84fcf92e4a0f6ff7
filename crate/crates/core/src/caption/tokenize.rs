use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::synthetic::{Color, ShapeKind, Size, REGION_WORDS};
use crate::corpus::{CaptionRecord, Dataset};
use crate::error::{ensure, Error, Result};

pub const MIN_TOKENS: usize = 3;
pub const MAX_TOKENS: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PosTag {
    #[serde(rename = "NN")]
    Noun,
    #[serde(rename = "ADJ")]
    Adj,
    #[serde(rename = "VB")]
    Verb,
    #[serde(rename = "OTHER")]
    Other,
}

impl PosTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PosTag::Noun => "NN",
            PosTag::Adj => "ADJ",
            PosTag::Verb => "VB",
            PosTag::Other => "OTHER",
        }
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PosTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NN" => Ok(PosTag::Noun),
            "ADJ" => Ok(PosTag::Adj),
            "VB" => Ok(PosTag::Verb),
            "OTHER" => Ok(PosTag::Other),
            _ => Err(Error::Config(format!("unknown POS tag `{s}`"))),
        }
    }
}

/// Assigns a part of speech to each token of a caption.
pub trait Tagger: Send + Sync {
    fn name(&self) -> &str;

    fn tag(&self, tokens: &[String]) -> Vec<PosTag>;
}

/// Dictionary lookup; tokens missing from the dictionary are tagged `OTHER`.
#[derive(Clone, Debug, Default)]
pub struct DictionaryTagger {
    name: String,
    entries: HashMap<String, PosTag>,
}

impl DictionaryTagger {
    pub fn new(name: impl Into<String>, entries: impl IntoIterator<Item = (String, PosTag)>) -> Self {
        DictionaryTagger { name: name.into(), entries: entries.into_iter().collect() }
    }

    /// The closed lexicon of the synthetic caption grammar.
    pub fn synthetic() -> Self {
        let mut e = Vec::new();
        for s in ShapeKind::ALL {
            e.push((s.word().to_string(), PosTag::Noun));
        }
        for r in REGION_WORDS {
            e.push((r.to_string(), PosTag::Noun));
        }
        for c in Color::ALL {
            e.push((c.word().to_string(), PosTag::Adj));
        }
        for s in Size::ALL {
            e.push((s.word().to_string(), PosTag::Adj));
        }
        e.push(("is".to_string(), PosTag::Verb));
        DictionaryTagger::new("synthetic", e)
    }
}

impl Tagger for DictionaryTagger {
    fn name(&self) -> &str {
        &self.name
    }

    fn tag(&self, tokens: &[String]) -> Vec<PosTag> {
        tokens.iter().map(|t| self.entries.get(t).copied().unwrap_or(PosTag::Other)).collect()
    }
}

/// Looks up a built-in tagger by name.
pub fn tagger_by_name(name: &str) -> Result<Box<dyn Tagger>> {
    match name {
        "synthetic" => Ok(Box::new(DictionaryTagger::synthetic())),
        _ => Err(Error::Config(format!("unknown tagger `{name}` (available: synthetic)"))),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub caption_id: String,
    pub image_id: String,
    pub tokens: Vec<String>,
    pub pos_tags: Vec<PosTag>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Exclusion {
    TooShort(usize),
    TooLong(usize),
    Duplicate,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Tokenized {
    Kept(TokenSequence),
    Excluded(Exclusion),
}

/// Lowercase, drop punctuation, split on whitespace.
pub fn split_tokens(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

pub fn tokenize(caption: &CaptionRecord, tagger: &dyn Tagger) -> Result<Tokenized> {
    ensure!(!caption.text.trim().is_empty(), "caption {} has empty text", caption.caption_id);
    let tokens = split_tokens(&caption.text);
    if tokens.len() < MIN_TOKENS {
        return Ok(Tokenized::Excluded(Exclusion::TooShort(tokens.len())));
    }
    if tokens.len() > MAX_TOKENS {
        return Ok(Tokenized::Excluded(Exclusion::TooLong(tokens.len())));
    }
    let pos_tags = tagger.tag(&tokens);
    debug_assert_eq!(pos_tags.len(), tokens.len());
    Ok(Tokenized::Kept(TokenSequence {
        caption_id: caption.caption_id.clone(),
        image_id: caption.image_id.clone(),
        tokens,
        pos_tags,
    }))
}

/// Kept sequences in dataset order plus a record of what was dropped.
#[derive(Clone, Debug, Default)]
pub struct PreparedCaptions {
    pub sequences: Vec<TokenSequence>,
    pub excluded: Vec<(String, Exclusion)>,
}

impl PreparedCaptions {
    pub fn by_caption_id(&self) -> BTreeMap<&str, &TokenSequence> {
        self.sequences.iter().map(|s| (s.caption_id.as_str(), s)).collect()
    }
}

/// Tokenizes every caption, filters by length, and drops repeated captions
/// of the same image (after normalization).
pub fn prepare_captions(ds: &Dataset, tagger: &dyn Tagger) -> Result<PreparedCaptions> {
    let mut out = PreparedCaptions::default();
    let mut seen: HashSet<(String, Vec<String>)> = HashSet::new();
    for c in &ds.captions {
        if c.text.trim().is_empty() {
            out.excluded.push((c.caption_id.clone(), Exclusion::TooShort(0)));
            continue;
        }
        match tokenize(c, tagger)? {
            Tokenized::Kept(seq) => {
                if seen.insert((seq.image_id.clone(), seq.tokens.clone())) {
                    out.sequences.push(seq);
                } else {
                    out.excluded.push((c.caption_id.clone(), Exclusion::Duplicate));
                }
            }
            Tokenized::Excluded(why) => out.excluded.push((c.caption_id.clone(), why)),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cap(id: &str, text: &str) -> CaptionRecord {
        CaptionRecord { caption_id: id.into(), image_id: "im".into(), text: text.into() }
    }

    #[test]
    fn synthetic_lexicon_tags_exactly() {
        let t = DictionaryTagger::synthetic();
        let Tokenized::Kept(seq) = tokenize(&cap("c", "A small red circle in the center"), &t).unwrap() else {
            panic!("caption should be kept");
        };
        assert_eq!(seq.tokens, ["a", "small", "red", "circle", "in", "the", "center"]);
        use PosTag::*;
        assert_eq!(seq.pos_tags, [Other, Adj, Adj, Noun, Other, Other, Noun]);
    }

    #[test]
    fn length_filter() {
        let t = DictionaryTagger::synthetic();
        assert_eq!(tokenize(&cap("c", "Hi"), &t).unwrap(), Tokenized::Excluded(Exclusion::TooShort(1)));
        let long = vec!["w"; 26].join(" ");
        assert_eq!(tokenize(&cap("c", &long), &t).unwrap(), Tokenized::Excluded(Exclusion::TooLong(26)));
        assert!(tokenize(&cap("c", "  "), &t).is_err());
    }

    #[test]
    fn punctuation_is_stripped() {
        assert_eq!(split_tokens("A dog, running!  Fast."), ["a", "dog", "running", "fast"]);
    }

    #[test]
    fn duplicate_captions_of_one_image_are_dropped() {
        let ds = Dataset {
            captions: vec![cap("c0", "a red circle"), cap("c1", "A red circle."), cap("c2", "a blue circle")],
            ..Dataset::default()
        };
        let p = prepare_captions(&ds, &DictionaryTagger::synthetic()).unwrap();
        let kept: Vec<_> = p.sequences.iter().map(|s| s.caption_id.as_str()).collect();
        assert_eq!(kept, ["c0", "c2"]);
        assert_eq!(p.excluded, vec![("c1".to_string(), Exclusion::Duplicate)]);
    }
}
