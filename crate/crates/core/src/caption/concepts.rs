use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tokenize::{PosTag, TokenSequence};
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptOrigin {
    Postag,
    Cluster,
}

/// The concepts a proxy task recognizes: frequent tagged tokens, or caption
/// cluster ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptSet {
    pub concepts: Vec<String>,
    pub pos: Vec<PosTag>,
    pub counts: Vec<u64>,
    pub pos_filter: Vec<PosTag>,
    pub origin: ConceptOrigin,
    /// Set when fewer than the requested number of concepts qualified.
    pub exhausted: bool,
}

impl ConceptSet {
    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c == token)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index_of(token).is_some()
    }

    /// Concept set whose members are the cluster ids `c0..c{k-1}`.
    pub fn from_clusters(assignments: &[usize], k: usize) -> Self {
        let mut counts = vec![0u64; k];
        for &a in assignments {
            counts[a] += 1;
        }
        ConceptSet {
            concepts: (0..k).map(|i| format!("c{i}")).collect(),
            pos: vec![PosTag::Other; k],
            counts,
            pos_filter: Vec::new(),
            origin: ConceptOrigin::Cluster,
            exhausted: false,
        }
    }

    /// `token<TAB>pos<TAB>count` per line, in concept order.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for ((c, p), n) in self.concepts.iter().zip(&self.pos).zip(&self.counts) {
            writeln!(s, "{c}\t{p}\t{n}").unwrap();
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cs = ConceptSet {
            concepts: Vec::new(),
            pos: Vec::new(),
            counts: Vec::new(),
            pos_filter: Vec::new(),
            origin: ConceptOrigin::Postag,
            exhausted: false,
        };
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Ingest { path: path.into(), line: i + 1, msg: "expected token<TAB>pos<TAB>count".into() };
            let mut parts = line.split('\t');
            let (Some(tok), Some(pos), Some(n), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(bad());
            };
            cs.concepts.push(tok.to_string());
            cs.pos.push(pos.parse()?);
            cs.counts.push(n.parse().map_err(|_| bad())?);
        }
        let mut filter: Vec<PosTag> = cs.pos.clone();
        filter.sort();
        filter.dedup();
        if filter == [PosTag::Other] && cs.concepts.iter().all(|c| c.starts_with('c')) {
            cs.origin = ConceptOrigin::Cluster;
            filter.clear();
        }
        cs.pos_filter = filter;
        Ok(cs)
    }
}

/// The `k` most frequent tokens whose tag is in `pos_filter`; frequency
/// descending, ties broken lexicographically.
pub fn build_postag_concepts(seqs: &[TokenSequence], pos_filter: &[PosTag], k: usize) -> Result<ConceptSet> {
    ensure!(k >= 1, "concept set size must be at least 1");
    ensure!(!pos_filter.is_empty(), "POS filter must not be empty");
    let mut counts: HashMap<&str, (u64, HashMap<PosTag, u64>)> = HashMap::new();
    for s in seqs {
        for (tok, &tag) in s.tokens.iter().zip(&s.pos_tags) {
            if pos_filter.contains(&tag) {
                let e = counts.entry(tok.as_str()).or_default();
                e.0 += 1;
                *e.1.entry(tag).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, u64, PosTag)> = counts
        .into_iter()
        .map(|(tok, (n, tags))| {
            let tag = tags.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|t| t.0).unwrap();
            (tok, n, tag)
        })
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let exhausted = ranked.len() < k;
    if exhausted {
        tracing::warn!(requested = k, available = ranked.len(), "fewer qualifying tokens than requested concepts");
    }
    ranked.truncate(k);
    ensure!(!ranked.is_empty(), "no token matches the POS filter");
    let mut filter = pos_filter.to_vec();
    filter.sort();
    filter.dedup();
    Ok(ConceptSet {
        concepts: ranked.iter().map(|r| r.0.to_string()).collect(),
        pos: ranked.iter().map(|r| r.2).collect(),
        counts: ranked.iter().map(|r| r.1).collect(),
        pos_filter: filter,
        origin: ConceptOrigin::Postag,
        exhausted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::tokenize::{prepare_captions, DictionaryTagger};
    use crate::corpus::generate_synthetic;

    #[test]
    fn top_nouns_match_an_exhaustive_count() {
        let ds = generate_synthetic(300, 4);
        let seqs = prepare_captions(&ds, &DictionaryTagger::synthetic()).unwrap().sequences;
        let cs = build_postag_concepts(&seqs, &[PosTag::Noun], 4).unwrap();

        let mut oracle: std::collections::BTreeMap<String, u64> = Default::default();
        for c in &ds.captions {
            for w in c.text.split(' ') {
                if crate::corpus::synthetic::ShapeKind::ALL.iter().any(|s| s.word() == w)
                    || crate::corpus::synthetic::REGION_WORDS.contains(&w)
                {
                    *oracle.entry(w.to_string()).or_default() += 1;
                }
            }
        }
        let mut expected: Vec<(String, u64)> = oracle.into_iter().collect();
        expected.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        expected.truncate(4);
        let got: Vec<(String, u64)> = cs.concepts.iter().cloned().zip(cs.counts.iter().copied()).collect();
        assert_eq!(got, expected);
        assert!(!cs.exhausted);
    }

    #[test]
    fn requesting_too_many_returns_everything_flagged() {
        let ds = generate_synthetic(200, 4);
        let seqs = prepare_captions(&ds, &DictionaryTagger::synthetic()).unwrap().sequences;
        let cs = build_postag_concepts(&seqs, &[PosTag::Noun], 1000).unwrap();
        assert!(cs.exhausted);
        assert_eq!(cs.len(), 13);
    }

    #[test]
    fn full_scale_configuration_is_accepted() {
        let ds = generate_synthetic(50, 1);
        let seqs = prepare_captions(&ds, &DictionaryTagger::synthetic()).unwrap().sequences;
        let cs = build_postag_concepts(&seqs, &[PosTag::Noun, PosTag::Adj, PosTag::Verb], 1000).unwrap();
        assert!(cs.contains("is") && cs.contains("red") && cs.contains("circle"));
    }

    #[test]
    fn tsv_round_trip() {
        let ds = generate_synthetic(40, 2);
        let seqs = prepare_captions(&ds, &DictionaryTagger::synthetic()).unwrap().sequences;
        let cs = build_postag_concepts(&seqs, &[PosTag::Noun, PosTag::Adj], 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("concepts.tsv");
        cs.save(&p).unwrap();
        let back = ConceptSet::load(&p).unwrap();
        assert_eq!(back.concepts, cs.concepts);
        assert_eq!(back.counts, cs.counts);
        assert_eq!(back.pos, cs.pos);
    }
}
