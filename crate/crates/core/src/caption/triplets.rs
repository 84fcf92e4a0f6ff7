use std::path::Path;

use serde::{Deserialize, Serialize};

use super::concepts::ConceptSet;
use super::tokenize::TokenSequence;
use crate::corpus::store::{read_jsonl, write_jsonl};
use crate::error::Result;
use crate::text::vocab::{Vocabulary, UNK};

/// One masked-token training unit.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskTriplet {
    pub image_id: String,
    pub caption_id: String,
    pub mask_index: usize,
    pub target_vocab_id: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkippedToken {
    pub caption_id: String,
    pub position: usize,
    pub token: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripletSet {
    pub triplets: Vec<MaskTriplet>,
    pub skipped: Vec<SkippedToken>,
}

/// One triplet per occurrence of a concept token, in caption order then
/// position order. Concept tokens without a vocabulary id are skipped.
pub fn build_triplets(seqs: &[TokenSequence], cs: &ConceptSet, vocab: &Vocabulary) -> TripletSet {
    let mut out = TripletSet::default();
    for s in seqs {
        for (m, tok) in s.tokens.iter().enumerate() {
            if !cs.contains(tok) {
                continue;
            }
            match vocab.id(tok).filter(|&id| id != UNK) {
                Some(id) => out.triplets.push(MaskTriplet {
                    image_id: s.image_id.clone(),
                    caption_id: s.caption_id.clone(),
                    mask_index: m,
                    target_vocab_id: id,
                }),
                None => out.skipped.push(SkippedToken { caption_id: s.caption_id.clone(), position: m, token: tok.clone() }),
            }
        }
    }
    out
}

pub fn save_triplets(path: &Path, triplets: &[MaskTriplet]) -> Result<()> {
    write_jsonl(path, triplets)
}

pub fn load_triplets(path: &Path) -> Result<Vec<MaskTriplet>> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caption::tokenize::PosTag;
    use crate::caption::ConceptOrigin;

    fn seq(id: &str, text: &str) -> TokenSequence {
        let tokens: Vec<String> = text.split(' ').map(String::from).collect();
        TokenSequence { caption_id: id.into(), image_id: "img".into(), pos_tags: vec![PosTag::Other; tokens.len()], tokens }
    }

    fn concepts(words: &[&str]) -> ConceptSet {
        ConceptSet {
            concepts: words.iter().map(|w| w.to_string()).collect(),
            pos: vec![PosTag::Noun; words.len()],
            counts: vec![1; words.len()],
            pos_filter: vec![PosTag::Noun],
            origin: ConceptOrigin::Postag,
            exhausted: false,
        }
    }

    #[test]
    fn one_triplet_per_occurrence() {
        let seqs = vec![seq("c0", "a red circle near a blue circle"), seq("c1", "nothing to see")];
        let vocab = Vocabulary::build(&seqs);
        let ts = build_triplets(&seqs, &concepts(&["circle", "red", "blue"]), &vocab);
        let pos: Vec<usize> = ts.triplets.iter().map(|t| t.mask_index).collect();
        assert_eq!(pos, [1, 2, 5, 6]);
        for t in &ts.triplets {
            assert_eq!(vocab.token(t.target_vocab_id), seqs[0].tokens[t.mask_index]);
        }
        assert!(ts.skipped.is_empty());
    }

    #[test]
    fn tokens_missing_from_vocabulary_are_reported() {
        let seqs = vec![seq("c0", "a red circle")];
        let vocab = Vocabulary::build(&[seq("x", "a blue circle")]);
        let ts = build_triplets(&seqs, &concepts(&["circle", "red"]), &vocab);
        assert_eq!(ts.triplets.len(), 1);
        assert_eq!(ts.skipped, vec![SkippedToken { caption_id: "c0".into(), position: 1, token: "red".into() }]);
    }

    #[test]
    fn jsonl_round_trip() {
        let seqs = vec![seq("c0", "a red circle")];
        let vocab = Vocabulary::build(&seqs);
        let ts = build_triplets(&seqs, &concepts(&["circle", "red"]), &vocab);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        save_triplets(&p, &ts.triplets).unwrap();
        assert_eq!(load_triplets(&p).unwrap(), ts.triplets);
    }
}
