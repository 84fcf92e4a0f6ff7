//! From captions to supervision: tokens and tags, concept sets, label
//! vectors and masked triplets.

mod concepts;
pub mod kmeans;
mod labels;
mod tokenize;
mod triplets;

pub use concepts::{build_postag_concepts, ConceptOrigin, ConceptSet};
pub use kmeans::{kmeans, KMeans};
pub use labels::{build_cluster_labels, build_postag_labels, normalize, LabelSet, LabelVector};
pub use tokenize::{
    prepare_captions, split_tokens, tagger_by_name, tokenize, DictionaryTagger, Exclusion, PosTag, PreparedCaptions,
    Tagger, TokenSequence, Tokenized, MAX_TOKENS, MIN_TOKENS,
};
pub use triplets::{build_triplets, load_triplets, save_triplets, MaskTriplet, SkippedToken, TripletSet};

/// Clusters caption `[CLS]` embeddings (`n x d_w`, one row per caption).
pub fn build_cluster_concepts(cls_embeddings: &icmlm_tensor::Tensor<f64>, k: usize, seed: u64) -> crate::Result<KMeans> {
    kmeans(cls_embeddings, k, seed, kmeans::DEFAULT_MAX_ITER, kmeans::DEFAULT_TOL)
}
