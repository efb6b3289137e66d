//! Dataset manifests, feature files, embedding tables and the synthetic
//! corpus generator.

mod embeddings;
mod features;
mod manifest;
pub mod synthetic;

pub use embeddings::{load_embeddings, normalize_word, read_embeddings, tokenize, EmbeddingTable};
pub use features::{read_features, read_header, write_features, FeatureFile, FeatureHeader};
pub use manifest::{
    assign_splits, load_dataset, save_dataset, split_key, Dataset, ManifestHeader, PostRecord,
    DATA_DIR_ENV, DEFAULT_FRACTIONS, MANIFEST_FORMAT, MANIFEST_VERSION,
};
pub use synthetic::{gen_synthetic, generate, SyntheticCorpus, SyntheticSpec};
