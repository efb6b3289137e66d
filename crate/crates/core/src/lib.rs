//! Offensive meme detection that aligns visual objects with the caption
//! phrases written over them.
//!
//! A post is read as four signals: the whole image, detected objects,
//! clustered caption tokens, and the surrounding text (description and
//! comments). A co-attention layer pairs objects with caption clusters so
//! the classifier can pick up meaning that neither side carries alone.
//!
//! The crate is self-contained: a small reverse-mode engine in [`nn`]
//! backs the model, [`train`] fits it, and [`metrics`] scores it.

pub mod ablation;
pub mod agreement;
pub mod attention;
pub mod cluster;
pub mod data;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;

pub use ablation::{run_ablation_suite, write_ablation_table, AblationRow};
pub use agreement::{fleiss_kappa, load_annotations};
pub use attention::{co_attend, AttentionOutput, AttentionParams, POSITION_DIM};
pub use cluster::{cluster_tokens, ClusterConfig};
pub use data::{
    AnnotationRecord, BoundingBox, MemePost, Split, TokenCluster, VisualObject, WordToken,
};
pub use error::{Error, Result};
pub use io::{load_dataset, load_embeddings, save_dataset, Dataset, EmbeddingTable, SyntheticSpec};
pub use metrics::{evaluate, Confusion, EvalReport};
pub use model::{load_model, save_model, Ablation, AomdModel, ModelConfig, Prediction};
pub use nn::{OptimConfig, ParameterStore};
pub use train::{train, EpochRecord, TrainConfig, TrainOutcome};
