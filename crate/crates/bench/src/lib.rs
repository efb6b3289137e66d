//! Input builders shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use aomd_core::io::synthetic::{generate, SyntheticSpec};
use aomd_core::model::PreparedPost;
use aomd_core::{
    AomdModel, BoundingBox, EmbeddingTable, MemePost, ModelConfig, ParameterStore, WordToken,
};

/// `n` caption-like tokens laid out in lines of five words.
pub fn caption_tokens(n: usize, seed: u64) -> Vec<WordToken> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let line = (i / 5) as f64;
            let x = (i % 5) as f64 * 60.0 + rng.random_range(0.0..8.0);
            let y = line * 40.0 + rng.random_range(0.0..4.0);
            WordToken::new(
                format!("w{i}"),
                BoundingBox::from_rect(x, y, x + 50.0, y + 18.0),
            )
        })
        .collect()
}

pub struct ForwardFixture {
    pub model: AomdModel,
    pub store: ParameterStore,
    pub post: PreparedPost,
}

/// A model at width `d` and one synthetic post prepared for it.
pub fn forward_fixture(d: usize) -> ForwardFixture {
    let corpus = generate(&SyntheticSpec {
        n_posts: 20,
        seed: 3,
        ..Default::default()
    })
    .expect("synthetic corpus");
    let post: &MemePost = &corpus.dataset.posts[0];
    let table: &EmbeddingTable = &corpus.embeddings;
    let config = ModelConfig {
        d,
        h: d,
        embed_dim: table.dim(),
        global_dim: post.global_feature.len(),
        object_dim: corpus.dataset.header.object_dim,
        ..Default::default()
    };
    let (model, store) = AomdModel::init(config, 1).expect("model init");
    let post = model.prepare(post, table).expect("prepare");
    ForwardFixture { model, store, post }
}
