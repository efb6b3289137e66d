//! The full detector: sequence encoders, feature projections, co-attention,
//! fusion and a two-layer classifier head, plus the ablated variants.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{co_attend_vars, AttentionOutput, AttentionParams, SideVars, POSITION_DIM};
use crate::cluster::{cluster_tokens, ClusterConfig};
use crate::data::{MemePost, DEFAULT_MAX_OBJECTS};
use crate::error::{Error, Result};
use crate::io::synthetic::SEPARATOR;
use crate::io::{tokenize, EmbeddingTable};
use crate::nn::{
    read_checkpoint, write_checkpoint, Graph, ParamGrads, ParamId, ParameterStore, SeqEncoder,
    Tensor, Var,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Drops the global image feature.
    NoVisual,
    /// Drops the caption side; objects are mean-pooled.
    NoOcr,
    /// Drops description and comments.
    NoContext,
    /// Mean-pools both sides instead of attending.
    NoAttention,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoVisual,
        Ablation::NoOcr,
        Ablation::NoContext,
        Ablation::NoAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoVisual => "no_visual",
            Ablation::NoOcr => "no_ocr",
            Ablation::NoContext => "no_context",
            Ablation::NoAttention => "no_attention",
        }
    }

    fn uses_global(self) -> bool {
        self != Ablation::NoVisual
    }

    fn uses_captions(self) -> bool {
        self != Ablation::NoOcr
    }

    fn uses_context(self) -> bool {
        self != Ablation::NoContext
    }

    /// Number of `d`-wide blocks in the fused vector.
    pub fn fused_blocks(self) -> usize {
        match self {
            Ablation::Full | Ablation::NoAttention => 5,
            Ablation::NoVisual | Ablation::NoOcr => 4,
            Ablation::NoContext => 3,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of every fused block.
    pub d: usize,
    /// Encoder hidden size; must equal `d` so clusters and objects share a
    /// space.
    pub h: usize,
    /// Word embedding width. Zero means "take it from the embedding table".
    pub embed_dim: usize,
    /// Raw global feature width. Zero means "take it from the dataset".
    pub global_dim: usize,
    /// Raw visual object width. Zero means "take it from the dataset".
    pub object_dim: usize,
    pub mlp_hidden: usize,
    pub max_objects: usize,
    /// Token cap for the description and for the joined comments.
    pub max_context_tokens: usize,
    pub ablation: Ablation,
    pub cluster: ClusterConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 100,
            h: 100,
            embed_dim: 0,
            global_dim: 0,
            object_dim: 0,
            mlp_hidden: 128,
            max_objects: DEFAULT_MAX_OBJECTS,
            max_context_tokens: 256,
            ablation: Ablation::Full,
            cluster: ClusterConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("h", self.h),
            ("embed_dim", self.embed_dim),
            ("global_dim", self.global_dim),
            ("object_dim", self.object_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("max_objects", self.max_objects),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.h != self.d {
            return Err(Error::Config(format!(
                "model.h ({}) must equal model.d ({})",
                self.h, self.d
            )));
        }
        self.cluster.validate()
    }

    /// Fills data-dependent widths left at zero; rejects explicit values
    /// that disagree with the data.
    pub fn resolve_dims(
        &mut self,
        embed_dim: usize,
        global_dim: usize,
        object_dim: usize,
    ) -> Result<()> {
        for (name, field, actual) in [
            ("embed_dim", &mut self.embed_dim, embed_dim),
            ("global_dim", &mut self.global_dim, global_dim),
            ("object_dim", &mut self.object_dim, object_dim),
        ] {
            if *field == 0 {
                *field = actual;
            } else if *field != actual {
                return Err(Error::Config(format!(
                    "model.{name} is {} but the data has {actual}",
                    *field
                )));
            }
        }
        Ok(())
    }

    pub fn fused_dim(&self) -> usize {
        self.ablation.fused_blocks() * self.d
    }
}

/// A post reduced to everything the network reads, independent of the
/// parameters. Built once per post and reused across epochs.
#[derive(Clone, Debug)]
pub struct PreparedPost {
    pub id: String,
    pub label: Option<u8>,
    pub global: Vec<f64>,
    pub objects: Vec<Vec<f64>>,
    pub object_positions: Vec<[f64; POSITION_DIM]>,
    /// Embedded words of each token cluster.
    pub clusters: Vec<Vec<Vec<f64>>>,
    pub cluster_positions: Vec<[f64; POSITION_DIM]>,
    pub cluster_text: Vec<String>,
    pub description: Vec<Vec<f64>>,
    pub comments: Vec<Vec<f64>>,
}

/// Description and comments as token sequences: the comments are joined
/// oldest first with a separator, empty ones skipped, both capped.
pub fn context_tokens(post: &MemePost, cap: usize) -> (Vec<String>, Vec<String>) {
    let mut description = tokenize(&post.description);
    description.truncate(cap);
    let mut comments = Vec::new();
    for c in &post.comments {
        let words = tokenize(c);
        if words.is_empty() {
            continue;
        }
        if !comments.is_empty() {
            comments.push(SEPARATOR.to_string());
        }
        comments.extend(words);
    }
    comments.truncate(cap);
    (description, comments)
}

/// Values and intermediate features of one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForwardTrace {
    /// Empty for blocks the variant drops.
    pub f_v: Vec<f64>,
    pub f_c: Vec<f64>,
    pub f_g: Vec<f64>,
    pub f_d: Vec<f64>,
    pub f_u: Vec<f64>,
    pub fused: Vec<f64>,
    pub logits: [f64; 2],
    pub y_hat: f64,
    pub attention: Option<AttentionOutput>,
}

/// Handles of one forward pass recorded in a graph.
pub struct Recorded {
    pub probs: Var,
    pub y_hat: Var,
    pub logits: Var,
    pub fused: Var,
    blocks: [Option<Var>; 5],
    attention: Option<crate::attention::AttendVars>,
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn init(
        store: &mut ParameterStore,
        name: &str,
        out: usize,
        inp: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.insert_glorot(&format!("{name}.w"), out, inp, rng)?;
        let b = store.insert(&format!("{name}.b"), Tensor::zeros(&[out]))?;
        Ok(Linear { w, b })
    }

    fn bind(store: &ParameterStore, name: &str) -> Result<Self> {
        Ok(Linear {
            w: store.require(&format!("{name}.w"))?,
            b: store.require(&format!("{name}.b"))?,
        })
    }

    fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let wx = g.matmul(w, x)?;
        g.add_bias(wx, b)
    }
}

/// Parameter groups draw from separate streams of the seed, so a group
/// initialises identically whichever other groups a variant has.
const STREAM_ENCODER: u64 = 0;
const STREAM_GLOBAL: u64 = 1;
const STREAM_OBJECT: u64 = 2;
const STREAM_ATTENTION: u64 = 3;
const STREAM_HEAD: u64 = 4;

#[derive(Clone, Debug)]
pub struct AomdModel {
    pub config: ModelConfig,
    encoder: SeqEncoder,
    global: Option<Linear>,
    object: Option<Linear>,
    attention: Option<AttentionParams>,
    hidden: Linear,
    output: Linear,
}

impl AomdModel {
    /// Creates the parameters for `config` in a fresh store.
    pub fn init(config: ModelConfig, seed: u64) -> Result<(Self, ParameterStore)> {
        config.validate()?;
        let mut store = ParameterStore::new(seed);
        let rng = |stream| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r
        };
        let c = &config;
        let encoder = SeqEncoder::init(
            &mut store,
            "text",
            c.embed_dim,
            c.h,
            &mut rng(STREAM_ENCODER),
        )?;
        let global = if c.ablation.uses_global() {
            Some(Linear::init(
                &mut store,
                "global",
                c.d,
                c.global_dim,
                &mut rng(STREAM_GLOBAL),
            )?)
        } else {
            None
        };
        let object = if c.object_dim != c.d {
            Some(Linear::init(
                &mut store,
                "object",
                c.d,
                c.object_dim,
                &mut rng(STREAM_OBJECT),
            )?)
        } else {
            None
        };
        let attention = if matches!(c.ablation, Ablation::NoOcr | Ablation::NoAttention) {
            None
        } else {
            Some(AttentionParams::init(
                &mut store,
                "attention",
                c.d,
                &mut rng(STREAM_ATTENTION),
            )?)
        };
        let mut head_rng = rng(STREAM_HEAD);
        let hidden = Linear::init(
            &mut store,
            "head.hidden",
            c.mlp_hidden,
            c.fused_dim(),
            &mut head_rng,
        )?;
        let output = Linear::init(&mut store, "head.output", 2, c.mlp_hidden, &mut head_rng)?;
        Ok((
            AomdModel {
                config,
                encoder,
                global,
                object,
                attention,
                hidden,
                output,
            },
            store,
        ))
    }

    /// Looks up the parameters for `config` in an existing store.
    pub fn bind(config: ModelConfig, store: &ParameterStore) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let encoder = SeqEncoder::bind(store, "text")?;
        let global = c
            .ablation
            .uses_global()
            .then(|| Linear::bind(store, "global"))
            .transpose()?;
        let object = (c.object_dim != c.d)
            .then(|| Linear::bind(store, "object"))
            .transpose()?;
        let attention = (!matches!(c.ablation, Ablation::NoOcr | Ablation::NoAttention))
            .then(|| AttentionParams::bind(store, "attention"))
            .transpose()?;
        let model = AomdModel {
            encoder,
            global,
            object,
            attention,
            hidden: Linear::bind(store, "head.hidden")?,
            output: Linear::bind(store, "head.output")?,
            config,
        };
        let expect = |id: ParamId, shape: &[usize]| -> Result<()> {
            if store.value(id).shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, config implies {:?}",
                    store.name(id),
                    store.value(id).shape(),
                    shape
                )));
            }
            Ok(())
        };
        let c = &model.config;
        if model.encoder.input_dim != c.embed_dim || model.encoder.hidden != c.h {
            return Err(Error::Checkpoint(
                "encoder widths disagree with config".into(),
            ));
        }
        if let Some(l) = &model.global {
            expect(l.w, &[c.d, c.global_dim])?;
        }
        if let Some(l) = &model.object {
            expect(l.w, &[c.d, c.object_dim])?;
        }
        expect(model.hidden.w, &[c.mlp_hidden, c.fused_dim()])?;
        expect(model.output.w, &[2, c.mlp_hidden])?;
        Ok(model)
    }

    /// Checks the post against the configured widths, clusters its tokens
    /// and embeds every word sequence.
    pub fn prepare(&self, post: &MemePost, table: &EmbeddingTable) -> Result<PreparedPost> {
        let c = &self.config;
        if table.dim() != c.embed_dim {
            return Err(Error::DimensionMismatch {
                record: post.id.clone(),
                what: "embedding",
                expected: c.embed_dim,
                found: table.dim(),
            });
        }
        if post.global_feature.len() != c.global_dim {
            return Err(Error::DimensionMismatch {
                record: post.id.clone(),
                what: "global feature",
                expected: c.global_dim,
                found: post.global_feature.len(),
            });
        }
        let objects = &post.visual_objects[..post.visual_objects.len().min(c.max_objects)];
        for obj in objects {
            if obj.feature.len() != c.object_dim {
                return Err(Error::DimensionMismatch {
                    record: post.id.clone(),
                    what: "object feature",
                    expected: c.object_dim,
                    found: obj.feature.len(),
                });
            }
        }
        let trimmed = MemePost {
            visual_objects: objects.to_vec(),
            ..post.clone()
        };
        trimmed.validate(c.object_dim, c.max_objects)?;
        let (w, h) = post.image_size;
        let object_positions = objects
            .iter()
            .map(|o| o.bbox.normalize(w, h))
            .collect::<Result<Vec<_>>>()?;
        let embed = |words: &[String]| {
            words
                .iter()
                .map(|t| table.lookup(t).to_vec())
                .collect::<Vec<_>>()
        };
        let clusters = cluster_tokens(&post.word_tokens, &c.cluster);
        let cluster_positions = clusters
            .iter()
            .map(|cl| cl.bbox.normalize(w, h))
            .collect::<Result<Vec<_>>>()?;
        let (description, comments) = context_tokens(post, c.max_context_tokens);
        Ok(PreparedPost {
            id: post.id.clone(),
            label: post.label,
            global: post.global_feature.clone(),
            objects: objects.iter().map(|o| o.feature.clone()).collect(),
            object_positions,
            cluster_text: clusters.iter().map(|cl| cl.text()).collect(),
            clusters: clusters
                .iter()
                .map(|cl| {
                    let words: Vec<String> = cl.phrase.iter().flat_map(|p| tokenize(p)).collect();
                    embed(&words)
                })
                .collect(),
            cluster_positions,
            description: embed(&description),
            comments: embed(&comments),
        })
    }

    pub fn prepare_all(
        &self,
        posts: &[MemePost],
        table: &EmbeddingTable,
    ) -> Result<Vec<PreparedPost>> {
        posts.iter().map(|p| self.prepare(p, table)).collect()
    }

    fn encode(&self, g: &mut Graph<'_>, seq: &[Vec<f64>]) -> Result<Var> {
        let xs = seq
            .iter()
            .map(|x| g.input(Tensor::vector(x.clone())))
            .collect::<Result<Vec<_>>>()?;
        self.encoder.encode(g, &xs)
    }

    fn mean_or_zero(&self, g: &mut Graph<'_>, cols: &[Var]) -> Result<Var> {
        if cols.is_empty() {
            return g.input(Tensor::zeros(&[self.config.d]));
        }
        let m = g.stack_cols(cols)?;
        g.mean_cols(m)
    }

    /// Records the forward pass of one post in `g`.
    pub fn record(&self, g: &mut Graph<'_>, post: &PreparedPost) -> Result<Recorded> {
        let c = &self.config;
        let ab = c.ablation;

        let objects = post
            .objects
            .iter()
            .map(|f| {
                let x = g.input(Tensor::vector(f.clone()))?;
                match &self.object {
                    Some(l) => l.apply(g, x),
                    None => Ok(x),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let clusters = if ab.uses_captions() {
            post.clusters
                .iter()
                .map(|seq| self.encode(g, seq))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };

        let mut attention = None;
        let (f_v, f_c) = match ab {
            Ablation::NoOcr => (Some(self.mean_or_zero(g, &objects)?), None),
            Ablation::NoAttention => (
                Some(self.mean_or_zero(g, &objects)?),
                Some(self.mean_or_zero(g, &clusters)?),
            ),
            _ => {
                let params = self
                    .attention
                    .as_ref()
                    .expect("attention variants own attention params");
                let out = co_attend_vars(
                    g,
                    params,
                    c.d,
                    SideVars {
                        features: &objects,
                        positions: &post.object_positions,
                    },
                    SideVars {
                        features: &clusters,
                        positions: &post.cluster_positions,
                    },
                )?;
                attention = Some(out);
                (Some(out.f_v), Some(out.f_c))
            }
        };
        let f_g = match &self.global {
            Some(l) => {
                let x = g.input(Tensor::vector(post.global.clone()))?;
                Some(l.apply(g, x)?)
            }
            None => None,
        };
        let (f_d, f_u) = if ab.uses_context() {
            (
                Some(self.encode(g, &post.description)?),
                Some(self.encode(g, &post.comments)?),
            )
        } else {
            (None, None)
        };

        let blocks = [f_v, f_c, f_g, f_d, f_u];
        let parts: Vec<Var> = blocks.iter().flatten().copied().collect();
        let fused = g.concat(&parts)?;
        let pre = self.hidden.apply(g, fused)?;
        let hidden = g.tanh(pre)?;
        let logits = self.output.apply(g, hidden)?;
        let probs = g.softmax(logits)?;
        let y_hat = g.index(probs, 1)?;
        Ok(Recorded {
            probs,
            y_hat,
            logits,
            fused,
            blocks,
            attention,
        })
    }

    pub fn forward(&self, store: &ParameterStore, post: &PreparedPost) -> Result<ForwardTrace> {
        let mut g = Graph::new(store);
        let r = self.record(&mut g, post)?;
        let vals = |v: Option<Var>| v.map_or_else(Vec::new, |v| g.value(v).data().to_vec());
        let logits = g.value(r.logits).data();
        Ok(ForwardTrace {
            f_v: vals(r.blocks[0]),
            f_c: vals(r.blocks[1]),
            f_g: vals(r.blocks[2]),
            f_d: vals(r.blocks[3]),
            f_u: vals(r.blocks[4]),
            fused: g.value(r.fused).data().to_vec(),
            logits: [logits[0], logits[1]],
            y_hat: g.value(r.y_hat).item(),
            attention: r.attention.map(|a| AttentionOutput::from_vars(&g, &a)),
        })
    }

    pub fn predict(&self, store: &ParameterStore, post: &PreparedPost) -> Result<f64> {
        let mut g = Graph::new(store);
        let r = self.record(&mut g, post)?;
        Ok(g.value(r.y_hat).item())
    }

    /// 1 iff the offensive probability reaches `threshold`.
    pub fn classify(
        &self,
        store: &ParameterStore,
        post: &PreparedPost,
        threshold: f64,
    ) -> Result<u8> {
        Ok(classify_score(self.predict(store, post)?, threshold))
    }

    /// Cross-entropy of one labelled post and its parameter gradients,
    /// scaled by `scale`. Returns `(loss, y_hat, grads)`.
    pub fn loss_and_grads(
        &self,
        store: &ParameterStore,
        post: &PreparedPost,
        scale: f64,
    ) -> Result<(f64, f64, ParamGrads)> {
        let y = post.label.ok_or_else(|| Error::InvalidPost {
            id: post.id.clone(),
            reason: "training requires a label".into(),
        })?;
        let mut g = Graph::new(store);
        let r = self.record(&mut g, post)?;
        let loss = g.cross_entropy(r.y_hat, y)?;
        let grads = g.backward(loss, scale)?;
        Ok((g.value(loss).item(), g.value(r.y_hat).item(), grads))
    }

    /// Probability vector of one pass, for checks on the softmax output.
    pub fn probabilities(&self, store: &ParameterStore, post: &PreparedPost) -> Result<[f64; 2]> {
        let mut g = Graph::new(store);
        let r = self.record(&mut g, post)?;
        let p = g.value(r.probs).data();
        Ok([p[0], p[1]])
    }
}

pub fn classify_score(y_hat: f64, threshold: f64) -> u8 {
    (y_hat >= threshold) as u8
}

/// Writes parameters, optimizer state and the model config.
pub fn save_model(w: &mut impl Write, model: &AomdModel, store: &ParameterStore) -> Result<()> {
    write_checkpoint(w, store, &serde_json::to_string(&model.config)?)
}

pub fn load_model(r: &mut impl Read) -> Result<(AomdModel, ParameterStore)> {
    let (store, meta) = read_checkpoint(r)?;
    let config: ModelConfig =
        serde_json::from_str(&meta).map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
    let model = AomdModel::bind(config, &store)?;
    Ok((model, store))
}

/// One line of prediction output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub y_hat: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    pub alpha_v: Vec<f64>,
    pub alpha_c: Vec<f64>,
}

impl Prediction {
    pub fn from_trace(post: &PreparedPost, trace: &ForwardTrace) -> Self {
        let (alpha_v, alpha_c) = trace
            .attention
            .as_ref()
            .map_or_else(Default::default, |a| (a.alpha_v.clone(), a.alpha_c.clone()));
        Prediction {
            id: post.id.clone(),
            y_hat: trace.y_hat,
            label: post.label,
            alpha_v,
            alpha_c,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BoundingBox, VisualObject, WordToken};
    use crate::nn::gradcheck::check_gradients;
    use rand::Rng;

    fn table(dim: usize) -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let words = [
            "black", "people", "quiet", "society", "jews", "nice", "cat", "dog", "<sep>",
        ];
        EmbeddingTable::from_rows(
            words
                .iter()
                .map(|w| {
                    (
                        w.to_string(),
                        (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn config(d: usize, ablation: Ablation) -> ModelConfig {
        ModelConfig {
            d,
            h: d,
            embed_dim: 4,
            global_dim: 5,
            object_dim: 7,
            mlp_hidden: 6,
            ablation,
            ..Default::default()
        }
    }

    fn post(k: usize, s: usize, seed: u64) -> MemePost {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words = ["black", "people", "quiet", "society", "jews", "nice"];
        MemePost {
            id: format!("p{seed}"),
            global_feature: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect(),
            visual_objects: (0..k)
                .map(|i| VisualObject {
                    feature: (0..7).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    bbox: BoundingBox::from_rect(
                        10.0 * i as f64,
                        5.0,
                        10.0 * i as f64 + 30.0,
                        40.0,
                    ),
                })
                .collect(),
            word_tokens: (0..s)
                .map(|i| {
                    let y = 10.0 + 50.0 * i as f64;
                    WordToken::new(
                        words[i % words.len()],
                        BoundingBox::from_rect(5.0, y, 45.0, y + 12.0),
                    )
                })
                .collect(),
            description: "nice cat".into(),
            comments: vec!["cat dog".into(), "jews".into()],
            image_size: (100.0, 200.0),
            label: Some(1),
        }
    }

    fn setup(ablation: Ablation, seed: u64) -> (AomdModel, ParameterStore, EmbeddingTable) {
        let (m, s) = AomdModel::init(config(6, ablation), seed).unwrap();
        (m, s, table(4))
    }

    #[test]
    fn fused_width_per_variant() {
        for (ab, blocks) in [
            (Ablation::Full, 5),
            (Ablation::NoVisual, 4),
            (Ablation::NoOcr, 4),
            (Ablation::NoContext, 3),
            (Ablation::NoAttention, 5),
        ] {
            let (m, s, t) = setup(ab, 1);
            let p = m.prepare(&post(3, 2, 1), &t).unwrap();
            let tr = m.forward(&s, &p).unwrap();
            assert_eq!(tr.fused.len(), blocks * 6, "{ab}");
        }
        assert_eq!(ModelConfig::default().fused_dim(), 500);
    }

    #[test]
    fn empty_context_encodes_to_zero() {
        let (m, s, t) = setup(Ablation::Full, 2);
        let mut p = post(2, 2, 3);
        p.description.clear();
        p.comments.clear();
        let tr = m.forward(&s, &m.prepare(&p, &t).unwrap()).unwrap();
        assert_eq!(tr.f_d, vec![0.0; 6]);
        assert_eq!(tr.f_u, vec![0.0; 6]);
        assert!(tr.y_hat > 0.0 && tr.y_hat < 1.0);
    }

    #[test]
    fn zero_parameters_give_one_half() {
        let (m, mut s, t) = setup(Ablation::Full, 3);
        s.zero_values();
        let tr = m
            .forward(&s, &m.prepare(&post(3, 2, 4), &t).unwrap())
            .unwrap();
        assert_eq!(tr.y_hat, 0.5);
        assert_eq!(
            m.classify(&s, &m.prepare(&post(3, 2, 4), &t).unwrap(), 0.5)
                .unwrap(),
            1
        );
    }

    #[test]
    fn tie_and_threshold() {
        assert_eq!(classify_score(0.5, 0.5), 1);
        assert_eq!(classify_score(0.2, 0.5), 0);
        assert_eq!(classify_score(0.2, 0.1), 1);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let (m, s, t) = setup(Ablation::Full, 11);
            m.forward(&s, &m.prepare(&post(4, 3, 5), &t).unwrap())
                .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.y_hat.to_bits(), b.y_hat.to_bits());
        assert_eq!(a, b);
    }

    #[test]
    fn probabilities_sum_to_one_and_shift_invariant() {
        let (m, mut s, t) = setup(Ablation::Full, 12);
        let p = m.prepare(&post(3, 2, 6), &t).unwrap();
        let before = m.probabilities(&s, &p).unwrap();
        assert!((before[0] + before[1] - 1.0).abs() < 1e-12);
        let b = s.id("head.output.b").unwrap();
        s.value_mut(b).data_mut().iter_mut().for_each(|x| *x += 3.0);
        let after = m.probabilities(&s, &p).unwrap();
        assert!((before[1] - after[1]).abs() < 1e-12);
    }

    #[test]
    fn no_attention_matches_full_on_single_atoms() {
        let (full, s_full, t) = setup(Ablation::Full, 13);
        let (na, s_na, _) = setup(Ablation::NoAttention, 13);
        let p = post(1, 1, 7);
        let a = full
            .forward(&s_full, &full.prepare(&p, &t).unwrap())
            .unwrap();
        let b = na.forward(&s_na, &na.prepare(&p, &t).unwrap()).unwrap();
        assert_eq!(a.y_hat.to_bits(), b.y_hat.to_bits());
    }

    #[test]
    fn full_and_no_attention_differ_on_several_atoms() {
        let (full, s_full, t) = setup(Ablation::Full, 13);
        let (na, s_na, _) = setup(Ablation::NoAttention, 13);
        let p = post(4, 3, 7);
        let a = full
            .forward(&s_full, &full.prepare(&p, &t).unwrap())
            .unwrap();
        let b = na.forward(&s_na, &na.prepare(&p, &t).unwrap()).unwrap();
        assert_ne!(a.y_hat, b.y_hat);
    }

    #[test]
    fn no_context_ignores_context() {
        let (m, s, t) = setup(Ablation::NoContext, 14);
        let p = post(3, 2, 8);
        let mut garbage = p.clone();
        garbage.description = "jews jews society quiet".into();
        garbage.comments = vec!["x".into(); 40];
        let a = m.predict(&s, &m.prepare(&p, &t).unwrap()).unwrap();
        let b = m.predict(&s, &m.prepare(&garbage, &t).unwrap()).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn empty_comments_are_skipped() {
        let (m, s, t) = setup(Ablation::Full, 15);
        let p = post(2, 2, 9);
        let mut padded = p.clone();
        padded.comments = vec![
            "".into(),
            p.comments[0].clone(),
            "  ".into(),
            p.comments[1].clone(),
            "".into(),
        ];
        let a = m.predict(&s, &m.prepare(&p, &t).unwrap()).unwrap();
        let b = m.predict(&s, &m.prepare(&padded, &t).unwrap()).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn comment_tokens_are_joined_and_capped() {
        let mut p = post(0, 0, 1);
        p.comments = vec!["a b".into(), "".into(), "c".into()];
        let (_, u) = context_tokens(&p, 256);
        assert_eq!(u, ["a", "b", SEPARATOR, "c"]);
        p.comments = vec!["w ".repeat(300)];
        assert_eq!(context_tokens(&p, 256).1.len(), 256);
    }

    #[test]
    fn no_objects_or_captions_still_classify() {
        let (m, s, t) = setup(Ablation::Full, 16);
        let tr = m
            .forward(&s, &m.prepare(&post(0, 0, 10), &t).unwrap())
            .unwrap();
        assert_eq!(tr.f_v, vec![0.0; 6]);
        assert_eq!(tr.f_c, vec![0.0; 6]);
        assert!(tr.y_hat.is_finite());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (m, _, t) = setup(Ablation::Full, 17);
        let mut p = post(2, 1, 11);
        p.global_feature.push(0.0);
        assert!(matches!(
            m.prepare(&p, &t),
            Err(Error::DimensionMismatch { .. })
        ));
        let mut p = post(2, 1, 11);
        p.visual_objects[1].feature.pop();
        assert!(matches!(
            m.prepare(&p, &t),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(m.prepare(&post(1, 1, 1), &table(3)).is_err());
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for ab in Ablation::ALL {
            let (m, mut s, t) = setup(ab, 21);
            let p = m.prepare(&post(3, 2, 12), &t).unwrap();
            let report = check_gradients(&mut s, |g| {
                let r = m.record(g, &p)?;
                g.cross_entropy(r.y_hat, 1)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{ab}: {report:?}");
        }
    }

    #[test]
    fn checkpoint_round_trip_rebinds() {
        let (m, s, t) = setup(Ablation::NoVisual, 22);
        let mut buf = Vec::new();
        save_model(&mut buf, &m, &s).unwrap();
        let (m2, s2) = load_model(&mut buf.as_slice()).unwrap();
        assert_eq!(m2.config, m.config);
        let p = m.prepare(&post(3, 2, 13), &t).unwrap();
        assert_eq!(
            m.predict(&s, &p).unwrap().to_bits(),
            m2.predict(&s2, &p).unwrap().to_bits()
        );
    }

    #[test]
    fn bind_rejects_wrong_variant() {
        let (_, s, _) = setup(Ablation::NoVisual, 23);
        assert!(AomdModel::bind(config(6, Ablation::Full), &s).is_err());
    }

    #[test]
    fn config_rules() {
        let mut c = config(6, Ablation::Full);
        c.h = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.resolve_dims(50, 2048, 100).unwrap();
        assert_eq!((c.embed_dim, c.global_dim, c.object_dim), (50, 2048, 100));
        assert!(c.resolve_dims(51, 2048, 100).is_err());
        assert_eq!("no_ocr".parse::<Ablation>().unwrap(), Ablation::NoOcr);
        assert!("nope".parse::<Ablation>().is_err());
        let json = serde_json::to_string(&Ablation::NoAttention).unwrap();
        assert_eq!(json, "\"no_attention\"");
    }

    #[test]
    fn prediction_line_shape() {
        let (m, s, t) = setup(Ablation::Full, 24);
        let p = m.prepare(&post(3, 2, 14), &t).unwrap();
        let pred = Prediction::from_trace(&p, &m.forward(&s, &p).unwrap());
        assert_eq!(pred.alpha_v.len(), 3);
        assert_eq!(pred.alpha_c.len(), 2);
        let line = serde_json::to_value(&pred).unwrap();
        assert_eq!(line["id"], "p14");
        assert_eq!(line["label"], 1);
    }
}
