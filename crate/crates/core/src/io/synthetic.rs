//! Deterministic synthetic meme corpora with planted cross-modal analogies.
//!
//! Every analog word is tied to two visual prototypes, one offensive and one
//! benign. An analogy post shows one prototype next to a caption token
//! carrying its tied word, plus a decoy prototype of the opposite class
//! belonging to a different word. Neither the word nor the set of objects
//! alone reveals the label; the pairing does.
//!
//! The remaining posts carry their label in exactly one other channel:
//! either a description keyword or a fixed direction of the global image
//! feature. That direction is zeroed on every other post, so each input
//! channel holds information no other channel has.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::embeddings::EmbeddingTable;
use super::manifest::{save_dataset, Dataset, ManifestHeader};
use crate::data::{BoundingBox, MemePost, VisualObject, WordToken};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.jsonl";
pub const EMBEDDINGS_NAME: &str = "embeddings.txt";
/// Share of offensive posts.
pub const POSITIVE_RATE: f64 = 0.35;
/// Reserved token separating comments in the context sequence.
pub const SEPARATOR: &str = "<sep>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_posts: usize,
    pub seed: u64,
    /// Visual object feature length.
    #[serde(alias = "d")]
    pub object_dim: usize,
    /// Global image feature length.
    #[serde(alias = "d_g")]
    pub global_dim: usize,
    pub embed_dim: usize,
    /// Filler words in the vocabulary.
    pub vocab_size: usize,
    pub analog_words: usize,
    pub analogy_rate: f64,
    /// Standard deviation of Gaussian jitter on planted prototype features.
    pub noise_rate: f64,
    /// Share of non-analogy posts whose label shows only in the global
    /// feature; the rest carry a description keyword.
    pub visual_rate: f64,
    /// Magnitude of the global feature along the label direction on those
    /// posts.
    pub global_hint: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_posts: 400,
            seed: 7,
            object_dim: 32,
            global_dim: 4,
            embed_dim: 32,
            vocab_size: 50,
            analog_words: 2,
            analogy_rate: 0.8,
            noise_rate: 0.05,
            visual_rate: 0.5,
            global_hint: 2.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_posts < 10 {
            return bad(format!(
                "synthetic.n_posts must be >= 10, got {}",
                self.n_posts
            ));
        }
        for (name, v) in [
            ("analogy_rate", self.analogy_rate),
            ("noise_rate", self.noise_rate),
            ("visual_rate", self.visual_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("synthetic.{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.object_dim == 0 || self.global_dim == 0 || self.embed_dim == 0 {
            return bad("synthetic dimensions must be positive".into());
        }
        if self.vocab_size < 10 {
            return bad("synthetic.vocab_size must be >= 10".into());
        }
        if self.analog_words < 2 {
            return bad("synthetic.analog_words must be >= 2".into());
        }
        if !(self.global_hint >= 0.0) {
            return bad("synthetic.global_hint must be >= 0".into());
        }
        Ok(())
    }
}

pub fn analog_word(i: usize) -> String {
    format!("analog{i}")
}

pub const OFFENSIVE_KEYWORDS: [&str; 2] = ["vile", "vermin"];
pub const BENIGN_KEYWORDS: [&str; 2] = ["wholesome", "lovely"];

fn filler(i: usize) -> String {
    format!("w{i:03}")
}

/// A generated corpus before it is written to disk.
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    pub embeddings: EmbeddingTable,
    /// `prototypes[word][class]`: the object features tied to each analog word.
    pub prototypes: Vec<[Vec<f64>; 2]>,
    /// For analogy posts, the analog word and the index of its planted object.
    pub planted: Vec<Option<Planted>>,
    /// Where each post's label can be read.
    pub cues: Vec<Cue>,
    /// Unit direction of the global feature that carries visual labels.
    pub hint_dir: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cue {
    Analogy,
    Keyword,
    Visual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Planted {
    pub word: usize,
    pub object: usize,
    pub decoy: usize,
}

struct Layout {
    width: f64,
    height: f64,
    token_h: f64,
    /// Horizontal bands already holding a caption cluster.
    bands_used: Vec<usize>,
}

const BANDS: usize = 4;

impl Layout {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        Layout {
            width: rng.random_range(300..=600) as f64,
            height: rng.random_range(300..=600) as f64,
            token_h: rng.random_range(16..=24) as f64,
            bands_used: Vec::new(),
        }
    }

    /// Places a one-line cluster in a free band; returns its tokens.
    fn place_line(&mut self, rng: &mut ChaCha8Rng, words: &[String]) -> Vec<WordToken> {
        let free: Vec<usize> = (0..BANDS)
            .filter(|b| !self.bands_used.contains(b))
            .collect();
        let band = *free.choose(rng).expect("at most BANDS clusters per post");
        self.bands_used.push(band);
        let band_h = self.height / BANDS as f64;
        let h = self.token_h;
        let gap = 0.3 * h;
        let widths: Vec<f64> = words
            .iter()
            .map(|w| 0.6 * h * w.chars().count() as f64)
            .collect();
        let total: f64 = widths.iter().sum::<f64>() + gap * (words.len() as f64 - 1.0);
        let x0 = rng.random_range(2.0..(self.width - total - 2.0).max(3.0));
        // Keeping 0.6h clear at each band edge leaves > 2 * pad between
        // lines of neighbouring bands, so captions never merge.
        let y0 = band as f64 * band_h + rng.random_range(0.6 * h..(band_h - 1.6 * h));
        let mut x = x0;
        words
            .iter()
            .zip(widths)
            .map(|(w, wd)| {
                let t = WordToken::new(w.clone(), BoundingBox::from_rect(x, y0, x + wd, y0 + h));
                x += wd + gap;
                t
            })
            .collect()
    }

    fn object_box(&self, rng: &mut ChaCha8Rng, cx: f64, cy: f64) -> BoundingBox {
        let cx = cx.clamp(6.0, self.width - 6.0);
        let cy = cy.clamp(6.0, self.height - 6.0);
        let hw = (rng.random_range(0.08..0.18) * self.width)
            .min(cx)
            .min(self.width - cx);
        let hh = (rng.random_range(0.08..0.18) * self.height)
            .min(cy)
            .min(self.height - cy);
        BoundingBox::from_rect(cx - hw, cy - hh, cx + hw, cy + hh)
    }

    fn random_center(&self, rng: &mut ChaCha8Rng) -> (f64, f64) {
        (
            rng.random_range(0.1..0.9) * self.width,
            rng.random_range(0.1..0.9) * self.height,
        )
    }

    fn norm_dist(&self, a: (f64, f64), b: (f64, f64)) -> f64 {
        (((a.0 - b.0) / self.width).powi(2) + ((a.1 - b.1) / self.height).powi(2)).sqrt()
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Rounds through `f32` so in-memory values match what the feature file
/// stores.
fn f32_exact(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

fn filler_words(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, lo: usize, hi: usize) -> Vec<String> {
    let n = rng.random_range(lo..=hi);
    (0..n)
        .map(|_| filler(rng.random_range(0..spec.vocab_size)))
        .collect()
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Vocabulary and embeddings.
    let mut vocab: Vec<String> = (0..spec.vocab_size).map(filler).collect();
    vocab.extend((0..spec.analog_words).map(analog_word));
    vocab.extend(
        OFFENSIVE_KEYWORDS
            .iter()
            .chain(&BENIGN_KEYWORDS)
            .map(|s| s.to_string()),
    );
    vocab.push(SEPARATOR.to_string());
    let emb_scale = 1.0;
    let rows = vocab
        .into_iter()
        .map(|w| {
            let v = normal_vec(&mut rng, spec.embed_dim, emb_scale);
            (w, v.into_iter().map(|x| x as f32 as f64).collect())
        })
        .collect();
    let embeddings = EmbeddingTable::from_rows(rows)?;

    // A prototype is a word-identity half followed by a class half; the
    // class halves are shared by all words. An analogy post always shows
    // both class halves (planted and decoy), so only the object whose
    // identity half matches the caption word tells which one counts.
    let signs = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect()
    };
    let split = spec.object_dim / 2;
    let identity: Vec<Vec<f64>> = (0..spec.analog_words)
        .map(|_| signs(&mut rng, split))
        .collect();
    let class_half = [
        signs(&mut rng, spec.object_dim - split),
        signs(&mut rng, spec.object_dim - split),
    ];
    let prototypes: Vec<[Vec<f64>; 2]> = identity
        .iter()
        .map(|id| [0, 1].map(|y| [id.as_slice(), &class_half[y]].concat()))
        .collect();
    let hint_dir = normal_vec(&mut rng, spec.global_dim, 1.0);
    let hint_norm = hint_dir.iter().map(|x| x * x).sum::<f64>().sqrt();
    let hint_dir: Vec<f64> = hint_dir.iter().map(|x| x / hint_norm).collect();

    let mut posts = Vec::with_capacity(spec.n_posts);
    let mut planted_at = Vec::with_capacity(spec.n_posts);
    let mut cues = Vec::with_capacity(spec.n_posts);
    for n in 0..spec.n_posts {
        let label: u8 = rng.random_bool(POSITIVE_RATE) as u8;
        let analogy = rng.random_bool(spec.analogy_rate);
        let cue = if analogy {
            Cue::Analogy
        } else if rng.random_bool(spec.visual_rate) {
            Cue::Visual
        } else {
            Cue::Keyword
        };
        let mut layout = Layout::new(&mut rng);
        let mut objects: Vec<VisualObject> = Vec::new();
        let mut tokens: Vec<WordToken> = Vec::new();
        let description;
        let mut word_of_post = None;

        if analogy {
            let word = rng.random_range(0..spec.analog_words);
            word_of_post = Some(word);
            let phrase = vec![analog_word(word)];
            let line = layout.place_line(&mut rng, &phrase);
            let anchor_tok = line.iter().find(|t| t.word == analog_word(word)).unwrap();
            let anchor = anchor_tok.bbox.envelope_unchecked().center();
            tokens.extend(line);

            let jitter = |rng: &mut ChaCha8Rng, v: f64, extent: f64| {
                v + rng.random_range(-0.05..0.05) * extent
            };
            let (cx, cy) = (
                jitter(&mut rng, anchor.0, layout.width),
                jitter(&mut rng, anchor.1, layout.height),
            );
            let planted_box = layout.object_box(&mut rng, cx, cy);
            let mut planted = prototypes[word][label as usize].clone();
            for (p, e) in
                planted
                    .iter_mut()
                    .zip(normal_vec(&mut rng, spec.object_dim, spec.noise_rate))
            {
                *p += e;
            }
            objects.push(VisualObject {
                feature: planted,
                bbox: planted_box,
            });

            let mut other = rng.random_range(0..spec.analog_words - 1);
            if other >= word {
                other += 1;
            }
            let decoy_center = loop {
                let c = layout.random_center(&mut rng);
                if layout.norm_dist(c, anchor) > 0.3 {
                    break c;
                }
            };
            let mut decoy = prototypes[other][1 - label as usize].clone();
            for (p, e) in
                decoy
                    .iter_mut()
                    .zip(normal_vec(&mut rng, spec.object_dim, spec.noise_rate))
            {
                *p += e;
            }
            let decoy_box = layout.object_box(&mut rng, decoy_center.0, decoy_center.1);
            objects.push(VisualObject {
                feature: decoy,
                bbox: decoy_box,
            });

            description = if rng.random_bool(0.3) {
                String::new()
            } else {
                filler_words(&mut rng, spec, 1, 3).join(" ")
            };
        } else if cue == Cue::Visual {
            description = filler_words(&mut rng, spec, 1, 3).join(" ");
        } else {
            let mut words = filler_words(&mut rng, spec, 0, 2);
            let kw = if label == 1 {
                OFFENSIVE_KEYWORDS[rng.random_range(0..OFFENSIVE_KEYWORDS.len())]
            } else {
                BENIGN_KEYWORDS[rng.random_range(0..BENIGN_KEYWORDS.len())]
            };
            let at = rng.random_range(0..=words.len());
            words.insert(at, kw.to_string());
            description = words.join(" ");
        }

        let filler_clusters = rng.random_range(1..=2);
        for _ in 0..filler_clusters {
            let words = filler_words(&mut rng, spec, 1, 3);
            tokens.extend(layout.place_line(&mut rng, &words));
        }
        let distractors = if analogy { 0 } else { rng.random_range(2..=4) };
        for _ in 0..distractors {
            let c = layout.random_center(&mut rng);
            let bbox = layout.object_box(&mut rng, c.0, c.1);
            objects.push(VisualObject {
                feature: normal_vec(&mut rng, spec.object_dim, 1.0),
                bbox,
            });
        }
        // Planted and decoy objects are pushed first; track where they land.
        let mut order: Vec<usize> = (0..objects.len()).collect();
        order.shuffle(&mut rng);
        let mut slots: Vec<Option<VisualObject>> = objects.into_iter().map(Some).collect();
        let objects: Vec<VisualObject> = order.iter().map(|&i| slots[i].take().unwrap()).collect();
        let position = |orig: usize| order.iter().position(|&i| i == orig).unwrap();
        planted_at.push(word_of_post.map(|word| Planted {
            word,
            object: position(0),
            decoy: position(1),
        }));
        tokens.shuffle(&mut rng);

        let n_comments = rng.random_range(0..=2);
        let comments = (0..n_comments)
            .map(|_| filler_words(&mut rng, spec, 1, 3).join(" "))
            .collect();

        let mut global = normal_vec(&mut rng, spec.global_dim, 1.0);
        let along: f64 = global.iter().zip(&hint_dir).map(|(g, h)| g * h).sum();
        let target = match cue {
            Cue::Visual if label == 1 => spec.global_hint,
            Cue::Visual => -spec.global_hint,
            _ => 0.0,
        };
        for (g, h) in global.iter_mut().zip(&hint_dir) {
            *g += (target - along) * h;
        }
        cues.push(cue);

        let objects = objects
            .into_iter()
            .map(|o| VisualObject {
                feature: f32_exact(o.feature),
                bbox: BoundingBox(f32_exact(o.bbox.0.to_vec()).try_into().unwrap()),
            })
            .collect();
        posts.push(MemePost {
            id: format!("syn{:05}", n),
            global_feature: f32_exact(global),
            visual_objects: objects,
            word_tokens: tokens,
            description,
            comments,
            image_size: (layout.width, layout.height),
            label: Some(label),
        });
    }

    let mut header = ManifestHeader::new(spec.object_dim, spec.global_dim);
    header.embeddings = Some(EMBEDDINGS_NAME.into());
    header.split_seed = spec.seed;
    Ok(SyntheticCorpus {
        dataset: Dataset::new(header, posts),
        embeddings,
        prototypes,
        planted: planted_at,
        cues,
        hint_dir,
    })
}

/// Generates a corpus and writes the manifest, feature files and embedding
/// table under `out`. Returns the manifest path.
pub fn gen_synthetic(spec: &SyntheticSpec, out: impl AsRef<Path>) -> Result<PathBuf> {
    let out = out.as_ref();
    let corpus = generate(spec)?;
    fs::create_dir_all(out)?;
    let manifest = save_dataset(out, MANIFEST_NAME, &corpus.dataset)?;
    let mut w = BufWriter::new(File::create(out.join(EMBEDDINGS_NAME))?);
    corpus.embeddings.write_text(&mut w)?;
    w.flush()?;
    Ok(manifest)
}
