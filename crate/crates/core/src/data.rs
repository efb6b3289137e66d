//! Domain vocabulary: boxes, visual objects, word tokens, token clusters,
//! meme posts and annotation records.
//!
//! All types are plain immutable values once constructed; they are `Send +
//! Sync` and cheap to clone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on visual objects per post.
pub const DEFAULT_MAX_OBJECTS: usize = 36;

/// A quadrilateral stored as four vertices `(x1,y1,...,x4,y4)`, clockwise
/// from the top-left corner, in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BoundingBox(pub [f64; 8]);

/// Tight axis-aligned envelope of a box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Envelope {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BoundingBox {
    /// Box from an axis-aligned rectangle.
    pub fn from_rect(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        BoundingBox([min_x, min_y, max_x, min_y, max_x, max_y, min_x, max_y])
    }

    pub fn vertices(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.0.chunks_exact(2).map(|c| (c[0], c[1]))
    }

    /// Checks that every coordinate is finite and non-negative.
    pub fn validate(&self) -> Result<()> {
        for (i, &c) in self.0.iter().enumerate() {
            if !c.is_finite() {
                return Err(Error::MalformedGeometry(format!(
                    "coordinate {i} is not finite ({c})"
                )));
            }
            if c < 0.0 {
                return Err(Error::MalformedGeometry(format!(
                    "coordinate {i} is negative ({c})"
                )));
            }
        }
        Ok(())
    }

    pub fn envelope(&self) -> Result<Envelope> {
        if let Some(c) = self.0.iter().find(|c| !c.is_finite()) {
            return Err(Error::MalformedGeometry(format!(
                "non-finite coordinate {c}"
            )));
        }
        Ok(self.envelope_unchecked())
    }

    pub(crate) fn envelope_unchecked(&self) -> Envelope {
        let mut env = Envelope {
            min_x: f64::INFINITY,
            min_y: f64::INFINITY,
            max_x: f64::NEG_INFINITY,
            max_y: f64::NEG_INFINITY,
        };
        for (x, y) in self.vertices() {
            env.min_x = env.min_x.min(x);
            env.min_y = env.min_y.min(y);
            env.max_x = env.max_x.max(x);
            env.max_y = env.max_y.max(y);
        }
        env
    }

    /// Scales x coordinates by `1/image_w` and y by `1/image_h`, clamped to
    /// `[0, 1]`.
    pub fn normalize(&self, image_w: f64, image_h: f64) -> Result<[f64; 8]> {
        if !(image_w > 0.0 && image_h > 0.0) || !image_w.is_finite() || !image_h.is_finite() {
            return Err(Error::MalformedGeometry(format!(
                "image size must be positive, got {image_w}x{image_h}"
            )));
        }
        self.validate()?;
        let mut out = [0.0; 8];
        for (i, (&c, o)) in self.0.iter().zip(out.iter_mut()).enumerate() {
            let scale = if i % 2 == 0 { image_w } else { image_h };
            *o = (c / scale).clamp(0.0, 1.0);
        }
        Ok(out)
    }
}

impl Envelope {
    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.min_x + self.max_x),
            0.5 * (self.min_y + self.max_y),
        )
    }

    pub fn union(&self, other: &Envelope) -> Envelope {
        Envelope {
            min_x: self.min_x.min(other.min_x),
            min_y: self.min_y.min(other.min_y),
            max_x: self.max_x.max(other.max_x),
            max_y: self.max_y.max(other.max_y),
        }
    }

    pub fn inflate(&self, pad: f64) -> Envelope {
        Envelope {
            min_x: self.min_x - pad,
            min_y: self.min_y - pad,
            max_x: self.max_x + pad,
            max_y: self.max_y + pad,
        }
    }

    /// Closed-interval intersection test.
    pub fn intersects(&self, other: &Envelope) -> bool {
        self.min_x <= other.max_x
            && other.min_x <= self.max_x
            && self.min_y <= other.max_y
            && other.min_y <= self.max_y
    }

    /// Squared distance between the two envelopes (zero when they touch).
    pub fn gap_sq(&self, other: &Envelope) -> f64 {
        let dx = (other.min_x - self.max_x)
            .max(self.min_x - other.max_x)
            .max(0.0);
        let dy = (other.min_y - self.max_y)
            .max(self.min_y - other.max_y)
            .max(0.0);
        dx * dx + dy * dy
    }

    pub fn to_box(&self) -> BoundingBox {
        BoundingBox::from_rect(self.min_x, self.min_y, self.max_x, self.max_y)
    }
}

/// A detected image region: latent feature plus its box.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualObject {
    pub feature: Vec<f64>,
    pub bbox: BoundingBox,
}

/// One OCR word with its box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordToken {
    pub word: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

impl WordToken {
    pub fn new(word: impl Into<String>, bbox: BoundingBox) -> Self {
        WordToken {
            word: word.into(),
            bbox,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.word.trim().is_empty() {
            return Err(Error::MalformedGeometry("empty word token".into()));
        }
        self.bbox.validate()
    }
}

/// A spatially grouped phrase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenCluster {
    /// Words in reading order.
    pub phrase: Vec<String>,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    /// Indices into the post's token list, in reading order.
    pub member_indices: Vec<usize>,
}

impl TokenCluster {
    pub fn text(&self) -> String {
        self.phrase.join(" ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One social-media post.
#[derive(Clone, Debug, PartialEq)]
pub struct MemePost {
    pub id: String,
    pub global_feature: Vec<f64>,
    pub visual_objects: Vec<VisualObject>,
    pub word_tokens: Vec<WordToken>,
    /// Empty when the post has no description.
    pub description: String,
    /// Oldest first.
    pub comments: Vec<String>,
    pub image_size: (f64, f64),
    pub label: Option<u8>,
}

impl MemePost {
    pub fn validate(&self, object_dim: usize, max_objects: usize) -> Result<()> {
        let bad = |reason: String| Error::InvalidPost {
            id: self.id.clone(),
            reason,
        };
        if self.visual_objects.len() > max_objects {
            return Err(bad(format!(
                "{} visual objects exceeds cap {max_objects}",
                self.visual_objects.len()
            )));
        }
        if let Some(l) = self.label {
            if l > 1 {
                return Err(bad(format!("label {l} not in {{0,1}}")));
            }
        }
        let (w, h) = self.image_size;
        if !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()) {
            return Err(bad(format!("image size {w}x{h}")));
        }
        if self.global_feature.iter().any(|x| !x.is_finite()) {
            return Err(bad("non-finite global feature".into()));
        }
        for (k, obj) in self.visual_objects.iter().enumerate() {
            if obj.feature.len() != object_dim {
                return Err(bad(format!(
                    "object {k} has feature length {}, expected {object_dim}",
                    obj.feature.len()
                )));
            }
            if obj.feature.iter().any(|x| !x.is_finite()) {
                return Err(bad(format!("object {k} has non-finite feature")));
            }
            obj.bbox.validate().map_err(|e| bad(e.to_string()))?;
        }
        for tok in &self.word_tokens {
            tok.validate().map_err(|e| bad(e.to_string()))?;
        }
        Ok(())
    }
}

/// Ratings from independent annotators for one post.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub post_id: String,
    pub ratings: Vec<u8>,
}

impl AnnotationRecord {
    pub fn validate(&self) -> Result<()> {
        if self.ratings.len() < 2 {
            return Err(Error::AmbiguousLabel(format!(
                "{}: need at least 2 ratings, got {}",
                self.post_id,
                self.ratings.len()
            )));
        }
        if let Some(r) = self.ratings.iter().find(|&&r| r > 1) {
            return Err(Error::AmbiguousLabel(format!(
                "{}: rating {r} not in {{0,1}}",
                self.post_id
            )));
        }
        Ok(())
    }
}

/// Majority vote over the ratings. Ties are rejected.
pub fn majority_label(record: &AnnotationRecord) -> Result<u8> {
    record.validate()?;
    let ones = record.ratings.iter().filter(|&&r| r == 1).count();
    let zeros = record.ratings.len() - ones;
    match ones.cmp(&zeros) {
        std::cmp::Ordering::Greater => Ok(1),
        std::cmp::Ordering::Less => Ok(0),
        std::cmp::Ordering::Equal => Err(Error::AmbiguousLabel(format!(
            "{}: tied vote {ones}-{zeros}",
            record.post_id
        ))),
    }
}
