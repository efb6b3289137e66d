//! JSON-lines dataset manifests.
//!
//! The first line is a header object; each following line is one post.
//! Feature file paths are relative to the manifest's directory. An empty
//! file is an empty dataset.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::{read_features, write_features};
use crate::data::{MemePost, Split, WordToken, DEFAULT_MAX_OBJECTS};
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "aomd-manifest";
pub const MANIFEST_VERSION: u32 = 1;
/// Environment variable naming the default data root.
pub const DATA_DIR_ENV: &str = "AOMD_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub object_dim: usize,
    pub global_dim: usize,
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
    /// Embedding table path relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<String>,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_max_objects() -> usize {
    DEFAULT_MAX_OBJECTS
}

impl ManifestHeader {
    pub fn new(object_dim: usize, global_dim: usize) -> Self {
        ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            object_dim,
            global_dim,
            max_objects: DEFAULT_MAX_OBJECTS,
            embeddings: None,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostRecord {
    pub id: String,
    pub image_w: f64,
    pub image_h: f64,
    pub tokens: Vec<WordToken>,
    pub description: String,
    pub comments: Vec<String>,
    pub label: Option<u8>,
    pub feature_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// Posts with their split tags.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: ManifestHeader,
    pub posts: Vec<MemePost>,
    pub splits: Vec<Split>,
    /// Directory holding the manifest, when loaded from disk.
    pub root: Option<PathBuf>,
}

impl Dataset {
    pub fn new(header: ManifestHeader, posts: Vec<MemePost>) -> Self {
        let splits = assign_splits(&posts, header.split_seed, DEFAULT_FRACTIONS);
        Dataset {
            header,
            posts,
            splits,
            root: None,
        }
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    pub fn split(&self, which: Split) -> Vec<&MemePost> {
        self.posts
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == which)
            .map(|(p, _)| p)
            .collect()
    }

    pub fn split_indices(&self, which: Split) -> Vec<usize> {
        (0..self.posts.len())
            .filter(|&i| self.splits[i] == which)
            .collect()
    }

    pub fn embeddings_path(&self) -> Option<PathBuf> {
        let rel = self.header.embeddings.as_ref()?;
        Some(match &self.root {
            Some(root) => root.join(rel),
            None => PathBuf::from(rel),
        })
    }
}

/// Train / validation / test fractions.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.7, 0.1, 0.2];

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stable 64-bit key for an id under a seed (FNV-1a, then a mixer).
pub fn split_key(id: &str, seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(h ^ splitmix(seed))
}

/// Stratified split: within each label group, posts are ordered by
/// [`split_key`] and cut at the given fractions.
pub fn assign_splits(posts: &[MemePost], seed: u64, fractions: [f64; 3]) -> Vec<Split> {
    let mut out = vec![Split::Train; posts.len()];
    for group in [Some(0u8), Some(1), None] {
        let mut members: Vec<usize> = (0..posts.len())
            .filter(|&i| posts[i].label == group)
            .collect();
        members.sort_by_key(|&i| (split_key(&posts[i].id, seed), posts[i].id.clone()));
        let n = members.len();
        let n_train = (fractions[0] * n as f64).round() as usize;
        let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
        for (rank, &i) in members.iter().enumerate() {
            out[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    out
}

fn feature_file_name(index: usize, id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .take(48)
        .collect();
    format!("features/{index:06}_{safe}.aomf")
}

pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Dataset> {
    let manifest = manifest.as_ref();
    let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let reader = BufReader::new(File::open(manifest)?);
    let mut lines = reader.lines().enumerate().filter_map(|(i, l)| match l {
        Ok(s) if s.trim().is_empty() => None,
        other => Some((i + 1, other)),
    });

    let Some((hline, header)) = lines.next() else {
        let mut ds = Dataset::new(ManifestHeader::new(0, 0), Vec::new());
        ds.root = Some(root);
        return Ok(ds);
    };
    let header: ManifestHeader = serde_json::from_str(&header?).map_err(|e| Error::Parse {
        path: manifest.to_path_buf(),
        line: hline,
        reason: format!("header: {e}"),
    })?;
    if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
        return Err(Error::Parse {
            path: manifest.to_path_buf(),
            line: hline,
            reason: format!(
                "unsupported manifest {} v{} (expected {MANIFEST_FORMAT} v{MANIFEST_VERSION})",
                header.format, header.version
            ),
        });
    }

    let mut posts = Vec::new();
    let mut stored_splits = Vec::new();
    for (lineno, line) in lines {
        let line = line?;
        let rec: PostRecord = serde_json::from_str(&line).map_err(|e| {
            // Name the record when the id can still be recovered.
            let id = serde_json::from_str::<serde_json::Value>(&line)
                .ok()
                .and_then(|v| v.get("id").and_then(|i| i.as_str()).map(String::from))
                .unwrap_or_else(|| format!("line {lineno}"));
            Error::load(id, format!("malformed record: {e}"))
        })?;
        let (post, split) = record_to_post(rec, &root, &header)?;
        posts.push(post);
        stored_splits.push(split);
    }

    let splits = if stored_splits.iter().all(Option::is_some) {
        stored_splits.into_iter().map(Option::unwrap).collect()
    } else if stored_splits.iter().all(Option::is_none) {
        assign_splits(&posts, header.split_seed, DEFAULT_FRACTIONS)
    } else {
        return Err(Error::Parse {
            path: manifest.to_path_buf(),
            line: 0,
            reason: "split tags must be given for every record or for none".into(),
        });
    };
    Ok(Dataset {
        header,
        posts,
        splits,
        root: Some(root),
    })
}

fn record_to_post(
    rec: PostRecord,
    root: &Path,
    header: &ManifestHeader,
) -> Result<(MemePost, Option<Split>)> {
    let path = root.join(&rec.feature_file);
    let mut file = BufReader::new(
        File::open(&path)
            .map_err(|e| Error::load(&rec.id, format!("feature file {}: {e}", path.display())))?,
    );
    let features = read_features(&mut file).map_err(|e| Error::load(&rec.id, e.to_string()))?;
    if features.object_dim != header.object_dim {
        return Err(Error::DimensionMismatch {
            record: rec.id,
            what: "object feature",
            expected: header.object_dim,
            found: features.object_dim,
        });
    }
    if features.global.len() != header.global_dim {
        return Err(Error::DimensionMismatch {
            record: rec.id,
            what: "global feature",
            expected: header.global_dim,
            found: features.global.len(),
        });
    }
    let mut objects = features.objects;
    // Detector output is stored most-confident first.
    objects.truncate(header.max_objects);
    let post = MemePost {
        id: rec.id,
        global_feature: features.global,
        visual_objects: objects,
        word_tokens: rec.tokens,
        description: rec.description,
        comments: rec.comments,
        image_size: (rec.image_w, rec.image_h),
        label: rec.label,
    };
    post.validate(header.object_dim, header.max_objects)
        .map_err(|e| Error::load(&post.id, e.to_string()))?;
    Ok((post, rec.split))
}

/// Writes `manifest_name` plus one feature file per post under `dir`.
/// Split tags are written for every record.
pub fn save_dataset(dir: impl AsRef<Path>, manifest_name: &str, ds: &Dataset) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("features"))?;
    let manifest_path = dir.join(manifest_name);
    let mut out = BufWriter::new(File::create(&manifest_path)?);
    serde_json::to_writer(&mut out, &ds.header)?;
    out.write_all(b"\n")?;
    for (i, (post, split)) in ds.posts.iter().zip(&ds.splits).enumerate() {
        let rel = feature_file_name(i, &post.id);
        let mut f = BufWriter::new(File::create(dir.join(&rel))?);
        write_features(
            &mut f,
            &post.global_feature,
            &post.visual_objects,
            ds.header.object_dim,
        )?;
        f.flush()?;
        let rec = PostRecord {
            id: post.id.clone(),
            image_w: post.image_size.0,
            image_h: post.image_size.1,
            tokens: post.word_tokens.clone(),
            description: post.description.clone(),
            comments: post.comments.clone(),
            label: post.label,
            feature_file: rel,
            split: Some(*split),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(manifest_path)
}
