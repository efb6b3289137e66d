//! Binary feature files.
//!
//! Layout (little-endian): magic `AOMF`, u32 version, u32 d_g, u32 K,
//! u32 d, then d_g f32 (global feature), then K records of d f32 (object
//! feature) followed by 8 f32 (box vertices).

use std::io::{Read, Write};

use crate::data::{BoundingBox, VisualObject};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"AOMF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub global: Vec<f64>,
    pub objects: Vec<VisualObject>,
    pub object_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureHeader {
    pub version: u32,
    pub global_dim: u32,
    pub num_objects: u32,
    pub object_dim: u32,
}

fn u32_at(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(buf[at..at + 4].try_into().unwrap())
}

pub fn read_header(r: &mut impl Read) -> Result<FeatureHeader> {
    let mut buf = [0u8; 20];
    r.read_exact(&mut buf)?;
    if &buf[..4] != FEATURE_MAGIC {
        return Err(Error::Format("feature file: bad magic".into()));
    }
    let header = FeatureHeader {
        version: u32_at(&buf, 4),
        global_dim: u32_at(&buf, 8),
        num_objects: u32_at(&buf, 12),
        object_dim: u32_at(&buf, 16),
    };
    if header.version != FEATURE_VERSION {
        return Err(Error::Format(format!(
            "feature file: unsupported version {}",
            header.version
        )));
    }
    Ok(header)
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

pub fn read_features(r: &mut impl Read) -> Result<FeatureFile> {
    let h = read_header(r)?;
    let global = read_f32s(r, h.global_dim as usize)?;
    let d = h.object_dim as usize;
    let mut objects = Vec::with_capacity(h.num_objects as usize);
    for _ in 0..h.num_objects {
        let feature = read_f32s(r, d)?;
        let coords = read_f32s(r, 8)?;
        objects.push(VisualObject {
            feature,
            bbox: BoundingBox(coords.try_into().unwrap()),
        });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("feature file: trailing bytes".into()));
    }
    Ok(FeatureFile {
        global,
        objects,
        object_dim: d,
    })
}

/// Values are stored as `f32`; anything not exactly representable is
/// rounded.
pub fn write_features(
    w: &mut impl Write,
    global: &[f64],
    objects: &[VisualObject],
    object_dim: usize,
) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + 4 * (global.len() + objects.len() * (object_dim + 8)));
    buf.extend_from_slice(FEATURE_MAGIC);
    for v in [
        FEATURE_VERSION,
        global.len() as u32,
        objects.len() as u32,
        object_dim as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &x in global {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    for obj in objects {
        if obj.feature.len() != object_dim {
            return Err(Error::Shape {
                op: "write_features",
                left: vec![object_dim],
                right: vec![obj.feature.len()],
            });
        }
        for &x in obj.feature.iter().chain(obj.bbox.0.iter()) {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}
