//! Inter-annotator agreement over binary ratings.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::data::AnnotationRecord;
use crate::error::{Error, Result};

/// Fleiss' kappa for two categories. Every record must carry the same
/// number of ratings. If all ratings fall in one category, chance
/// agreement is total and kappa is defined as 1.
pub fn fleiss_kappa(records: &[AnnotationRecord]) -> Result<f64> {
    if records.len() < 2 {
        return Err(Error::Metric(format!(
            "Fleiss kappa needs at least 2 records, got {}",
            records.len()
        )));
    }
    let n = records[0].ratings.len();
    let mut agreement = 0.0;
    let mut positives = 0usize;
    for r in records {
        r.validate()?;
        if r.ratings.len() != n {
            return Err(Error::Metric(format!(
                "{} has {} ratings, expected {n}",
                r.post_id,
                r.ratings.len()
            )));
        }
        let ones = r.ratings.iter().filter(|&&x| x == 1).count();
        let zeros = n - ones;
        positives += ones;
        agreement += (ones * ones + zeros * zeros - n) as f64 / (n * (n - 1)) as f64;
    }
    let p_bar = agreement / records.len() as f64;
    let p1 = positives as f64 / (records.len() * n) as f64;
    let p_e = p1 * p1 + (1.0 - p1) * (1.0 - p1);
    if p_e >= 1.0 {
        return Ok(1.0);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Reads JSON lines of `{"post_id": ..., "ratings": [...]}`; blank lines
/// are skipped.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
