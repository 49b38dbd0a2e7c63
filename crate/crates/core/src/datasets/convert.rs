//! Field mapping from CIRR- and FashionIQ-style annotation files.

use serde::Deserialize;

use super::{DatasetError, Result, Triplet};

/// FashionIQ pairs carry two captions; they are joined with this string.
pub const FASHIONIQ_JOIN: &str = " and ";

#[derive(Deserialize)]
struct CirrRecord {
    pairid: serde_json::Value,
    reference: String,
    #[serde(default)]
    target_hard: Option<String>,
    caption: String,
    #[serde(default)]
    img_set: Option<CirrSet>,
}

#[derive(Deserialize)]
struct CirrSet {
    members: Vec<String>,
}

#[derive(Deserialize)]
struct FiqRecord {
    candidate: String,
    target: String,
    captions: Vec<String>,
}

fn ingest(path: &str, index: usize, field: &str, reason: impl Into<String>) -> DatasetError {
    DatasetError::Ingest {
        path: path.to_string(),
        line: index + 1,
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn checked(t: Triplet, path: &str, index: usize) -> Result<Triplet> {
    t.validate().map_err(|(f, r)| ingest(path, index, f, r))?;
    Ok(t)
}

/// CIRR captions file: `[{pairid, reference, target_hard, caption, img_set: {members}}]`.
/// `img_set.members` becomes the subset. Records without `target_hard`
/// (test split) are skipped.
pub fn from_cirr(json: &str, path: &str) -> Result<Vec<Triplet>> {
    let records: Vec<CirrRecord> = serde_json::from_str(json).map_err(|e| ingest(path, e.line() - 1, "", e.to_string()))?;
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let Some(target) = r.target_hard else { continue };
        let qid = match r.pairid {
            serde_json::Value::String(s) => s,
            v => v.to_string(),
        };
        let t = Triplet {
            qid,
            query_image: r.reference,
            query_text: r.caption,
            target_image: target,
            subset: r.img_set.map(|s| s.members),
            category: None,
            caption: None,
        };
        out.push(checked(t, path, i)?);
    }
    Ok(out)
}

/// FashionIQ captions file: `[{candidate, target, captions: [..]}]` for one
/// category. Captions are concatenated with [`FASHIONIQ_JOIN`].
pub fn from_fashioniq(json: &str, category: &str, path: &str) -> Result<Vec<Triplet>> {
    let records: Vec<FiqRecord> = serde_json::from_str(json).map_err(|e| ingest(path, e.line() - 1, "", e.to_string()))?;
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let text: Vec<&str> = r.captions.iter().map(|c| c.trim()).filter(|c| !c.is_empty()).collect();
        if text.is_empty() {
            return Err(ingest(path, i, "captions", "no caption"));
        }
        let t = Triplet {
            qid: format!("{category}-{i:05}"),
            query_image: r.candidate,
            query_text: text.join(FASHIONIQ_JOIN),
            target_image: r.target,
            subset: None,
            category: Some(category.to_string()),
            caption: None,
        };
        out.push(checked(t, path, i)?);
    }
    Ok(out)
}
