//! Triplet and corpus formats, splitting, converters, and the synthetic
//! scene generator.

mod convert;
mod split;
pub mod toy;

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, ImageError};
use crate::rng::SplitMix64;

pub use convert::{from_cirr, from_fashioniq, FASHIONIQ_JOIN};
pub use split::{split, SplitResult};
pub use toy::{gen_toy, write_toy, ToyConfig, ToyDataset, ToyMode};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: field {field:?}: {reason}")]
    Ingest {
        path: String,
        line: usize,
        field: String,
        reason: String,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("unknown image ids: {}", .0.join(", "))]
    Missing(Vec<String>),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Triplet {
    pub qid: String,
    pub query_image: String,
    pub query_text: String,
    pub target_image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

impl Triplet {
    /// Field name and reason of the first violated invariant.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.qid.is_empty() {
            return Err(("qid", "empty".into()));
        }
        if self.query_image == self.target_image {
            return Err(("target_image", "query and target share the same image".into()));
        }
        if let Some(subset) = &self.subset {
            if subset.len() != 6 {
                return Err(("subset", format!("expected 6 ids, got {}", subset.len())));
            }
            if subset.iter().collect::<HashSet<_>>().len() != 6 {
                return Err(("subset", "ids are not unique".into()));
            }
            if !subset.contains(&self.target_image) {
                return Err(("subset", "does not contain the target image".into()));
            }
        }
        Ok(())
    }
}

pub fn parse_triplets(text: &str, path: &str) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |field: &str, reason: String| DatasetError::Ingest {
            path: path.to_string(),
            line: i + 1,
            field: field.to_string(),
            reason,
        };
        let t: Triplet = serde_json::from_str(line).map_err(|e| fail("", e.to_string()))?;
        t.validate().map_err(|(field, reason)| fail(field, reason))?;
        if !seen.insert(t.qid.clone()) {
            return Err(fail("qid", format!("duplicate qid {}", t.qid)));
        }
        out.push(t);
    }
    Ok(out)
}

pub fn load_triplets(path: &Path) -> Result<Vec<Triplet>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_triplets(&text, &path.display().to_string())
}

pub fn encode_jsonl<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("rows serialize");
        out.push(b'\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&encode_jsonl(rows)).map_err(io_err(path))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    Ppm,
    F32t,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub id: String,
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub format: ImageFormat,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub images: Vec<ImageEntry>,
}

impl Manifest {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| DatasetError::Ingest {
            path: path.to_string(),
            line: e.line(),
            field: String::new(),
            reason: e.to_string(),
        })?;
        let mut seen = HashSet::new();
        for (i, e) in m.images.iter().enumerate() {
            if !seen.insert(e.id.as_str()) {
                return Err(DatasetError::Ingest {
                    path: path.to_string(),
                    line: 0,
                    field: format!("images[{i}].id"),
                    reason: format!("duplicate id {}", e.id),
                });
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn ids(&self, split: Option<Split>) -> Vec<&str> {
        self.images
            .iter()
            .filter(|e| split.is_none_or(|s| e.split == s))
            .map(|e| e.id.as_str())
            .collect()
    }
}

/// Images keyed by id, in manifest order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    ids: Vec<String>,
    images: HashMap<String, Image>,
}

impl Corpus {
    pub fn insert(&mut self, id: String, image: Image) {
        if self.images.insert(id.clone(), image).is_none() {
            self.ids.push(id);
        }
    }

    pub fn get(&self, id: &str) -> Option<&Image> {
        self.images.get(id)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids referenced by `triplets` that are not in the corpus.
    pub fn missing(&self, triplets: &[Triplet]) -> Vec<String> {
        let mut missing: Vec<String> = triplets
            .iter()
            .flat_map(|t| [&t.query_image, &t.target_image])
            .filter(|id| !self.images.contains_key(id.as_str()))
            .cloned()
            .collect();
        missing.sort();
        missing.dedup();
        missing
    }
}

/// Loads every image of `manifest` (optionally one split) from disk.
pub fn load_corpus(manifest: &Manifest, base: &Path, split: Option<Split>) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    for e in &manifest.images {
        if split.is_some_and(|s| e.split != s) {
            continue;
        }
        let path = resolve(base, &e.path);
        let image = match e.format {
            ImageFormat::Ppm => crate::image::read_ppm(&path)?,
            ImageFormat::F32t => crate::image::read_f32t(&path)?,
        };
        corpus.insert(e.id.clone(), image);
    }
    Ok(corpus)
}

fn resolve(base: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Replaces the transition text by the triplet's caption on a `fraction`
/// of the triplets that carry one.
pub fn mix_captions(triplets: &[Triplet], fraction: f64, seed: u64) -> Vec<Triplet> {
    let mut rng = SplitMix64::new(seed);
    triplets
        .iter()
        .map(|t| {
            let mut t = t.clone();
            let draw = rng.next_f64();
            if let Some(c) = &t.caption {
                if draw < fraction {
                    t.query_text = c.clone();
                }
            }
            t
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const THREE: &str = r#"{"qid":"a","query_image":"1","query_text":"x","target_image":"2"}
{"qid":"b","query_image":"2","query_text":"y","target_image":"3","category":"dress"}
{"qid":"c","query_image":"3","query_text":"z","target_image":"1","subset":["1","4","5","6","7","8"]}
"#;

    #[test]
    fn three_lines() {
        let t = parse_triplets(THREE, "t.jsonl").unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t[1].category.as_deref(), Some("dress"));
        assert_eq!(String::from_utf8(encode_jsonl(&t)).unwrap(), THREE);
    }

    #[test]
    fn same_image_rejected_with_line() {
        let text = "{\"qid\":\"a\",\"query_image\":\"1\",\"query_text\":\"x\",\"target_image\":\"2\"}\n\
                    {\"qid\":\"b\",\"query_image\":\"4\",\"query_text\":\"x\",\"target_image\":\"4\"}\n";
        match parse_triplets(text, "t.jsonl").unwrap_err() {
            DatasetError::Ingest { line, field, reason, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "target_image");
                assert!(reason.contains("same image"));
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn short_subset_rejected() {
        let text = r#"{"qid":"a","query_image":"1","query_text":"x","target_image":"2","subset":["2","3","4","5","6"]}"#;
        let err = parse_triplets(text, "t").unwrap_err();
        assert!(err.to_string().contains("expected 6 ids"));
    }

    #[test]
    fn manifest_duplicates_rejected() {
        let m = r#"{"images":[{"id":"a","path":"a.ppm","format":"ppm","split":"train"},
                              {"id":"a","path":"b.ppm","format":"ppm","split":"val"}]}"#;
        assert!(Manifest::parse(m, "m").is_err());
    }

    #[test]
    fn caption_mixing_fraction() {
        let t: Vec<Triplet> = (0..1000)
            .map(|i| Triplet {
                qid: i.to_string(),
                query_image: "a".into(),
                query_text: "text".into(),
                target_image: "b".into(),
                subset: None,
                category: None,
                caption: Some("caption".into()),
            })
            .collect();
        let mixed = mix_captions(&t, 0.3, 1);
        let n = mixed.iter().filter(|t| t.query_text == "caption").count();
        assert!((250..350).contains(&n), "{n}");
        assert_eq!(mixed, mix_captions(&t, 0.3, 1));
    }
}
